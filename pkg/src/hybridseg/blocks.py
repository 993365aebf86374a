"""Neural building blocks: CNN block, window attention, SE gating, patch ops.

Token tensors are laid out ``(batch, tokens, dim)`` in row-major order over a
``(h, w)`` grid; the grid size is passed alongside the tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

MASK_FILL = -1.0e4


class DimensionError(ValueError):
    """Input shapes violate a block's divisibility or matching contract."""


class ParameterError(ValueError):
    """A hyperparameter is outside its legal range."""


@dataclass(frozen=True)
class BlockConfig:
    embed_dim: int
    num_heads: int
    window: int
    mlp_ratio: float = 4.0
    se_reduction: int = 16
    leaky_slope: float = 0.01
    shift: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ParameterError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.shift not in (0, self.window // 2):
            raise ParameterError(f"shift must be 0 or {self.window // 2}, got {self.shift}")
        if self.se_reduction < 1:
            raise ParameterError("se_reduction must be >= 1")


def trunc_normal_(tensor: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


def init_weights(module: nn.Module) -> None:
    """Initialise a module tree in place (truncated normal linears, fan-in convs)."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="leaky_relu", a=0.01)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, WindowAttention):
            trunc_normal_(m.relative_position_bias_table)


class CNNBlock(nn.Module):
    """Two 3x3 conv + BN + LeakyReLU layers, optionally preceded by a 2x2 max-pool."""

    def __init__(self, in_channels: int, out_channels: int, pool_first: bool = False,
                 leaky_slope: float = 0.01):
        super().__init__()
        self.pool_first = pool_first
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.LeakyReLU(leaky_slope),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.LeakyReLU(leaky_slope),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pool_first:
            if x.shape[-2] % 2 or x.shape[-1] % 2:
                raise DimensionError(f"max-pool needs even spatial dims, got {tuple(x.shape[-2:])}")
            x = F.max_pool2d(x, 2)
        return self.body(x)


class PatchEmbed(nn.Module):
    """Non-overlapping ``patch x patch`` linear projection of a feature map to tokens."""

    def __init__(self, in_channels: int, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(in_channels * patch * patch, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        b, c, height, width = x.shape
        p = self.patch
        if height % p or width % p:
            raise DimensionError(f"spatial dims {(height, width)} not divisible by patch {p}")
        h, w = height // p, width // p
        x = x.reshape(b, c, h, p, w, p).permute(0, 2, 4, 3, 5, 1).reshape(b, h * w, p * p * c)
        return self.norm(self.proj(x)), h, w


class PatchUnembed(nn.Module):
    """Inverse of :class:`PatchEmbed`: each token becomes a ``patch x patch`` pixel block."""

    def __init__(self, dim: int, out_channels: int, patch: int):
        super().__init__()
        self.patch = patch
        self.out_channels = out_channels
        self.proj = nn.Linear(dim, out_channels * patch * patch)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b = x.shape[0]
        p, c = self.patch, self.out_channels
        x = self.proj(x).reshape(b, h, w, p, p, c)
        return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h * p, w * p)


def window_partition(x: torch.Tensor, h: int, w: int, window: int) -> torch.Tensor:
    """``(B, h*w, C)`` -> ``(B*num_windows, window*window, C)``; pure re-indexing."""
    b, n, c = x.shape
    if n != h * w:
        raise DimensionError(f"token count {n} != h*w = {h * w}")
    if h % window or w % window:
        raise DimensionError(f"grid {(h, w)} not divisible by window {window}")
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    nw_total, area, c = windows.shape
    window = math.isqrt(area)
    if window * window != area:
        raise DimensionError(f"window area {area} is not a perfect square")
    if h % window or w % window:
        raise DimensionError(f"grid {(h, w)} not divisible by window {window}")
    per_image = (h // window) * (w // window)
    if nw_total % per_image:
        raise DimensionError(f"{nw_total} windows inconsistent with grid {(h, w)}")
    b = nw_total // per_image
    x = windows.view(b, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h * w, c)


def cyclic_shift(x: torch.Tensor, h: int, w: int, dy: int, dx: int) -> torch.Tensor:
    """Torus roll of the token grid: token at (i, j) moves to ((i+dy) % h, (j+dx) % w)."""
    b, n, c = x.shape
    if n != h * w:
        raise DimensionError(f"token count {n} != h*w = {h * w}")
    return torch.roll(x.view(b, h, w, c), shifts=(dy, dx), dims=(1, 2)).reshape(b, n, c)


def shift_region_ids(h: int, w: int, window: int, shift: int) -> torch.Tensor:
    """Region label per token of the shifted grid, ``(h, w)`` int tensor."""
    ids = torch.zeros(h, w, dtype=torch.long)
    if shift == 0:
        return ids
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in bounds:
        for ws in bounds:
            ids[hs, ws] = label
            label += 1
    return ids


def shift_attention_mask(h: int, w: int, window: int, shift: int) -> torch.Tensor:
    """Additive ``(num_windows, window**2, window**2)`` mask; 0 within a region, -1e4 across."""
    if not 0 <= shift < window:
        raise ParameterError(f"shift {shift} must lie in [0, window={window})")
    if h % window or w % window:
        raise DimensionError(f"grid {(h, w)} not divisible by window {window}")
    ids = shift_region_ids(h, w, window, shift).view(1, h * w, 1).float()
    ids = window_partition(ids, h, w, window).squeeze(-1)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.where(diff != 0, torch.tensor(MASK_FILL), torch.tensor(0.0))


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    """Multi-head self-attention inside each window with a learned relative-position bias."""

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        if dim % num_heads:
            raise ParameterError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window),
                             persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attention_weights(self, windows: torch.Tensor, mask: torch.Tensor | None = None):
        """Return ``(softmax weights, v)``; weights are ``(B_, heads, n, n)``."""
        bw, n, c = windows.shape
        if n != self.window * self.window:
            raise DimensionError(f"window area {n} != {self.window}**2")
        head_dim = c // self.num_heads
        qkv = self.qkv(windows).reshape(bw, n, 3, self.num_heads, head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(n, n, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.to(attn).unsqueeze(1).unsqueeze(0)
            attn = attn.view(bw, self.num_heads, n, n)
        return attn.softmax(dim=-1), v

    def forward(self, windows: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        weights, v = self.attention_weights(windows, mask)
        out = (weights @ v).transpose(1, 2).reshape(windows.shape)
        return self.proj(out)


class SEGate(nn.Module):
    """Squeeze-and-excitation over the channel axis of a token tensor."""

    def __init__(self, dim: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, dim // reduction)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x).unsqueeze(1)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """One pre-norm (S)W-MSA + SE + MLP block; ``shift > 0`` makes it the shifted variant."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = WindowAttention(cfg.embed_dim, cfg.num_heads, cfg.window)
        self.se = SEGate(cfg.embed_dim, cfg.se_reduction)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, int(cfg.embed_dim * cfg.mlp_ratio))

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        win, shift = self.cfg.window, self.cfg.shift
        if h % win or w % win:
            raise DimensionError(f"grid {(h, w)} not divisible by window {win}")
        y = self.norm1(x)
        mask = None
        if shift:
            y = cyclic_shift(y, h, w, -shift, -shift)
            mask = shift_attention_mask(h, w, win, shift)
        y = window_reverse(self.attn(window_partition(y, h, w, win), mask), h, w)
        if shift:
            y = cyclic_shift(y, h, w, shift, shift)
        x = x + self.se(y)
        return x + self.mlp(self.norm2(x))


class SwinBlockPair(nn.Module):
    """W-MSA block followed by an SW-MSA block (shift = window // 2)."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.regular = SwinBlock(replace(cfg, shift=0))
        self.shifted = SwinBlock(replace(cfg, shift=cfg.window // 2))

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return self.shifted(self.regular(x, h, w), h, w)


class PatchMerge(nn.Module):
    """Concatenate each 2x2 token neighbourhood (4*dim) and project to 2*dim."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor, h: int, w: int) -> tuple[torch.Tensor, int, int]:
        b, n, c = x.shape
        if n != h * w:
            raise DimensionError(f"token count {n} != h*w = {h * w}")
        if h % 2 or w % 2:
            raise DimensionError(f"patch merge needs even grid, got {(h, w)}")
        x = x.view(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 4, 2, 5)
        x = x.reshape(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x)), h // 2, w // 2


class PatchExpand(nn.Module):
    """Project dim -> 2*dim and rearrange into a 2x2 neighbourhood of dim/2 tokens."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise DimensionError(f"patch expand needs even dim, got {dim}")
        self.expand = nn.Linear(dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x: torch.Tensor, h: int, w: int) -> tuple[torch.Tensor, int, int]:
        b, n, c = x.shape
        if c % 2:
            raise DimensionError(f"patch expand needs even dim, got {c}")
        if n != h * w:
            raise DimensionError(f"token count {n} != h*w = {h * w}")
        x = self.expand(x).view(b, h, w, 2, 2, c // 2).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, 4 * n, c // 2)
        return self.norm(x), 2 * h, 2 * w


class SkipFuse(nn.Module):
    """Concatenate decoder and encoder features on the channel axis and project back.

    Works on token tensors ``(B, N, C)`` or, with ``pixel=True``, on feature maps
    ``(B, C, H, W)`` through a 1x1 convolution.
    """

    def __init__(self, dec_dim: int, enc_dim: int, pixel: bool = False):
        super().__init__()
        self.pixel = pixel
        if pixel:
            self.proj = nn.Conv2d(dec_dim + enc_dim, dec_dim, 1)
        else:
            self.proj = nn.Linear(dec_dim + enc_dim, dec_dim)

    def forward(self, dec: torch.Tensor, enc: torch.Tensor) -> torch.Tensor:
        spatial = slice(2, None) if self.pixel else slice(1, 2)
        if dec.shape[0] != enc.shape[0] or dec.shape[spatial] != enc.shape[spatial]:
            raise DimensionError(
                f"skip spatial mismatch: decoder {tuple(dec.shape)} vs encoder {tuple(enc.shape)}")
        axis = 1 if self.pixel else -1
        return self.proj(torch.cat([dec, enc], dim=axis))
