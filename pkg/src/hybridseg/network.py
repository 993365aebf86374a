"""Hybrid segmentation network: CNN stem, Swin encoder/decoder with patch merging/expanding, skip fusion."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    BlockConfig,
    CNNBlock,
    DimensionError,
    PatchEmbed,
    PatchExpand,
    PatchMerge,
    PatchUnembed,
    SkipFuse,
    SwinBlockPair,
    init_weights,
)
from .config import NetConfig


class HybridSegNet(nn.Module):
    """Hybrid segmentation network producing per-pixel 2-class probabilities.

    Encoder: three CNN blocks (the last two start with a max-pool), a patch
    embedding, then for every stage a Swin block pair followed by a patch merge.
    The decoder mirrors it: per stage a patch expand, a token-domain skip fusion
    and a Swin block pair; then tokens are projected back to pixels and three
    CNN blocks with nearest-neighbour upsampling consume the stem skips.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3 = cfg.stem_channels
        slope = cfg.leaky_slope

        self.stem = nn.ModuleList([
            CNNBlock(cfg.in_channels, c1, pool_first=False, leaky_slope=slope),
            CNNBlock(c1, c2, pool_first=True, leaky_slope=slope),
            CNNBlock(c2, c3, pool_first=True, leaky_slope=slope),
        ])
        self.embed = PatchEmbed(c3, cfg.embed_dim, cfg.patch)

        dims, windows = cfg.stage_dims(), cfg.stage_windows()
        self.encoder = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.expands = nn.ModuleList()
        self.token_skips = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for dim, heads, win in zip(dims, cfg.stage_heads, windows):
            block = BlockConfig(dim, heads, win, cfg.mlp_ratio, cfg.se_reduction, slope)
            self.encoder.append(SwinBlockPair(block))
            self.merges.append(PatchMerge(dim))
            self.expands.append(PatchExpand(2 * dim))
            self.token_skips.append(SkipFuse(dim, dim))
            self.decoder.append(SwinBlockPair(block))

        self.unembed = PatchUnembed(cfg.embed_dim, c3, cfg.patch)
        self.pixel_skips = nn.ModuleList([
            SkipFuse(c3, c3, pixel=True),
            SkipFuse(c2, c2, pixel=True),
            SkipFuse(c1, c1, pixel=True),
        ])
        self.up_blocks = nn.ModuleList([
            CNNBlock(c3, c2, leaky_slope=slope),
            CNNBlock(c2, c1, leaky_slope=slope),
            CNNBlock(c1, c1, leaky_slope=slope),
        ])
        self.head = nn.Conv2d(c1, cfg.num_classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != cfg.in_channels or x.shape[-2:] != (cfg.input_size,) * 2:
            raise DimensionError(
                f"expected (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), "
                f"got {tuple(x.shape)}")
        pixel_feats = []
        for block in self.stem:
            x = block(x)
            pixel_feats.append(x)

        t, h, w = self.embed(x)
        token_feats = []
        for block, merge in zip(self.encoder, self.merges):
            t = block(t, h, w)
            token_feats.append((t, h, w))
            t, h, w = merge(t, h, w)

        for i in reversed(range(len(self.decoder))):
            t, h, w = self.expands[i](t, h, w)
            skip, sh, sw = token_feats[i]
            if (sh, sw) != (h, w):
                raise DimensionError(f"decoder grid {(h, w)} does not mirror encoder {(sh, sw)}")
            t = self.token_skips[i](t, skip)
            t = self.decoder[i](t, h, w)

        x = self.unembed(t, h, w)
        for j, (fuse, block) in enumerate(zip(self.pixel_skips, self.up_blocks)):
            if j:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(fuse(x, pixel_feats[2 - j]))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def build_model(cfg: NetConfig, seed: int = 0) -> HybridSegNet:
    """Construct and deterministically initialise a network for ``cfg``."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HybridSegNet(cfg)
        init_weights(model)
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def flatten_params(model: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def assign_flat(model: nn.Module, vector: torch.Tensor) -> None:
    with torch.no_grad():
        nn.utils.vector_to_parameters(vector, model.parameters())


def set_bn_momentum(model: nn.Module, momentum: float | None) -> list:
    """Set every BatchNorm momentum, returning the previous values for restoration."""
    previous = []
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            previous.append(m.momentum)
            m.momentum = momentum
    return previous


def restore_bn_momentum(model: nn.Module, previous: list) -> None:
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    for m, value in zip(bns, previous):
        m.momentum = value
