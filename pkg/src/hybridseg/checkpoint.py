"""Single-file checkpoint container.

Layout: 16-byte header (8-byte magic, little-endian u32 format version, u32
metadata length), UTF-8 JSON metadata holding scalar state and a tensor index
(name, dtype, shape, offset, nbytes), then the raw little-endian tensor payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .semisup import PseudoLabelStore

MAGIC = b"HSEGCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.uint8: "|u1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    student: dict[str, torch.Tensor]
    teacher: dict[str, torch.Tensor]
    momentum: dict[str, torch.Tensor] = field(default_factory=dict)
    pseudo: PseudoLabelStore = field(default_factory=PseudoLabelStore)
    step: int = 0
    semi_step: int = 0
    epoch: int = 0
    best_val_dsc: float = -1.0
    rng_state: dict = field(default_factory=dict)
    data_rng_state: dict = field(default_factory=dict)


def _tensor_sections(ckpt: Checkpoint) -> list[tuple[str, torch.Tensor]]:
    items = []
    for prefix, tensors in (("student", ckpt.student), ("teacher", ckpt.teacher),
                            ("momentum", ckpt.momentum)):
        items.extend((f"{prefix}/{name}", t) for name, t in tensors.items())
    items.extend((f"pseudo/{image_id}", t) for image_id, t in ckpt.pseudo.labels.items())
    return items


def encode(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, tensor in _tensor_sections(ckpt):
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise FormatError(f"tensor {name}: unsupported dtype {tensor.dtype}")
        raw = tensor.numpy().astype(_DTYPES[tensor.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[tensor.dtype], "shape": list(tensor.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "semi_step": ckpt.semi_step,
        "epoch": ckpt.epoch,
        "best_val_dsc": ckpt.best_val_dsc,
        "rng_state": ckpt.rng_state,
        "data_rng_state": ckpt.data_rng_state,
        "pseudo": {"ema_alpha": ckpt.pseudo.ema_alpha, "T": ckpt.pseudo.T,
                   "visits": ckpt.pseudo.visits},
        "tensors": index,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + b"".join(chunks)


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise FormatError("header: file shorter than 16 bytes")
    magic, version, meta_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"header: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"header: unsupported version {version} (expected {VERSION})")
    start = _HEADER.size
    try:
        meta = json.loads(blob[start:start + meta_len].decode("utf-8"))
        config = ExperimentConfig.from_dict(meta["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"metadata: {exc}") from None
    payload = memoryview(blob)[start + meta_len:]

    sections: dict[str, dict[str, torch.Tensor]] = {"student": {}, "teacher": {},
                                                    "momentum": {}, "pseudo": {}}
    for entry in meta.get("tensors", []):
        name = entry["name"]
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload) or entry["dtype"] not in _TORCH:
            raise FormatError(f"payload: tensor {name} is truncated or has unknown dtype")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=entry["dtype"])
        try:
            arr = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
        except ValueError as exc:
            raise FormatError(f"payload: tensor {name}: {exc}") from None
        prefix, _, key = name.partition("/")
        if prefix not in sections:
            raise FormatError(f"payload: unknown section for tensor {name}")
        sections[prefix][key] = torch.from_numpy(arr.copy())

    pseudo_meta = meta["pseudo"]
    pseudo = PseudoLabelStore(pseudo_meta["ema_alpha"], pseudo_meta["T"],
                              sections["pseudo"], dict(pseudo_meta["visits"]))
    return Checkpoint(
        config=config,
        student=sections["student"],
        teacher=sections["teacher"],
        momentum=sections["momentum"],
        pseudo=pseudo,
        step=meta["step"],
        semi_step=meta["semi_step"],
        epoch=meta["epoch"],
        best_val_dsc=meta["best_val_dsc"],
        rng_state=meta["rng_state"],
        data_rng_state=meta["data_rng_state"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return decode(blob)
