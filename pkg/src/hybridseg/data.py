"""Dataset I/O (PGM images, tab-separated manifests), synthetic lesion data and
geometric base augmentation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

NONE = "NONE"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image_id: str
    image: Path
    mask: Path | None


@dataclass
class Dataset:
    """In-memory dataset: images ``(N, 1, H, W)`` in [0, 1], masks ``(N, H, W)`` in {0, 1}."""

    ids: list[str]
    images: torch.Tensor
    masks: torch.Tensor | None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labeled(self) -> bool:
        return self.masks is not None

    def subset(self, indices) -> "Dataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        masks = None if self.masks is None else self.masks[idx]
        return Dataset([self.ids[i] for i in idx.tolist()], self.images[idx], masks)


def read_pgm(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise DataError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def write_pgm(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim != 2:
        raise DataError("PGM payload must be a 2-D uint8 array")
    h, w = array.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + array.tobytes())


def write_manifest(records: list[Record], path: str | Path) -> None:
    path = Path(path)
    lines = []
    for r in records:
        mask = NONE if r.mask is None else _relative(r.mask, path.parent)
        lines.append(f"{r.image_id}\t{_relative(r.image, path.parent)}\t{mask}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relative(p: Path, base: Path) -> str:
    try:
        return str(Path(p).relative_to(base))
    except ValueError:
        return str(p)


def read_manifest(path: str | Path) -> list[Record]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        image_id, image, mask = parts
        if image_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {image_id!r}")
        seen.add(image_id)
        records.append(Record(image_id, path.parent / image,
                              None if mask == NONE else path.parent / mask))
    return records


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load every record, validating sizes and mask binariness."""
    records = read_manifest(manifest_path)
    if not records:
        raise DataError(f"manifest {manifest_path} is empty")
    labeled = {r.mask is not None for r in records}
    if len(labeled) > 1:
        raise DataError(f"manifest {manifest_path} mixes labeled and unlabeled records")
    images, masks = [], []
    for r in records:
        try:
            img = read_pgm(r.image)
        except (OSError, DataError) as exc:
            raise DataError(f"record {r.image_id}: cannot read image: {exc}") from None
        if images and img.shape != images[0].shape:
            raise DataError(f"record {r.image_id}: image size {img.shape} differs from {images[0].shape}")
        images.append(img)
        if r.mask is not None:
            try:
                mask = read_pgm(r.mask)
            except (OSError, DataError) as exc:
                raise DataError(f"record {r.image_id}: cannot read mask: {exc}") from None
            if mask.shape != img.shape:
                raise DataError(f"record {r.image_id}: mask size {mask.shape} != image size {img.shape}")
            bad = np.setdiff1d(np.unique(mask), [0, 255])
            if bad.size:
                raise DataError(f"record {r.image_id}: non-binary mask values {bad.tolist()}")
            masks.append(mask)
    x = torch.from_numpy(np.stack(images).astype(np.float32) / 255.0).unsqueeze(1)
    y = torch.from_numpy((np.stack(masks) > 0).astype(np.int64)) if masks else None
    return Dataset([r.image_id for r in records], x, y)


@dataclass
class SyntheticSpec:
    n_images: int = 16
    size: int = 64
    lesions: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (0.06, 0.16)
    lesion_contrast: tuple[float, float] = (0.25, 0.45)
    background_sigma: float = 8.0
    speckle: float = 0.04
    seed: int = 0
    labeled: bool = True
    prefix: str = "img"

    def __post_init__(self):
        self.lesions = tuple(self.lesions)
        self.radius = tuple(self.radius)
        self.lesion_contrast = tuple(self.lesion_contrast)

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def synth_case(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One ``(image, mask)`` pair: smooth background, speckle, 1-3 soft elliptical lesions."""
    n = spec.size
    background = ndimage.gaussian_filter(rng.normal(size=(n, n)), spec.background_sigma, mode="wrap")
    background = 0.3 + 0.15 * background / (np.abs(background).max() + 1e-12)
    yy, xx = np.mgrid[0:n, 0:n] / n
    lesion = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    for _ in range(rng.integers(spec.lesions[0], spec.lesions[1] + 1)):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        ry, rx = rng.uniform(*spec.radius, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(theta) + dx * np.sin(theta)) / ry
        v = (-dy * np.sin(theta) + dx * np.cos(theta)) / rx
        r = np.sqrt(u ** 2 + v ** 2)
        # soft edge: full contrast inside, logistic fall-off around r = 1
        profile = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
        lesion = np.maximum(lesion, rng.uniform(*spec.lesion_contrast) * profile)
        mask |= r <= 1.0
    image = background + lesion + spec.speckle * rng.normal(size=(n, n))
    image = np.clip(image, 0.0, 1.0)
    return (image * 255).round().astype(np.uint8), (mask * 255).astype(np.uint8)


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> list[Record]:
    """Write ``spec.n_images`` PGM pairs plus ``manifest.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    rng = np.random.default_rng(spec.seed)
    records = []
    for i in range(spec.n_images):
        image, mask = synth_case(spec, rng)
        image_id = f"{spec.prefix}{i:04d}"
        image_path = out / f"{image_id}.pgm"
        write_pgm(image_path, image)
        mask_path = None
        if spec.labeled:
            mask_path = out / f"{image_id}_mask.pgm"
            write_pgm(mask_path, mask)
        records.append(Record(image_id, image_path, mask_path))
    write_manifest(records, out / "manifest.tsv")
    return records


def base_augment(image: torch.Tensor, mask: torch.Tensor, rng: np.random.Generator | None = None,
                 k: int | None = None, flip_h: bool | None = None, flip_v: bool | None = None):
    """Rotate by ``k * 90`` degrees and optionally flip; the same transform hits both tensors.

    Works on the trailing two axes. Unspecified parts of the transform are drawn from ``rng``.
    """
    if k is None:
        k = int(rng.integers(4))
    if flip_h is None:
        flip_h = bool(rng.integers(2))
    if flip_v is None:
        flip_v = bool(rng.integers(2))

    def apply(t: torch.Tensor) -> torch.Tensor:
        t = torch.rot90(t, k, dims=(-2, -1))
        if flip_h:
            t = torch.flip(t, dims=(-1,))
        if flip_v:
            t = torch.flip(t, dims=(-2,))
        return t

    return apply(image), apply(mask)
