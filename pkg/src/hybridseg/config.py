"""Dataclass configs and their JSON (de)serialisation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    input_size: int = 64
    stem_channels: tuple[int, int, int] = (16, 32, 64)
    patch: int = 2
    embed_dim: int = 48
    stage_heads: tuple[int, ...] = (3, 3, 3)
    window: int = 4
    num_classes: int = 2
    se_reduction: int = 16
    leaky_slope: float = 0.01
    mlp_ratio: float = 4.0
    in_channels: int = 1

    def __post_init__(self):
        self.stem_channels = tuple(self.stem_channels)
        self.stage_heads = tuple(self.stage_heads)

    @property
    def token_side(self) -> int:
        return self.input_size // (4 * self.patch)

    def stage_sides(self) -> list[int]:
        """Token-grid side of each encoder stage, shallowest first."""
        return [self.token_side >> i for i in range(len(self.stage_heads))]

    def stage_dims(self) -> list[int]:
        return [self.embed_dim << i for i in range(len(self.stage_heads))]

    def stage_windows(self) -> list[int]:
        return [min(self.window, side) for side in self.stage_sides()]

    def validate(self) -> None:
        problems = []
        if len(self.stem_channels) != 3:
            problems.append(f"stem_channels needs 3 entries, got {len(self.stem_channels)}")
        if not self.stage_heads:
            problems.append("stage_heads must be non-empty")
        if self.num_classes != 2:
            problems.append("only num_classes = 2 is supported")
        divisor = 4 * self.patch * 2 ** len(self.stage_heads)
        if self.input_size % divisor:
            problems.append(
                f"input_size {self.input_size} not divisible by 4*patch*2**stages = {divisor}")
        else:
            for i, (heads, dim, side, win) in enumerate(zip(
                    self.stage_heads, self.stage_dims(), self.stage_sides(), self.stage_windows())):
                if dim % heads:
                    problems.append(f"stage {i}: dim {dim} not divisible by heads {heads}")
                if side % win:
                    problems.append(f"stage {i}: window {win} does not divide token side {side}")
        if self.embed_dim % 2:
            problems.append("embed_dim must be even")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class OptimizerConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 5

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.batch < 1:
            raise ConfigError(f"invalid optimizer config {self}")


@dataclass
class ScheduleConfig:
    warmup_steps: int
    total_steps: int
    poly_power: float = 0.9

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps or self.poly_power <= 0:
            raise ConfigError(f"invalid schedule {self}")


@dataclass
class LossWeights:
    alpha1: float = 0.5
    alpha2: float = 0.5
    w_c: float = 0.3
    w_m: float = 0.4
    w_f: float = 0.3
    T: float = 0.5
    ema_alpha: float = 0.9
    mix_alpha: float = 0.75
    K: int = 2

    def __post_init__(self):
        weights = (self.alpha1, self.alpha2, self.w_c, self.w_m, self.w_f)
        if min(weights) < 0 or self.T <= 0 or not 0 <= self.ema_alpha < 1 or self.K < 1:
            raise ConfigError(f"invalid loss weights {self}")


@dataclass
class TverskyParams:
    tv_alpha: float = 0.3
    tv_beta: float = 0.7

    def __post_init__(self):
        if self.tv_alpha < 0 or self.tv_beta < 0 or self.tv_alpha + self.tv_beta <= 0:
            raise ConfigError(f"invalid Tversky params {self}")


@dataclass
class AugmentationSpec:
    dropout_range: tuple[float, float] = (0.02, 0.10)
    dropout_cell: int = 4
    noise_std: float = 0.05
    strong_noise_std: float = 0.15
    salt_pepper: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.dropout_range = tuple(self.dropout_range)


@dataclass
class TrainConfig:
    epochs: int = 200
    finetune_epochs: int = 100
    warmup_epochs: int = 5
    teacher_decay: float = 0.99
    teacher_decay_start: float = 0.9
    teacher_ramp_steps: int = 100
    n_folds: int = 5
    base_augment: bool = True
    seed: int = 0


@dataclass
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    poly_power: float = 0.9
    losses: LossWeights = field(default_factory=LossWeights)
    tversky: TverskyParams = field(default_factory=TverskyParams)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        sections = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, value in data.items():
            factory = _SECTION_TYPES.get(name)
            if factory is None:
                kwargs[name] = value
                continue
            try:
                kwargs[name] = factory(**value)
            except TypeError as exc:
                raise ConfigError(f"section '{name}': {exc}") from None
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)


_SECTION_TYPES = {
    "net": NetConfig,
    "optim": OptimizerConfig,
    "losses": LossWeights,
    "tversky": TverskyParams,
    "augment": AugmentationSpec,
    "train": TrainConfig,
}


def desk_config() -> NetConfig:
    return NetConfig()


def full_scale_config() -> NetConfig:
    return NetConfig(input_size=512, patch=4, embed_dim=96, stage_heads=(3, 6, 12), window=8)


def tiny_config() -> NetConfig:
    return NetConfig(input_size=16, stem_channels=(2, 2, 2), patch=1, embed_dim=16,
                     stage_heads=(1, 1), window=2, se_reduction=4)
