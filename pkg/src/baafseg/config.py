"""Model / training configuration, ablation presets and the ``key = value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

OFFSET_ORDERS = ("none", "p_then_f", "f_then_p")
AUG_LOSSES = ("geometric", "semantic")
AGGREGATIONS = ("max", "mean", "mixed")
FUSIONS = ("last_only", "sum", "product", "concat", "scalar_weights", "pointwise_adaptive")
SAMPLERS = ("fps", "random")

DEFAULT_WEIGHTS = (0.1, 0.1, 0.3, 0.5, 0.5)
EQUAL_WEIGHT = 0.3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Level:
    ratio: int  # level size is N // ratio, clamped to >= 1
    out_dim: int


DEFAULT_LEVELS = (Level(4, 32), Level(16, 128), Level(64, 256), Level(256, 512), Level(512, 1024))
FOUR_LEVELS = (Level(4, 16), Level(16, 64), Level(64, 128), Level(256, 256))


@dataclass(frozen=True)
class AblationVariant:
    offset_order: str = "p_then_f"
    aug_loss: frozenset = frozenset({"geometric"})
    aggregation: str = "mixed"
    fusion: str = "pointwise_adaptive"
    sampler: str = "fps"
    knn_dilation: int = 1
    equal_loss_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "aug_loss", frozenset(self.aug_loss))
        _check_choice("offset_order", self.offset_order, OFFSET_ORDERS)
        _check_choice("aggregation", self.aggregation, AGGREGATIONS)
        _check_choice("fusion", self.fusion, FUSIONS)
        _check_choice("sampler", self.sampler, SAMPLERS)
        bad = self.aug_loss - set(AUG_LOSSES)
        if bad:
            raise ConfigError(f"unknown augmentation loss {sorted(bad)}")
        if self.offset_order == "none" and self.aug_loss:
            raise ConfigError("augmentation losses need bilateral offsets")
        if self.knn_dilation < 1:
            raise ConfigError("knn_dilation must be >= 1")


def _check_choice(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")


@dataclass(frozen=True)
class ModelConfig:
    levels: tuple = DEFAULT_LEVELS
    k: int = 12
    in_channels: int = 6
    extractor_dim: int = 8
    decoder_dim: int = 32
    head_dims: tuple = (64, 32)
    dropout: float = 0.5
    num_classes: int = 6
    aug_loss_weights: tuple = DEFAULT_WEIGHTS
    loss_mode: str = "sum"  # "sum" over a level's points, or "mean"
    seed: int = 0
    variant: AblationVariant = field(default_factory=AblationVariant)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "head_dims", tuple(self.head_dims))
        object.__setattr__(self, "aug_loss_weights", tuple(float(w) for w in self.aug_loss_weights))
        if not self.levels:
            raise ConfigError("at least one level is required")
        if len(self.aug_loss_weights) != len(self.levels):
            raise ConfigError(f"{len(self.aug_loss_weights)} loss weights for {len(self.levels)} levels")
        for lv in self.levels:
            if lv.out_dim % 4:
                raise ConfigError(f"level width {lv.out_dim} must be divisible by 4")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.in_channels < 3:
            raise ConfigError("inputs must include the 3 coordinates")
        if self.loss_mode not in ("sum", "mean"):
            raise ConfigError(f"loss_mode must be 'sum' or 'mean', got {self.loss_mode!r}")

    @property
    def loss_weights(self) -> tuple:
        if self.variant.equal_loss_weights:
            return (EQUAL_WEIGHT,) * len(self.levels)
        return self.aug_loss_weights

    def level_sizes(self, n: int) -> list[int]:
        return [max(1, n // lv.ratio) for lv in self.levels]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.01
    decay: float = 0.5
    decay_every: int = 10
    batch_size: int = 1
    seed: int = 0
    crops: int = 4
    crop_size: int = 4096
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must be in (0, 1]")
        if self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("batch_size and decay_every must be >= 1")


# ------------------------------------------------------------------ ablation presets

_B = {
    "B0": dict(offset_order="none", aug_loss=(), aggregation="max"),
    "B1": dict(offset_order="f_then_p", aug_loss=("semantic",), aggregation="mixed"),
    "B2": dict(offset_order="p_then_f", aug_loss=("geometric", "semantic"), aggregation="mixed"),
    "B3": dict(offset_order="p_then_f", aug_loss=(), aggregation="mixed"),
    "B4": dict(offset_order="p_then_f", aug_loss=("geometric",), aggregation="max"),
    "B5": dict(offset_order="p_then_f", aug_loss=("geometric",), aggregation="mean"),
    "B6": dict(offset_order="p_then_f", aug_loss=("geometric",), aggregation="mixed"),
}
_A = {
    "A0": "last_only",
    "A1": "sum",
    "A2": "product",
    "A3": "concat",
    "A4": "scalar_weights",
    "A5": "pointwise_adaptive",
}


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    """ModelConfig for one row of the block (B*), fusion (A*) or network (N*) ablations."""
    base = base or ModelConfig()
    full = dict(_B["B6"], fusion="pointwise_adaptive")
    if name in _B:
        return replace(base, variant=AblationVariant(**dict(full, **_B[name])))
    if name in _A:
        return replace(base, variant=AblationVariant(**dict(full, fusion=_A[name])))
    if name == "N0":
        return replace(base, variant=AblationVariant(**dict(_B["B0"], fusion="last_only")))
    if name == "N1":
        return replace(base, variant=AblationVariant(**dict(full, sampler="random")))
    if name == "N2":
        return replace(base, variant=AblationVariant(**dict(full, knn_dilation=2)))
    if name == "N3":
        return replace(base, variant=AblationVariant(**dict(full, equal_loss_weights=True)))
    if name == "N4":
        return replace(base, levels=FOUR_LEVELS, aug_loss_weights=DEFAULT_WEIGHTS[:4],
                       variant=AblationVariant(**full))
    if name == "N5":
        return replace(base, variant=AblationVariant(**full))
    raise ConfigError(f"unknown ablation variant {name!r}")


GRIDS = {
    "block": [f"B{i}" for i in range(7)],
    "fusion": [f"A{i}" for i in range(6)],
    "network": [f"N{i}" for i in range(6)],
}


# ------------------------------------------------------------------ text format


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (frozenset, set)):
        return ", ".join(sorted(value)) if value else "none"
    if isinstance(value, tuple):
        if value and isinstance(value[0], Level):
            return ", ".join(f"{lv.ratio}:{lv.out_dim}" for lv in value)
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = []
    for f in fields(ModelConfig):
        if f.name != "variant":
            lines.append(f"model.{f.name} = {_fmt(getattr(model, f.name))}")
    for f in fields(AblationVariant):
        lines.append(f"variant.{f.name} = {_fmt(getattr(model.variant, f.name))}")
    if train is not None:
        for f in fields(TrainConfig):
            lines.append(f"train.{f.name} = {_fmt(getattr(train, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_value(section: str, key: str, raw: str, proto):
    try:
        if key == "levels":
            out = []
            for item in raw.split(","):
                ratio, dim = item.split(":")
                out.append(Level(int(ratio), int(dim)))
            return tuple(out)
        if key == "aug_loss":
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return frozenset() if parts in ([], ["none"]) else frozenset(parts)
        if isinstance(proto, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        if isinstance(proto, tuple):
            cast = float if key == "aug_loss_weights" else int
            return tuple(cast(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``section.key = value`` lines; '#' starts a comment; unknown keys are errors."""
    sections = {"model": {}, "variant": {}, "train": {}}
    protos = {"model": ModelConfig(), "variant": AblationVariant(), "train": TrainConfig()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        valid = {f.name for f in fields(protos[section])} - {"variant"}
        if name not in valid:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sections[section][name] = _parse_value(section, name, raw, getattr(protos[section], name))
    try:
        variant = AblationVariant(**sections["variant"])
        model = ModelConfig(variant=variant, **sections["model"])
        train = TrainConfig(**sections["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return model, train


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
