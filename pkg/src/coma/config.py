"""Model / training configuration, named presets and the ``key = value`` file format.

Config files use bracketed section headers (``[model]``, ``[train]``,
``[data]``) followed by ``key = value`` lines. Unknown sections or keys are
rejected. Lists are comma separated.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .errors import ConfigError

FUSION_MODES = ("cascade", "parallel")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, int, int, int]
    blocks: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    patch_size: int = 32
    image_size: int = 224
    decoder_depth: int = 8
    decoder_width: int = 512
    decoder_heads: int = 16
    mlp_ratio: int = 4
    mask_ratio: float = 0.6
    include_full_window: bool = True
    include_unit_window: bool = False
    share_kv_conv: bool = True
    fusion_mode: str = "cascade"
    in_chans: int = 3

    def __post_init__(self):
        for name in ("channels", "blocks", "heads"):
            val = tuple(int(x) for x in getattr(self, name))
            if len(val) != 4:
                raise ConfigError(f"{name} needs 4 entries, got {len(val)}")
            object.__setattr__(self, name, val)
        self.validate()

    def validate(self) -> None:
        for i, (c, h) in enumerate(zip(self.channels, self.heads)):
            if c <= 0 or h <= 0 or c % h:
                raise ConfigError(f"stage {i + 1}: channels {c} not divisible by heads {h}")
        if any(b < 0 for b in self.blocks):
            raise ConfigError("block counts must be non-negative")
        if self.channels[0] % 4:
            raise ConfigError("first-stage channels must be divisible by 4 for the 2-D sinusoidal embedding")
        if self.patch_size <= 0 or self.patch_size % 32:
            raise ConfigError(f"patch_size must be a positive multiple of 32, got {self.patch_size}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.n_patches < 2:
            raise ConfigError("need at least 2 patches per image")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.decoder_depth < 0 or self.decoder_width <= 0:
            raise ConfigError("decoder depth must be >= 0 and width > 0")
        if self.decoder_width % self.decoder_heads:
            raise ConfigError(f"decoder_width {self.decoder_width} not divisible by decoder_heads {self.decoder_heads}")
        if self.channels[3] % 4:
            raise ConfigError("last-stage channels must be divisible by 4 for the decoder positional embedding")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if not self.include_full_window and not self.include_unit_window and self.grid_sides[1] == 2:
            raise ConfigError("window flags leave stage 2 without any kernel size")

    @property
    def feature_size(self) -> int:
        return self.image_size // 4

    @property
    def patches_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.patches_per_side ** 2

    @property
    def grid_sides(self) -> tuple[int, int, int, int]:
        p1 = self.patch_size // 4
        return (p1, p1 // 2, p1 // 4, p1 // 8)


PRESETS: dict[str, ModelConfig] = {
    "dyvit-s": ModelConfig(channels=(96, 192, 384, 768), blocks=(1, 2, 11, 2), heads=(2, 4, 8, 16)),
    "dyvit-b": ModelConfig(channels=(112, 224, 448, 896), blocks=(2, 3, 16, 3), heads=(2, 4, 8, 16)),
    "dyvit-nano": ModelConfig(
        channels=(16, 32, 64, 128), blocks=(1, 1, 2, 1), heads=(1, 2, 4, 8),
        image_size=64, decoder_width=64, decoder_heads=4,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100
    batch_size: int = 16
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    sync_every: int = 1
    decay_start: Optional[int] = None
    dtype: str = "float32"
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.seed < 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and seed >= 0 are required")
        if self.lr < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("optimizer hyper-parameters out of range")
        if self.sync_every < 1:
            raise ConfigError("sync_every must be >= 1")
        if self.decay_start is not None and self.decay_start < 0:
            raise ConfigError("decay_start must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class DataConfig:
    dataset: str = ""
    count: int = 64
    size: int = 64


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    preset: str = ""
    out: str = "runs/coma"


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_DATA_KEYS = {f.name for f in fields(DataConfig)}


def _parse_value(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind == "tuple":
            return tuple(int(x) for x in raw.split(","))
        if kind == "optint":
            return None if raw.lower() in ("", "none") else int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _kind(cls, name: str):
    t = {f.name: f.type for f in fields(cls)}[name]
    t = str(t)
    if t.startswith("tuple"):
        return "tuple"
    if t.startswith("Optional[int]"):
        return "optint"
    return {"int": "int", "float": "float", "bool": "bool"}.get(t, "str")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - {"model", "train", "data", "run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    run = dict(cp["run"]) if cp.has_section("run") else {}
    bad = set(run) - {"preset", "out"}
    if bad:
        raise ConfigError(f"unknown [run] keys: {sorted(bad)}")

    model_kv = dict(cp["model"]) if cp.has_section("model") else {}
    bad = set(model_kv) - _MODEL_KEYS
    if bad:
        raise ConfigError(f"unknown [model] keys: {sorted(bad)}")
    model_vals = {k: _parse_value(_kind(ModelConfig, k), v, k) for k, v in model_kv.items()}
    name = run.get("preset", "").strip()
    if name:
        model = preset(name, **model_vals)
    else:
        missing = {"channels", "blocks", "heads"} - set(model_vals)
        if missing:
            raise ConfigError(f"[model] needs {sorted(missing)} when no preset is given")
        model = ModelConfig(**model_vals)

    train_kv = dict(cp["train"]) if cp.has_section("train") else {}
    bad = set(train_kv) - _TRAIN_KEYS
    if bad:
        raise ConfigError(f"unknown [train] keys: {sorted(bad)}")
    train = TrainConfig(**{k: _parse_value(_kind(TrainConfig, k), v, k) for k, v in train_kv.items()})

    data_kv = dict(cp["data"]) if cp.has_section("data") else {}
    bad = set(data_kv) - _DATA_KEYS
    if bad:
        raise ConfigError(f"unknown [data] keys: {sorted(bad)}")
    data = DataConfig(**{k: _parse_value(_kind(DataConfig, k), v, k) for k, v in data_kv.items()})
    return RunConfig(model=model, train=train, data=data, preset=name, out=run.get("out", "runs/coma"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    out = ["[run]", f"out = {cfg.out}"]
    if cfg.preset:
        out.append(f"preset = {cfg.preset}")
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("data", cfg.data)):
        out.append("")
        out.append(f"[{section}]")
        for f in fields(obj):
            out.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(out) + "\n"


def as_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
