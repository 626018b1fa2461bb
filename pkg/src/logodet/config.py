"""Run configuration: one JSON document with a section per component.

Unknown keys and ill-typed values are reported with their dotted key path
(``train.fg_fraction``).  ``--set key.path=value`` overrides from the command
line are applied before validation.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, dataclass, fields
from importlib import resources
from pathlib import Path

from .network import Arch
from .proposals import ProposalParams
from .synth import SynthesisParams
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 10
    n_brands: int = 5
    n_images: int = 800
    split: tuple[float, float, float] = (0.625, 0.125, 0.25)
    image_size: tuple[int, int] = (256, 256)
    template_size: int = 96
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(self.split))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.n_brands < 1 or self.n_classes < self.n_brands:
            raise ValueError("need n_classes >= n_brands >= 1")
        if self.n_images < 1:
            raise ValueError("n_images must be positive")
        if len(self.split) != 3:
            raise ValueError("split needs three fractions")


@dataclass(frozen=True)
class NetworkConfig:
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    fc_dims: tuple[int, ...] = (256, 256)
    levels: tuple[tuple[int, int], ...] = ((4, 4),)
    mode: str = "shared"
    warp_size: int = 32
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "fc_dims", tuple(self.fc_dims))
        object.__setattr__(self, "levels", tuple(tuple(l) for l in self.levels))

    def arch(self, n_classes: int) -> Arch:
        return Arch(n_classes=n_classes, conv_channels=self.conv_channels, kernel=self.kernel,
                    fc_dims=self.fc_dims, levels=self.levels, mode=self.mode,
                    warp_size=self.warp_size, activation=self.activation)


@dataclass(frozen=True)
class PostConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.3
    max_per_image: int = 100

    def __post_init__(self):
        if not 0 <= self.score_threshold <= 1:
            raise ValueError("score_threshold must be in [0, 1]")
        if not 0 < self.nms_iou <= 1:
            raise ValueError("nms_iou must be in (0, 1]")
        if self.max_per_image < 1:
            raise ValueError("max_per_image must be positive")


@dataclass(frozen=True)
class EvalConfig:
    iou: float = 0.5
    interpolation: str = "all"
    brand_min_score: float = 0.0
    brand_aggregate: str = "max"
    overlays: int = 8

    def __post_init__(self):
        if not 0 < self.iou <= 1:
            raise ValueError("iou must be in (0, 1]")
        if self.interpolation not in ("all", "11point"):
            raise ValueError("interpolation must be 'all' or '11point'")
        if self.brand_aggregate not in ("max", "sum"):
            raise ValueError("brand_aggregate must be 'max' or 'sum'")
        if not 0 <= self.brand_min_score <= 1:
            raise ValueError("brand_min_score must be in [0, 1]")


@dataclass(frozen=True)
class SvdConfig:
    rank: int | None = None
    rank_fraction: float | None = 0.25
    energy: float | None = None

    def __post_init__(self):
        if self.rank is not None and self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.rank_fraction is not None and not 0 < self.rank_fraction <= 1:
            raise ValueError("rank_fraction must be in (0, 1]")
        if self.energy is not None and not 0 < self.energy <= 1:
            raise ValueError("energy must be in (0, 1]")


@dataclass(frozen=True)
class BenchmarkConfig:
    n_images: int = 10
    rois: int = 2000
    mode_images: int = 3
    warmup: int = 1

    def __post_init__(self):
        if self.n_images < 1 or self.rois < 1 or self.mode_images < 1 or self.warmup < 0:
            raise ValueError("benchmark counts must be positive")


SECTIONS = {
    "data": DataConfig,
    "synth": SynthesisParams,
    "proposals": ProposalParams,
    "network": NetworkConfig,
    "train": TrainConfig,
    "post": PostConfig,
    "eval": EvalConfig,
    "svd": SvdConfig,
    "benchmark": BenchmarkConfig,
}
TOP_LEVEL = {"seed": 0, "threads": 1}


def _check_type(path: str, value, default):
    if default is None or default is MISSING:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")


def _field_default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return MISSING


@dataclass(frozen=True)
class Config:
    data: DataConfig
    synth: SynthesisParams
    proposals: ProposalParams
    network: NetworkConfig
    train: TrainConfig
    post: PostConfig
    eval: EvalConfig
    svd: SvdConfig
    benchmark: BenchmarkConfig
    seed: int = 0
    threads: int = 1
    raw: dict | None = None

    @property
    def arch(self) -> Arch:
        return self.network.arch(self.data.n_classes)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode("utf-8")).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _normalise(value):
    if isinstance(value, tuple):
        return [_normalise(v) for v in value]
    return value


def default_dict() -> dict:
    out: dict = dict(TOP_LEVEL)
    for name, cls in SECTIONS.items():
        out[name] = {f.name: _normalise(_field_default(f)) for f in fields(cls)}
    return out


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    for k, v in update.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}: expected an object")
            _merge(base[k], v, path + ".")
        else:
            base[k] = v
    return base


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"{text}: override must look like key.path=value")
    key, val = text.split("=", 1)
    try:
        value = json.loads(val)
    except json.JSONDecodeError:
        value = val
    return key.strip().split("."), value


def apply_overrides(d: dict, overrides) -> dict:
    for text in overrides or ():
        keys, value = parse_override(text)
        node = d
        for i, k in enumerate(keys[:-1]):
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"{'.'.join(keys[:i + 1])}: unknown section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"{'.'.join(keys)}: unknown key")
        node[keys[-1]] = value
    return d


def build_config(d: dict) -> Config:
    resolved = _merge(default_dict(), copy.deepcopy(d))
    for k in TOP_LEVEL:
        _check_type(k, resolved[k], TOP_LEVEL[k])
    if resolved["threads"] < 1:
        raise ConfigError("threads: must be >= 1")
    built = {}
    for name, cls in SECTIONS.items():
        section = resolved[name]
        for f in fields(cls):
            if section[f.name] is None and "None" in str(f.type):
                continue
            _check_type(f"{name}.{f.name}", section[f.name], _field_default(f))
        try:
            built[name] = cls(**section)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from None
    try:
        built["network"].arch(built["data"].n_classes)
    except ValueError as e:
        raise ConfigError(f"network: {e}") from None
    return Config(**built, seed=resolved["seed"], threads=resolved["threads"], raw=resolved)


def load_config(path=None, overrides=None) -> Config:
    """Defaults, then the JSON file (if any), then ``key.path=value`` overrides."""
    d: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
    base = _merge(default_dict(), d)
    return build_config(apply_overrides(base, overrides))


def shipped_config(name: str = "desk") -> Path:
    return Path(str(resources.files("logodet") / "configs" / f"{name}.json"))
