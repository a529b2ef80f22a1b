"""Pipeline configuration: one declarative key=value file plus overrides.

The config file has one ``key = value`` pair per line; ``#`` starts a
comment. Command-line ``--set key=value`` pairs win over the file. Lists
are comma-separated. Unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .calibration import CalibrationMethod
from .catalogs import (
    ClassCatalog,
    hirise_catalog,
    load_catalog_csv,
    mer_catalog,
    msl_v1_catalog,
    msl_v2_catalog,
)
from .datasets import GroupKey
from .errors import ConfigError

_BUILTIN_CATALOGS = {
    "hirise": hirise_catalog,
    "msl_v2": msl_v2_catalog,
    "msl_v1": msl_v1_catalog,
    "mer": mer_catalog,
}

MODEL_KINDS = ("softmax", "multilabel", "chain", "hybrid")


@dataclass
class PipelineConfig:
    manifest: str = ""
    images_dir: str = ""
    out_dir: str = ""
    catalog: str = "hirise"

    group_key: str = "SOURCE_IMAGE"
    fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
    seed: int = 0

    model: str = "softmax"
    calibration: str = "TEMPERATURE"
    tau: float = 0.9
    reliability_bins: int = 10

    polar_cutoff: float = -60.0
    polar_classes: tuple[str, ...] = ("spider", "swiss_cheese")
    other_class: str = "other"

    preprocess: str = "none"  # none | hirise_square | msl_center_crop
    target_size: int = 227

    augment_recipe: str = "none"  # none | hirise | msl | mer | custom
    augment_transforms: tuple[str, ...] = ()
    augment_count: int = 0
    augment_square_crop: bool = False
    augment_to: tuple[str, ...] = ("TRAIN",)

    learning_rate: float = 0.1
    epochs: int = 60
    batch_size: int = 32
    l2: float = 0.0001

    opt_max_iters: int = 500
    opt_tolerance: float = 1e-9

    landmark_image: str = ""
    landmark_source_id: str = "strip"
    salience_params: str = ""
    landmark_border: int = 30
    landmark_out_size: int = 227
    landmark_min_area: int = 25

    trigger_class: str = "other_rover_part"
    v1_catalog: str = "msl_v1"
    v1_manifest: str = ""
    chain_category_order: tuple[str, ...] = ()

    timestamp: str = ""  # RFC 3339; fixes tag timestamps for reproducible runs
    workers: int = 1
    strict_sites: bool = False

    def validate(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"bad split fractions {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        try:
            CalibrationMethod(self.calibration)
        except ValueError:
            raise ConfigError(f"unknown calibration method {self.calibration!r}") from None
        try:
            GroupKey(self.group_key)
        except ValueError:
            raise ConfigError(f"unknown group key {self.group_key!r}") from None
        if self.reliability_bins < 1:
            raise ConfigError("reliability_bins must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if self.preprocess not in ("none", "hirise_square", "msl_center_crop"):
            raise ConfigError(f"unknown preprocess mode {self.preprocess!r}")
        if self.augment_recipe not in ("none", "hirise", "msl", "mer", "custom"):
            raise ConfigError(f"unknown augment recipe {self.augment_recipe!r}")
        if self.augment_recipe == "custom" and (
            not self.augment_transforms or self.augment_count < 1
        ):
            raise ConfigError("custom recipe needs augment_transforms and augment_count")

    def load_catalog(self) -> ClassCatalog:
        return _load_catalog(self.catalog)

    def load_v1_catalog(self) -> ClassCatalog:
        return _load_catalog(self.v1_catalog)

    def out_path(self, *parts) -> Path:
        return Path(self.out_dir).joinpath(*parts)


def _load_catalog(name: str) -> ClassCatalog:
    if name in _BUILTIN_CATALOGS:
        return _BUILTIN_CATALOGS[name]()
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"catalog {name!r} is neither built-in nor a file")
    return load_catalog_csv(path)


_TUPLE_KEYS = {
    "polar_classes",
    "augment_transforms",
    "augment_to",
    "chain_category_order",
}
_BOOL_KEYS = {"augment_square_crop", "strict_sites"}


def parse_config_file(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def build_config(
    file_pairs: dict[str, str], overrides: dict[str, str] | None = None
) -> PipelineConfig:
    merged = dict(file_pairs)
    merged.update(overrides or {})
    cfg = PipelineConfig()
    valid = {f.name: f for f in fields(PipelineConfig)}
    for key, value in merged.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
    cfg.validate()
    return cfg


def _coerce(key: str, value: str, default):
    if key == "fractions":
        parts = [float(v) for v in value.split(",") if v.strip()]
        return tuple(parts)
    if key in _TUPLE_KEYS:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if key in _BOOL_KEYS:
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {value!r}")
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def load_config(path, overrides: dict[str, str] | None = None) -> PipelineConfig:
    return build_config(parse_config_file(path), overrides)


def save_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(PipelineConfig):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")
