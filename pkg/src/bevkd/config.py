"""Experiment configuration: dataclasses, YAML round-trip and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration.

    ``field`` names the offending dotted key (e.g. ``"partition.lidar"``).
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


# Per-class (w_lo, w_hi, l_lo, l_hi) in meters: car, two-wheeler, truck.
DEFAULT_CLASS_SIZES = (
    (1.7, 2.1, 4.0, 5.0),
    (1.2, 1.5, 1.6, 2.2),
    (2.4, 3.0, 6.5, 9.0),
)


@dataclass
class WorldSpec:
    extent: float = 40.0
    num_classes: int = 3
    n_max: int = 6
    class_sizes: tuple = DEFAULT_CLASS_SIZES
    k_pts: float = 3000.0
    occlusion: bool = True
    point_sigma: float = 0.05
    range_sigma: float = 0.15
    azimuth_bins: int = 128
    min_range: float = 3.0
    margin: float = 1.0
    seed: int = 0

    @property
    def camera_channels(self) -> int:
        # one-hot class, background flag, angular width, range cue
        return self.num_classes + 3

    def validate(self) -> None:
        if not self.extent > 0:
            raise ConfigError("extent must be > 0", "world.extent")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes", "world.num_classes")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1", "world.n_max")
        if len(self.class_sizes) != self.num_classes:
            raise ConfigError("one size range per class required", "world.class_sizes")
        for c, rng in enumerate(self.class_sizes):
            if len(rng) != 4:
                raise ConfigError("size range is (w_lo, w_hi, l_lo, l_hi)", f"world.class_sizes[{c}]")
            w_lo, w_hi, l_lo, l_hi = rng
            if not (0 < w_lo <= w_hi and 0 < l_lo <= l_hi):
                raise ConfigError("size bounds must be positive and ordered", f"world.class_sizes[{c}]")
        for name in ("k_pts", "point_sigma", "range_sigma", "min_range", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", f"world.{name}")
        if self.azimuth_bins < 2:
            raise ConfigError("need at least 2 azimuth bins", "world.azimuth_bins")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_sizes"] = [list(r) for r in self.class_sizes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        if "class_sizes" in d:
            d["class_sizes"] = tuple(tuple(float(v) for v in r) for r in d["class_sizes"])
        return cls(**d)


@dataclass
class GridConfig:
    cells: int = 32
    beta: float = 0.5
    r_min: int = 2
    tau: float = 0.1
    soft_mask: bool = False


@dataclass
class PartitionSpec:
    """Channel split of the student BEV feature into image/lidar/label groups."""

    image: int = 8
    lidar: int = 8
    label: int = 8

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.image, self.lidar, self.label)

    @property
    def total(self) -> int:
        return self.image + self.lidar + self.label

    @property
    def ranges(self) -> dict[str, tuple[int, int]]:
        a = self.image
        b = a + self.lidar
        return {"image": (0, a), "lidar": (a, b), "label": (b, b + self.label)}

    @classmethod
    def from_ratio(cls, lidar: int, label: int, image: int, total: int) -> "PartitionSpec":
        s = lidar + label + image
        if total % s:
            raise ConfigError(f"total {total} not divisible by ratio sum {s}", "partition")
        u = total // s
        return cls(image=image * u, lidar=lidar * u, label=label * u)


@dataclass
class ModelConfig:
    teacher_channels: int = 32
    hidden: int = 32
    column_channels: int = 32
    label_dim: int = 32
    depth_bins: int = 32
    adapter_layers: int = 2


@dataclass
class LossWeights:
    lidar_feat: float = 0.1
    label_feat: float = 0.1
    lidar_resp: float = 0.25
    heatmap: float = 1.0
    regress: float = 1.0
    depth: float = 0.5
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    soft_focal_beta: float = 2.0

    def validate(self) -> None:
        for k, v in dataclasses.asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError("loss weights must be finite and >= 0", f"loss.{k}")


@dataclass
class StageSchedule:
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 16
    weight_decay: float = 1e-2
    lr_step: float = 0.75  # fraction of epochs after which lr drops 10x


@dataclass
class DataConfig:
    n_train: int = 2000
    n_val: int = 300


@dataclass
class Switches:
    use_lidar_distill: bool = False
    use_label_distill: bool = False
    use_partition: bool = False
    label_encoder_variant: str = "inverse"


@dataclass
class EvalConfig:
    score_thresh: float = 0.05
    k_max: int = 40
    thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    distance_split: float = 0.75


LABEL_ENCODER_VARIANTS = ("inverse", "autoencoder", "labelenc")


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: StageSchedule = field(default_factory=lambda: StageSchedule(epochs=15, lr=2e-3))
    labelenc: StageSchedule = field(default_factory=lambda: StageSchedule(epochs=12, lr=1e-3))
    student: StageSchedule = field(default_factory=lambda: StageSchedule(epochs=6, lr=2e-3))
    switches: Switches = field(default_factory=Switches)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @property
    def student_channels(self) -> int:
        return self.partition.total

    def validate(self) -> "ExperimentConfig":
        self.world.validate()
        self.loss.validate()
        if self.grid.cells < 4:
            raise ConfigError("grid must have at least 4 cells per side", "grid.cells")
        if not 0 < self.grid.tau < 1:
            raise ConfigError("tau must lie in (0, 1)", "grid.tau")
        for k, v in zip(("image", "lidar", "label"), self.partition.sizes):
            if v < 0:
                raise ConfigError("group size must be >= 0", f"partition.{k}")
        if self.partition.total < 1:
            raise ConfigError("student needs at least one channel", "partition")
        if self.switches.label_encoder_variant not in LABEL_ENCODER_VARIANTS:
            raise ConfigError(
                f"unknown variant, expected one of {LABEL_ENCODER_VARIANTS}",
                "switches.label_encoder_variant",
            )
        if self.switches.use_partition:
            if self.switches.use_lidar_distill and self.partition.lidar == 0:
                raise ConfigError("lidar distillation needs a non-empty lidar group", "partition.lidar")
            if self.switches.use_label_distill and self.partition.label == 0:
                raise ConfigError("label distillation needs a non-empty label group", "partition.label")
        if self.model.adapter_layers not in (1, 2, 3):
            raise ConfigError("adapter_layers must be 1, 2 or 3", "model.adapter_layers")
        if self.eval.tp_threshold not in self.eval.thresholds:
            raise ConfigError("tp_threshold must be one of thresholds", "eval.tp_threshold")
        for name in ("teacher", "labelenc", "student"):
            s = getattr(self, name)
            if s.epochs < 1 or s.batch_size < 1 or s.lr <= 0:
                raise ConfigError("epochs/batch_size/lr must be positive", name)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["world"] = self.world.to_dict()
        d["eval"]["thresholds"] = list(self.eval.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name: f for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError("unknown key", k)
        kw: dict[str, Any] = {}
        sub = {
            "grid": GridConfig, "model": ModelConfig, "partition": PartitionSpec,
            "loss": LossWeights, "data": DataConfig, "teacher": StageSchedule,
            "labelenc": StageSchedule, "student": StageSchedule, "switches": Switches,
            "eval": EvalConfig,
        }
        base = cls()
        for k, v in d.items():
            if k == "seed":
                kw[k] = _coerce(int, v, "seed")
            elif k == "world":
                kw[k] = _merge(WorldSpec, base.world, v, "world")
            else:
                kw[k] = _merge(sub[k], getattr(base, k), v, k)
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"switches.use_partition": True})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return ExperimentConfig.from_dict(d)


def _coerce(typ, value, name):
    if typ is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"expected a boolean, got {value!r}", name)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"expected an integer, got {value!r}", name)
    try:
        out = typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected {typ.__name__}, got {value!r}", name) from None
    if typ is int and isinstance(value, float) and value != out:
        raise ConfigError(f"expected an integer, got {value!r}", name)
    return out


def _merge(cls, base, values, prefix):
    if not isinstance(values, dict):
        raise ConfigError("expected a mapping", prefix)
    current = dataclasses.asdict(base) if cls is not WorldSpec else base.to_dict()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in values.items():
        if k not in fields:
            raise ConfigError("unknown key", f"{prefix}.{k}")
        default = current[k]
        name = f"{prefix}.{k}"
        if isinstance(default, bool):
            current[k] = _coerce(bool, v, name)
        elif isinstance(default, int):
            current[k] = _coerce(int, v, name)
        elif isinstance(default, float):
            current[k] = _coerce(float, v, name)
        elif isinstance(default, str):
            current[k] = _coerce(str, v, name)
        elif isinstance(default, (list, tuple)):
            if not isinstance(v, (list, tuple)):
                raise ConfigError("expected a list", name)
            current[k] = tuple(v) if k != "class_sizes" else v
        else:
            current[k] = v
    if cls is WorldSpec:
        return WorldSpec.from_dict(current)
    return cls(**current)


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError("unknown key", key)
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError("unknown key", key)
    node[parts[-1]] = value


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML config; errors carry the offending field and, when known, line."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML parse error: {exc}", line=(mark.line + 1) if mark else None) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", line=1)
    try:
        return ExperimentConfig.from_dict(raw).validate()
    except ConfigError as exc:
        if exc.field and exc.line is None:
            exc.line = _find_line(text, exc.field)
            raise ConfigError(str(exc).split("] ", 1)[-1], exc.field, exc.line) from None
        raise


def _find_line(text: str, dotted: str) -> int | None:
    leaf = dotted.split(".")[-1].split("[")[0]
    for i, line in enumerate(text.splitlines(), 1):
        if line.strip().startswith(f"{leaf}:"):
            return i
    return None


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
