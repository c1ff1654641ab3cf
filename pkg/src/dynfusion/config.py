"""Pipeline configuration: INI-style ``key = value`` sections with validation.

Every field of the section dataclasses below is a legal key; anything else
is rejected. The same fields are exposed as ``--<section>-<key>`` command
line flags.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    path: str = ""
    detections: str = ""  # directory of per-frame .det files; empty = none
    categories: str = ""  # category table file; empty = built-in table
    max_assoc_gap: float = 0.02
    depth_max: float = 6.0
    max_frames: int = 0  # 0 = all


@dataclass
class SegmentationSection:
    theta_dist: float = 0.01
    theta_angle_deg: float = 20.0
    min_segment_area: int = 300
    absorb_iterations: int = 8  # grow segment labels into edge pixels when painting masks
    absorb_depth_ratio: float = 0.1


@dataclass
class InstancesSection:
    enabled: bool = True
    score_min: float = 0.5
    overlap_threshold: float = 0.5
    metric: str = "intersection_over_segment"


@dataclass
class TrackingSection:
    rgb_weight: float = 0.1
    dist_thresh: float = 0.10
    angle_thresh_deg: float = 30.0
    pyramid_levels: int = 3
    iterations: str = "10,5,4"  # coarse to fine
    convergence_eps: float = 1e-6
    max_halvings: int = 4
    min_inliers: int = 2000
    min_visible_pixels: int = 3000
    exclude_rigid_objects: bool = True


@dataclass
class MotionSection:
    enabled: bool = True
    min_dynamic_centroid: float = 2.5e-3
    max_samples: int = 20000
    overlap_threshold: float = 0.3
    metric: str = "intersection_over_segment"


@dataclass
class FusionSection:
    assoc_dist: float = 0.05
    assoc_angle_deg: float = 20.0
    cull_weight: float = 0.5
    stability_frames: int = 10
    inactive_timeout: int = 20
    min_object_pixels: int = 1000
    match_threshold: float = 0.3
    occlusion_tol: float = 0.01


@dataclass
class OutputSection:
    directory: str = "out"
    instrumentation: bool = True
    dump_masks: bool = False
    workers: int = 2
    drop_empty_maps: bool = False  # leave object maps with no surfels out of the exports


SECTIONS = {
    "dataset": DatasetSection,
    "segmentation": SegmentationSection,
    "instances": InstancesSection,
    "tracking": TrackingSection,
    "motion": MotionSection,
    "fusion": FusionSection,
    "output": OutputSection,
}

METRICS = ("iou", "intersection_over_segment")


@dataclass
class PipelineConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)
    instances: InstancesSection = field(default_factory=InstancesSection)
    tracking: TrackingSection = field(default_factory=TrackingSection)
    motion: MotionSection = field(default_factory=MotionSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    output: OutputSection = field(default_factory=OutputSection)

    def set(self, section: str, key: str, value):
        """Set one key from a string (or typed) value, validating the name."""
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        types = {f.name: f.type for f in fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(obj, key, _coerce(value, types[key], f"{section}.{key}"))

    def iteration_counts(self) -> tuple[int, ...]:
        try:
            return tuple(int(x) for x in self.tracking.iterations.split(","))
        except ValueError:
            raise ConfigError(f"tracking.iterations must be comma-separated integers, "
                              f"got {self.tracking.iterations!r}") from None

    def validate(self) -> "PipelineConfig":
        t, m, f, i = self.tracking, self.motion, self.fusion, self.instances
        iters = self.iteration_counts()
        if len(iters) != t.pyramid_levels or any(n < 0 for n in iters):
            raise ConfigError("tracking.iterations needs one nonnegative count per pyramid level")
        if t.pyramid_levels < 1:
            raise ConfigError("tracking.pyramid_levels must be >= 1")
        for name, v in (("instances.metric", i.metric), ("motion.metric", m.metric)):
            if v not in METRICS:
                raise ConfigError(f"{name} must be one of {METRICS}, got {v!r}")
        for name, v in (("instances.score_min", i.score_min), ("instances.overlap_threshold", i.overlap_threshold),
                        ("motion.overlap_threshold", m.overlap_threshold),
                        ("fusion.match_threshold", f.match_threshold)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name, v in (("tracking.dist_thresh", t.dist_thresh), ("fusion.assoc_dist", f.assoc_dist),
                        ("dataset.depth_max", self.dataset.depth_max),
                        ("segmentation.theta_dist", self.segmentation.theta_dist)):
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.output.workers < 1:
            raise ConfigError("output.workers must be >= 1")
        return self

    @property
    def angle(self):
        """Degree-valued keys converted to radians."""
        return {
            "segmentation": math.radians(self.segmentation.theta_angle_deg),
            "tracking": math.radians(self.tracking.angle_thresh_deg),
            "fusion": math.radians(self.fusion.assoc_angle_deg),
        }

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                v = getattr(obj, f.name)
                lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _coerce(value, typ, name):
    if not isinstance(value, str):
        value = str(value)
    value = value.strip()
    try:
        if typ in (bool, "bool"):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return value


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``(section, key, value)`` overrides."""
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    for section, key, value in overrides or ():
        cfg.set(section, key, value)
    return cfg.validate()


def flag_specs():
    """``(flag, section, key, type)`` for every config key."""
    out = []
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            out.append((f"--{section}-{f.name.replace('_', '-')}", section, f.name, f.type))
    return out
