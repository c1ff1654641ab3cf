"""Per-stage timing instrumentation and the averaged timing report."""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager

# stage key, display name, reported per model
STAGES = (
    ("initial_tracking", "Initial Tracking", True),
    ("geometric_segmentation", "Geometric segmentation", False),
    ("object_detection", "Object Detection", False),
    ("motion_segmentation", "Motion Segmentation", False),
    ("object_mask_generation", "Object Mask Generation", False),
    ("camera_pose_refinement", "Camera Pose refinement", False),
    ("mapping", "Mapping", True),
)
STAGE_KEYS = tuple(k for k, _, _ in STAGES)
PER_MODEL = {k for k, _, per in STAGES if per}
DISPLAY = {k: name for k, name, _ in STAGES}


class StageTimer:
    """Collects wall-clock samples per stage.

    Per-model stages store time divided by the number of models handled in
    that sample. Each sample is also appended to ``log`` as a
    ``"stage_name ms"`` line, in the order stages complete.
    """

    def __init__(self, enabled: bool = True, clock=time.perf_counter):
        self.enabled = enabled
        self.clock = clock
        self.samples: dict[str, list[float]] = defaultdict(list)
        self.log: list[str] = []

    @contextmanager
    def stage(self, key: str, models: int | None = None):
        if key not in DISPLAY:
            raise KeyError(f"unknown stage {key!r}")
        if not self.enabled:
            yield
            return
        t0 = self.clock()
        try:
            yield
        finally:
            self.record(key, (self.clock() - t0) * 1000.0, models)

    def record(self, key: str, ms: float, models: int | None = None):
        if key not in DISPLAY:
            raise KeyError(f"unknown stage {key!r}")
        if key in PER_MODEL:
            ms = ms / max(1, models or 1)
        self.samples[key].append(ms)
        self.log.append(f"{key} {ms:.3f}")

    def report(self) -> "TimingReport":
        return timing_report(self.samples)


class TimingReport:
    def __init__(self, means: dict[str, float]):
        self.means = means

    @property
    def base(self) -> float:
        return sum(v for k, v in self.means.items() if k not in PER_MODEL)

    @property
    def per_model(self) -> float:
        return sum(v for k, v in self.means.items() if k in PER_MODEL)

    def rows(self) -> list[tuple[str, str]]:
        out = []
        for key in STAGE_KEYS:
            if key not in self.means:
                continue
            v = self.means[key]
            out.append((DISPLAY[key], f"{v:.2f} / model" if key in PER_MODEL else f"{v:.2f}"))
        out.append(("Total", f"{self.base:.2f} + {self.per_model:.2f} / model"))
        return out

    def format(self) -> str:
        rows = self.rows()
        width = max(len(n) for n, _ in rows)
        return "\n".join(f"{n:<{width}}  {v}" for n, v in rows) + "\n"

    def format_kv(self) -> str:
        lines = [f"{k}_ms={v:.6f}" for k, v in self.means.items()]
        lines += [f"total_base_ms={self.base:.6f}", f"total_per_model_ms={self.per_model:.6f}"]
        return "\n".join(lines) + "\n"


def timing_report(samples: dict[str, list[float]]) -> TimingReport:
    """Mean milliseconds per stage; stages without samples are omitted."""
    means = {}
    for key in STAGE_KEYS:
        vals = samples.get(key) or []
        if vals:
            means[key] = sum(vals) / len(vals)
    return TimingReport(means)
