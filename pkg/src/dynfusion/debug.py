"""PNG dumps of intermediate masks for inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .tracking import RESIDUAL_SENTINEL


def label_colors(labels: np.ndarray, seed: int = 7) -> np.ndarray:
    """Stable pseudo-random color per label; label 0 is black."""
    n = int(labels.max()) + 1 if labels.size else 1
    rng = np.random.default_rng(seed)
    lut = rng.integers(40, 256, size=(n, 3), dtype=np.uint8)
    lut[0] = 0
    return lut[labels]


def save_labels(path, labels: np.ndarray):
    Image.fromarray(label_colors(labels)).save(path)


def save_mask(path, mask: np.ndarray):
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)


def save_residuals(path, residuals: np.ndarray, vmax: float | None = None):
    """Grayscale heat map of a residual map; sentinel pixels are black."""
    valid = residuals != RESIDUAL_SENTINEL
    vals = np.sqrt(np.where(valid, residuals, 0.0))
    if vmax is None:
        vmax = float(np.percentile(vals[valid], 99)) if valid.any() else 1.0
    img = np.clip(vals / max(vmax, 1e-12), 0, 1)
    rgb = np.zeros(residuals.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.round(255 * img).astype(np.uint8)
    rgb[..., 1] = np.round(255 * (1 - np.abs(2 * img - 1))).astype(np.uint8)
    rgb[..., 2] = np.round(255 * (1 - img)).astype(np.uint8)
    rgb[~valid] = 0
    Image.fromarray(rgb).save(path)


def dump_frame(out_dir, index: int, segments=None, instances=None, motion=None, invalid=None, residuals=None):
    """Write whichever masks are given as ``<kind>_<index>.png``; instance
    masks also get a ``.txt`` sidecar listing ``id class_id class_name rigid pixels``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{index:06d}"
    written = []
    if segments is not None:
        written.append(out / f"segments_{stem}.png")
        save_labels(written[-1], segments.labels)
    if instances is not None:
        written.append(out / f"instances_{stem}.png")
        save_labels(written[-1], instances.instance_labels)
        side = out / f"instances_{stem}.txt"
        side.write_text("".join(f"{i.instance_id} {i.class_id} {i.class_name} {int(i.rigid)} {i.pixel_count}\n"
                                for i in instances.instances))
        written.append(side)
    if motion is not None:
        written.append(out / f"motion_{stem}.png")
        save_mask(written[-1], motion)
    if invalid is not None:
        written.append(out / f"invalid_{stem}.png")
        save_mask(written[-1], invalid)
    if residuals is not None:
        written.append(out / f"residuals_{stem}.png")
        save_residuals(written[-1], residuals)
    return written
