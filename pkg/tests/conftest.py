"""Shared fixtures: small cameras, analytic frames and cached pipeline runs."""

from __future__ import annotations

import logging
import time

import numpy as np
import pytest

from dynfusion.config import load_config
from dynfusion.geometry import Frame, Intrinsics
from dynfusion.pipeline import run_pipeline
from dynfusion.synthetic import generate_synthetic, preset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture
def K_small():
    return Intrinsics(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)


@pytest.fixture
def K_qvga():
    return Intrinsics(fx=262.5, fy=262.5, cx=159.5, cy=119.5, width=320, height=240)


def textured_rgb(shape, seed=0, smooth=True):
    """Smooth random texture so image gradients are well defined."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.full((h, w), 0.5)
    for _ in range(4):
        fx, fy = rng.uniform(0.05, 0.3, size=2)
        img += 0.1 * np.sin(fx * xx + rng.uniform(0, 6)) * np.cos(fy * yy + rng.uniform(0, 6))
    g = np.clip(np.round(255 * img), 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def plane_depth(K, normal, offset):
    """Depth image of the plane ``normal . x = offset`` seen from the origin."""
    uu, vv = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    return offset / (rays @ np.asarray(normal, dtype=float))


def make_frame(K, depth, rgb=None, timestamp=0.0, index=0):
    if rgb is None:
        rgb = textured_rgb(depth.shape)
    return Frame.from_images(timestamp, rgb, depth, K, index=index)


# --------------------------------------------------------------------------- cached runs

def _run(tmp_root, name, scene, **sections):
    root = generate_synthetic(scene, tmp_root / f"ds_{name}")
    overrides = [("dataset", "path", str(root)), ("output", "directory", str(tmp_root / f"out_{name}"))]
    if scene.detections:
        overrides.append(("dataset", "detections", str(root / "detections")))
    for dotted, value in sections.items():
        section, key = dotted.split("__")
        overrides.append((section, key, value))
    t0 = time.perf_counter()
    result = run_pipeline(load_config(None, overrides), keep_masks=True)
    result.elapsed = time.perf_counter() - t0  # pipeline only, dataset generation excluded
    return scene, root, result


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def static_run(runs_root):
    scene, root, result = _run(runs_root, "static", preset("static"))
    return scene, root, result, result.elapsed


@pytest.fixture(scope="session")
def two_body_detected(runs_root):
    return _run(runs_root, "two_det", preset("two-body", detections=True))


@pytest.fixture(scope="session")
def two_body_detected_again(runs_root):
    return _run(runs_root, "two_det_again", preset("two-body", detections=True))


@pytest.fixture(scope="session")
def two_body_undetected(runs_root):
    return _run(runs_root, "two_nodet", preset("two-body", detections=False))


@pytest.fixture(scope="session")
def two_body_no_motion(runs_root):
    return _run(runs_root, "two_nomotion", preset("two-body", detections=False), motion__enabled="false")
