"""Command line interface: ``dynfusion <run|eval-ate|eval-cloud|synth|dump-masks>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, flag_specs, load_config
from .dataset import DatasetError
from .evaluation import EvaluationError, cloud_compare, ate_rmse, format_report
from .pipeline import PipelineError, run_pipeline
from .synthetic import SceneError, generate_synthetic, load_scene, preset

log = logging.getLogger("dynfusion")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="INI-style config file; flags override it")
    group = p.add_argument_group("configuration keys")
    for flag, section, key, _ in flag_specs():
        group.add_argument(flag, dest=f"cfg__{section}__{key}", metavar="VALUE", default=None,
                           help=f"{section}.{key}")


def _config_from_args(args, **forced):
    overrides = []
    for name, value in vars(args).items():
        if name.startswith("cfg__") and value is not None:
            _, section, key = name.split("__")
            overrides.append((section, key, value))
    for dotted, value in forced.items():
        section, key = dotted.split("__")
        overrides.append((section, key, value))
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynfusion", description="Semantic RGB-D SLAM for dynamic scenes.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline on a TUM-layout dataset")
    p.add_argument("dataset", nargs="?", help="dataset directory (same as --dataset-path)")
    p.add_argument("-o", "--out", help="output directory (same as --output-directory)")
    _add_config_flags(p)

    p = sub.add_parser("dump-masks", help="run the pipeline and write per-frame mask PNGs only")
    p.add_argument("dataset", nargs="?", help="dataset directory (same as --dataset-path)")
    p.add_argument("-o", "--out", help="output directory; PNGs go to its debug/ folder")
    _add_config_flags(p)

    p = sub.add_parser("eval-ate", help="absolute trajectory error of a TUM trajectory")
    p.add_argument("estimated")
    p.add_argument("groundtruth")
    p.add_argument("--max-assoc-gap", type=float, default=0.02)
    p.add_argument("--no-align", action="store_true", help="skip the rigid alignment")
    p.add_argument("--format", choices=("text", "kv"), default="text")

    p = sub.add_parser("eval-cloud", help="accuracy and completeness of a reconstructed cloud")
    p.add_argument("reconstructed", help="PLY file")
    p.add_argument("groundtruth", help="PLY file")
    p.add_argument("--threshold", type=float, default=0.01, help="inlier distance in meters")
    p.add_argument("--align", action="store_true", help="ICP-align the reconstruction first")
    p.add_argument("--format", choices=("text", "kv"), default="text")

    p = sub.add_parser("synth", help="render a synthetic dataset with ground truth")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--preset", default="two-body", help="plane, static or two-body")
    p.add_argument("--scene", metavar="JSON", help="scene description (overrides --preset)")
    p.add_argument("--frames", type=int, help="number of frames")
    p.add_argument("--detections", action="store_true", help="also write .det files for moving bodies")
    p.add_argument("--noise", type=float, help="depth noise sigma coefficient (sigma = noise * z^2)")
    p.add_argument("--seed", type=int, help="noise seed")
    return parser


def _cmd_run(args) -> int:
    forced = {}
    if args.dataset:
        forced["dataset__path"] = args.dataset
    if args.out:
        forced["output__directory"] = args.out
    cfg = _config_from_args(args, **forced)
    _check_dataset(cfg)
    result = run_pipeline(cfg)
    out = Path(cfg.output.directory)
    print(f"frames {len(result.frames)}")
    print(f"maps {len(result.maps)}")
    print(f"trajectory {result.trajectory_path}")
    if result.timer.enabled:
        print(result.timer.report().format(), end="")
    log.info("outputs written to %s", out)
    return EXIT_OK


def _cmd_dump_masks(args) -> int:
    forced = {"output__dump_masks": "true"}
    if args.dataset:
        forced["dataset__path"] = args.dataset
    if args.out:
        forced["output__directory"] = args.out
    cfg = _config_from_args(args, **forced)
    _check_dataset(cfg)
    result = run_pipeline(cfg, export=False)
    print(f"frames {len(result.frames)}")
    print(f"masks {Path(cfg.output.directory) / 'debug'}")
    return EXIT_OK


def _check_dataset(cfg):
    path = cfg.dataset.path
    if not path:
        raise PipelineError("no dataset path given (positional argument or --dataset-path)")
    if not Path(path).is_dir():
        raise DatasetError(f"dataset directory not found: {path}")


def _cmd_eval_ate(args) -> int:
    rep = ate_rmse(Path(args.estimated), Path(args.groundtruth), args.max_assoc_gap, align=not args.no_align)
    print(format_report(rep, args.format), end="")
    return EXIT_OK


def _cmd_eval_cloud(args) -> int:
    rep = cloud_compare(Path(args.reconstructed), Path(args.groundtruth), args.threshold, args.align)
    print(format_report(rep, args.format), end="")
    return EXIT_OK


def _cmd_synth(args) -> int:
    scene = load_scene(args.scene) if args.scene else preset(args.preset)
    if args.frames is not None:
        scene.n_frames = args.frames
    if args.detections:
        scene.detections = True
    if args.noise is not None:
        scene.noise = args.noise
    if args.seed is not None:
        scene.seed = args.seed
    out = generate_synthetic(scene, args.out)
    print(f"dataset {out}")
    print(f"frames {scene.n_frames}")
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "dump-masks": _cmd_dump_masks,
    "eval-ate": _cmd_eval_ate,
    "eval-cloud": _cmd_eval_cloud,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"dynfusion {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, PipelineError, EvaluationError, SceneError, OSError, ValueError) as exc:
        print(f"dynfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
