"""Command-line entry point: gen-data, train, render, eval, selfcheck.

Exit codes: 0 success, 2 argument/config error, 3 data/ingestion error,
4 numeric failure (including a failed self-check).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import evaluation, plots, selfcheck, training
from .config import RunConfig, echo, load_config
from .data import export_dataset, load_srn, ring_cameras
from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError,
                     NumericError)
from .geometry import canonical_cameras
from .metrics import psnr
from .model import TriplaneReconstructor
from .renderer import RaySampling, render_image

log = logging.getLogger("plkrf")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ArgumentError(Exception):
    pass


def _int_list(text: Optional[str]) -> Optional[list[int]]:
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ArgumentError(f"expected comma-separated integers, got {text!r}") from exc


def _write_png(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _config_for_checkpoint(args) -> RunConfig:
    """Explicit ``--config`` wins; otherwise the echo written next to the checkpoint."""
    path = args.config
    if path is None and args.checkpoint:
        echoed = Path(args.checkpoint).parent / "config.json"
        path = echoed if echoed.is_file() else None
    return load_config(path, args.set)


def _load_model(cfg: RunConfig, checkpoint: Optional[str]) -> TriplaneReconstructor:
    path = Path(checkpoint) if checkpoint else Path(cfg.paths.checkpoint_dir) / "ckpt_latest.plkrf"
    state = training.load_checkpoint(path, cfg.model, cfg.train)
    return state.model


def _scenes(cfg: RunConfig, split: str):
    scenes = load_srn(cfg.paths.dataset, split)
    if not scenes:
        raise DataError(f"no scenes in split '{split}' under {cfg.paths.dataset}")
    return scenes


def _pick_scene(scenes, key: Optional[str]):
    if key is None:
        return scenes[0]
    for s in scenes:
        if s.id == key:
            return s
    if key.isdigit() and int(key) < len(scenes):
        return scenes[int(key)]
    raise ArgumentError(f"unknown scene {key!r}; available: {', '.join(s.id for s in scenes[:10])}")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    root = Path(cfg.paths.dataset)
    counts = {"train": cfg.gen.train, "val": cfg.gen.val, "test": cfg.gen.test}
    export_dataset(root, cfg.data, counts, cfg.gen.seed)
    echo(cfg, root)
    print("split,scenes")
    for split, n in counts.items():
        print(f"{split},{n}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(cfg.paths.checkpoint_dir)
    dataset = load_srn(cfg.paths.dataset, "train")
    echo(cfg, out)
    state = training.run(dataset, cfg.model, cfg.train, out, resume=args.resume, stop_at=args.stop_at)
    log_data = training.read_log(out / "train_log.csv")
    plots.loss_curve(log_data, out / "loss_curve.png")
    print("step,loss,checkpoint")
    final = state.losses[-1] if state.losses else float("nan")
    print(f"{state.step},{final!r},{out / 'ckpt_latest.plkrf'}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config_for_checkpoint(args)
    model = _load_model(cfg, args.checkpoint)
    scene = _pick_scene(_scenes(cfg, args.split or cfg.eval.split), args.scene)
    n = len(scene.views)
    inputs = _int_list(args.inputs) or cfg.eval.input_views or evaluation.default_input_views(n)
    if max(inputs) >= n:
        raise DataError(f"scene {scene.id} has {n} views, input ids {inputs} requested")
    sampling = RaySampling(cfg.eval.samples, False, tuple(cfg.train.background))
    out = Path(cfg.paths.output_dir) / "render"
    out.mkdir(parents=True, exist_ok=True)
    echo(cfg, out)
    rows = []
    if args.orbit is not None:
        if args.orbit < 1:
            raise ArgumentError("--orbit needs at least one view")
        first = scene.views[inputs[0]].camera
        radius = float(np.linalg.norm(first.t))
        elevation = float(np.degrees(np.arcsin(first.t[2] / radius)))
        azimuth = float(np.degrees(np.arctan2(first.t[1], first.t[0])))
        orbit = ring_cameras(args.orbit, radius, elevation, first.width, float(first.K[0, 0]), azimuth)
        cams = canonical_cameras([scene.views[v].camera for v in inputs] + orbit)
        field = model.forward([scene.views[v].image for v in inputs], cams[:len(inputs)])
        for k, cam in enumerate(cams[len(inputs):]):
            path = out / f"{scene.id}_orbit{k:03d}.png"
            _write_png(path, render_image(cam, field, sampling=sampling))
            rows.append((path.name, "", ""))
    else:
        views = _int_list(args.views)
        if views is None:
            views = [v for v in range(n) if v not in inputs]
        bad = [v for v in views if not 0 <= v < n]
        if bad:
            raise ArgumentError(f"unknown view ids {bad}; scene {scene.id} has views 0..{n - 1}")
        field, cams = evaluation.reconstruct(model, scene, inputs)
        for v in views:
            img = render_image(cams[v], field, sampling=sampling)
            path = out / f"{scene.id}_view{v:03d}.png"
            _write_png(path, img)
            rows.append((path.name, v, repr(psnr(img, scene.views[v].image))))
    with open(out / "render.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "view_id", "psnr"])
        w.writerows(rows)
    print("file,view_id,psnr")
    for r in rows:
        print(",".join(str(x) for x in r))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args)
    split = args.split or cfg.eval.split
    scenes = _scenes(cfg, split)
    if cfg.eval.max_scenes is not None:
        scenes = scenes[:cfg.eval.max_scenes]
    debug = args.debug_ground_truth or cfg.eval.debug_ground_truth
    model = None if debug else _load_model(cfg, args.checkpoint)
    sampling = RaySampling(cfg.eval.samples, False, tuple(cfg.train.background))
    fixed = _int_list(args.inputs) or cfg.eval.input_views
    results = []
    for scene in scenes:
        inputs = fixed or evaluation.default_input_views(len(scene.views))
        results += evaluation.evaluate_scene(model, scene, inputs, sampling, debug_ground_truth=debug)
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo(cfg, out)
    evaluation.write_metrics(out / "metrics.csv", results)
    rows = evaluation.summarize(results)
    evaluation.write_summary(out / "summary.csv", rows)
    plots.psnr_vs_angle([r.min_angle for r in results], [r.psnr for r in results], out / "psnr_vs_angle.png")
    print("subset,count,psnr,ssim")
    for row in rows:
        print(f"{row['subset']},{row['count']},{row['psnr']:.4f},{row['ssim']:.4f}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    checks, worst = selfcheck.run_all()
    print(selfcheck.report(checks, worst))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERIC


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (every field has a default)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. --set model.layers=4 (repeatable)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="BLAS threads; 1 is the bit-reproducible reference mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="plkrf", description="Few-view triplane reconstruction with line-distance attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic scenes in SRN layout")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train on the dataset's train split")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this many total steps (schedule unchanged)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render views of one scene to PNG"),
                                 ("eval", cmd_eval, "PSNR/SSIM over a split")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", help="default: <checkpoint_dir>/ckpt_latest.plkrf")
        p.add_argument("--split", help="dataset split (default from eval.split)")
        p.add_argument("--inputs", help="comma-separated input view ids")
        p.set_defaults(func=func)
        if name == "render":
            p.add_argument("--scene", help="scene id or index (default: first)")
            p.add_argument("--views", help="comma-separated view ids (default: all non-input views)")
            p.add_argument("--orbit", type=int, help="render N evenly spaced ring views instead")
        else:
            p.add_argument("--debug-ground-truth", action="store_true",
                           help="score ground truth against itself (PSNR inf, SSIM 1)")

    p = sub.add_parser("selfcheck", parents=[common], help="geometry, gradient and compositing checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_ARGS
    try:
        with threadpool_limits(limits=args.workers):
            return args.func(args)
    except (ArgumentError, ConfigError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
