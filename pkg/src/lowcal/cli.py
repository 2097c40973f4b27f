"""``lowcal`` command line: synth, train, calibrate, eval, experiment, gradcheck.

Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ConfigError, RunConfig, load_run_config, load_scene_config
from .depth_image import CameraIntrinsics, FormatError
from .io import load_cloud, load_image, load_transform

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "LOWCAL_SEED"

log = logging.getLogger("lowcal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args) -> Optional[int]:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _run_config(args) -> RunConfig:
    run = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    return run.with_seed(_seed(args))


def _fmt(v: float) -> str:
    return format(float(v) + 0.0, ".17g")


def _load_chain(arg: str):
    from .pipeline import Model

    paths = [p for p in arg.split(",") if p]
    if not paths:
        raise UsageError("--chain needs at least one checkpoint")
    return [Model.load(p) for p in paths]


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .pipeline import SceneSet

    cfg = load_scene_config(args.scene) if args.scene else None
    from .scene import SceneConfig

    cfg = cfg or SceneConfig()
    seed = _seed(args)
    first = cfg.seed if seed is None else seed
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    scenes = SceneSet.generate(cfg, args.count, first_seed=first)
    manifest = scenes.save(args.out)
    print(manifest)
    return EXIT_OK


def _scene_sets(run: RunConfig):
    from .pipeline import SceneSet

    if run.data:
        data = SceneSet.load(run.data)
        n_val = min(run.val_scenes, max(len(data) - 1, 0))
        cut = len(data) - n_val
        return SceneSet(data.scenes[:cut], data.intrinsics), SceneSet(data.scenes[cut:], data.intrinsics)
    train = SceneSet.generate(run.scene, run.train_scenes, run.train_first_seed, run.subsample)
    val = SceneSet.generate(run.scene, run.val_scenes, run.val_first_seed, run.subsample)
    return train, val


def cmd_train(args) -> int:
    from .pipeline import Model, make_eval_cases, train_single_stage

    run = _run_config(args)
    train, val = _scene_sets(run)
    cases = make_eval_cases(val, run.train.range, run.eval_seed, run.eval_per_scene) if len(val) else None
    init = Model.load(args.init) if args.init else None
    out = sys.stdout
    epoch_losses: List[float] = []

    def on_step(epoch, step, loss):
        epoch_losses.append(loss)
        if len(epoch_losses) == run.train.steps_per_epoch:
            out.write(f"{epoch},{step},{repr(float(np.mean(epoch_losses)))}\n")
            out.flush()
            epoch_losses.clear()

    result = train_single_stage(run.train, train, val if cases else None, cases, on_step=on_step, init=init)
    result.model.save(args.out)
    for i, m in enumerate(result.val_metrics):
        log.info("epoch %d validation: avg_t %.3f cm avg_r %.3f deg", i, m.avg_translation, m.avg_rotation)
    return EXIT_OK


def _intrinsics(args, model) -> CameraIntrinsics:
    if args.intrinsics:
        try:
            fx, fy, cx, cy = (float(v) for v in args.intrinsics.split(","))
        except ValueError as exc:
            raise UsageError("--intrinsics expects fx,fy,cx,cy") from exc
        return CameraIntrinsics(fx, fy, cx, cy, model.cfg.width, model.cfg.height)
    if model.intrinsics is not None:
        return model.intrinsics
    raise UsageError("checkpoint has no stored camera; pass --intrinsics fx,fy,cx,cy")


def cmd_calibrate(args) -> int:
    from .pipeline import calibrate_multistage

    models = _load_chain(args.chain)
    k = _intrinsics(args, models[0])
    cloud = load_cloud(args.cloud)
    image = load_image(args.image)
    if args.extrinsic:
        cloud = cloud.transformed(load_transform(args.extrinsic))
    corr = calibrate_multistage(models, image, cloud, k)
    print(" ".join(_fmt(v) for v in corr.as_array()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .batching import MiscalibRange
    from .experiments import ReportRow, write_csv
    from .pipeline import SceneSet, evaluate, make_eval_cases

    models = _load_chain(args.chain)
    data = SceneSet.load(args.data)
    rng_range = MiscalibRange.parse(args.range)
    seed = _seed(args)
    cases = make_eval_cases(data, rng_range, 0 if seed is None else seed, args.per_scene)
    metrics = evaluate(models, data, cases)
    text = write_csv([ReportRow("eval", str(rng_range), metrics)], args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import EXPERIMENTS, run_experiment, write_csv
    from .plotting import plot_report

    if args.kind not in EXPERIMENTS:
        raise UsageError(f"unknown experiment kind {args.kind!r}; choose from {', '.join(EXPERIMENTS)}")
    run = _run_config(args)
    if args.grid:
        run = replace(run, grid=args.grid)
    rows = run_experiment(args.kind, run, on_row=lambda r: log.info("%s %s: %s", r.kind, r.param, r.metrics))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out)
    plot_report(rows, out.with_suffix(".png"), title=args.kind)
    print(out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    seed = _seed(args)
    report = run_gradcheck(seed=0 if seed is None else seed, probes_per_op=args.probes, pipeline_coords=args.coords, tol=args.tol)
    for op, (n, worst) in report.by_op().items():
        print(f"{op:40s} {n:4d} probes  max rel err {worst:.2e}")
    bad = report.failures()
    print(f"{len(report.probes)} probes, {len(bad)} failures, max rel err {report.max_rel_error:.2e}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lowcal", description="LiDAR-camera extrinsic calibration at desk scale")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help=f"seed (falls back to ${SEED_ENV})")
        return sp

    s = seeded(sub.add_parser("synth", help="write synthetic (cloud, image, extrinsic) triples"))
    s.add_argument("--scene", help="scene config file (key = value)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = seeded(sub.add_parser("train", help="train one single-stage model"))
    s.add_argument("--config", help="run config file (key = value)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--init", help="checkpoint to start from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", help="predict the correction for one cloud/image pair")
    s.add_argument("--chain", required=True, help="comma-separated checkpoints, widest range first")
    s.add_argument("--cloud", required=True, help="binary cloud (x, y, z, intensity float32)")
    s.add_argument("--image", required=True, help="P6 PPM image")
    s.add_argument("--extrinsic", help="initial LiDAR-to-camera guess applied to the cloud first")
    s.add_argument("--intrinsics", help="fx,fy,cx,cy (default: camera stored in the checkpoint)")
    s.set_defaults(func=cmd_calibrate)

    s = seeded(sub.add_parser("eval", help="evaluate a chain on stored scenes"))
    s.add_argument("--chain", required=True)
    s.add_argument("--data", required=True, help="scene manifest written by synth")
    s.add_argument("--range", default="10/1", help="miscalibration range cm/deg for the test perturbations")
    s.add_argument("--per-scene", type=int, default=1)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_eval)

    s = seeded(sub.add_parser("experiment", help="run an experiment grid; writes CSV and PNG"))
    s.add_argument("--kind", required=True)
    s.add_argument("--config", help="run config file (key = value)")
    s.add_argument("--grid", help="override the grid values, comma-separated")
    s.add_argument("--out", default="report.csv")
    s.set_defaults(func=cmd_experiment)

    s = seeded(sub.add_parser("gradcheck", help="finite-difference check of every op, loss and the model"))
    s.add_argument("--probes", type=int, default=40, help="probes per op")
    s.add_argument("--coords", type=int, default=100, help="parameter coordinates for the full-model check")
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"lowcal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ValueError, RuntimeError) as exc:
        print(f"lowcal: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
