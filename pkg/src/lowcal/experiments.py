"""Desk-scale experiment grids and their CSV reports.

Each kind trains one model per grid cell and evaluates it on held-out
synthetic scenes:

* ``degradation``: scan channel count (default 64 and 32)
* ``interp_compare``: depth interpolation method (none/linear/avg/max/nearest)
* ``scl_ablation``: miscalibration range x {max-pool, max-pool + contrastive}
* ``subsample``: uniform point subsampling rate (default 2, 4 and 8)
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

from .batching import MiscalibRange
from .config import RunConfig
from .depth_image import InterpolationMethod
from .pipeline import CalibrationMetrics, SceneSet, evaluate, make_eval_cases, train_single_stage

log = logging.getLogger(__name__)

CSV_HEADER = ("kind", "param", "x_cm", "y_cm", "z_cm", "roll_deg", "pitch_deg", "yaw_deg", "avg_t_cm", "avg_r_deg")

INTERP_ORDER = (
    InterpolationMethod.NONE,
    InterpolationMethod.LINEAR,
    InterpolationMethod.AVG_POOL,
    InterpolationMethod.MAX_POOL,
    InterpolationMethod.NEAREST,
)


@dataclass(frozen=True)
class ReportRow:
    kind: str
    param: str
    metrics: CalibrationMetrics


def write_csv(rows: Sequence[ReportRow], path: Optional[Union[str, Path]] = None) -> str:
    """Render rows with shortest round-trip floats and LF line endings; optionally save."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.kind, r.param, *(repr(float(v)) for v in r.metrics.as_row())])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(text.encode("utf-8"))
    return text


def parse_csv(text: str) -> List[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    return [ReportRow(rec[0], rec[1], CalibrationMetrics(*(float(v) for v in rec[2:8]))) for rec in reader]


def read_csv(path: Union[str, Path]) -> List[ReportRow]:
    return parse_csv(Path(path).read_text(encoding="utf-8"))


def _load_sets(run: RunConfig, scene_cfg=None, subsample: Optional[int] = None):
    scene_cfg = scene_cfg or run.scene
    sub = run.subsample if subsample is None else subsample
    train = SceneSet.generate(scene_cfg, run.train_scenes, run.train_first_seed, sub)
    val = SceneSet.generate(scene_cfg, run.val_scenes, run.val_first_seed, sub)
    return train, val


def run_cell(run: RunConfig, train_cfg=None, scene_cfg=None, subsample: Optional[int] = None) -> CalibrationMetrics:
    """Train on synthetic scenes and evaluate on held-out ones."""
    train_cfg = train_cfg or run.train
    train, val = _load_sets(run, scene_cfg, subsample)
    cases = make_eval_cases(val, train_cfg.range, run.eval_seed, run.eval_per_scene)
    model = train_single_stage(train_cfg, train).model
    return evaluate(model, val, cases)


def _grid(run: RunConfig, default: Sequence[str]) -> List[str]:
    if run.grid:
        return [g.strip() for g in run.grid.split(",") if g.strip()]
    return list(default)


def _degradation(run: RunConfig):
    for ch in _grid(run, ["64", "32"]):
        yield ch, {"scene_cfg": replace(run.scene, channels=int(ch))}


def _interp(run: RunConfig):
    for m in _grid(run, [m.value for m in INTERP_ORDER]):
        yield m, {"train_cfg": replace(run.train, interpolation=InterpolationMethod(m))}


def _scl_ablation(run: RunConfig):
    for r in _grid(run, ["20/2", "10/1"]):
        rng_range = MiscalibRange.parse(r)
        for scl in (False, True):
            name = f"{run.train.interpolation.value}{'+scl' if scl else ''}@{rng_range}"
            cfg = replace(run.train, range=rng_range, scl_enabled=scl)
            if scl and cfg.batch_size < 2:
                cfg = replace(cfg, batch_size=2)
            yield name, {"train_cfg": cfg}


def _subsample(run: RunConfig):
    for rate in _grid(run, ["2", "4", "8"]):
        yield rate, {"subsample": int(rate)}


EXPERIMENTS: Dict[str, Callable] = {
    "degradation": _degradation,
    "interp_compare": _interp,
    "scl_ablation": _scl_ablation,
    "subsample": _subsample,
}


def run_experiment(kind: str, run: RunConfig = RunConfig(), on_row: Optional[Callable[[ReportRow], None]] = None) -> List[ReportRow]:
    if kind not in EXPERIMENTS:
        raise ValueError(f"unknown experiment kind {kind!r}; choose from {', '.join(EXPERIMENTS)}")
    rows = []
    for param, overrides in EXPERIMENTS[kind](run):
        log.info("%s: running cell %s", kind, param)
        row = ReportRow(kind, param, run_cell(run, **overrides))
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
