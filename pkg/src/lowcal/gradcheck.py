"""Central finite-difference checks for the autodiff ops, losses and full model.

Each probe perturbs one input (or parameter) coordinate by ``±step`` and
compares the numeric slope against the reverse-mode gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import SclConfig, calibration_loss, cloud_distance_loss, supervised_contrastive_loss
from .geometry import Quaternion, RigidTransform
from .network import rms_normalize_channels

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-3
# denominators below this are treated as this, so both-zero gradients pass
_REL_FLOOR = 1e-7


@dataclass(frozen=True)
class Probe:
    op: str
    coord: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), _REL_FLOOR)
        return abs(self.analytic - self.numeric) / denom


@dataclass
class GradcheckReport:
    probes: List[Probe] = field(default_factory=list)
    tol: float = DEFAULT_TOL

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)

    def failures(self) -> List[Probe]:
        return [p for p in self.probes if not p.rel_error < self.tol]

    @property
    def passed(self) -> bool:
        return bool(self.probes) and not self.failures()

    def by_op(self):
        out = {}
        for p in self.probes:
            n, worst = out.get(p.op, (0, 0.0))
            out[p.op] = (n + 1, max(worst, p.rel_error))
        return out


def check_scalar_fn(
    op: str,
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    probes: int,
    step: float = DEFAULT_STEP,
) -> List[Probe]:
    """Probe ``probes`` random coordinates across ``inputs`` of scalar ``fn``."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(ts)
    out.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
    sizes = np.array([a.size for a in arrays])
    result = []
    for _ in range(probes):
        which = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        flat = int(rng.integers(arrays[which].size))
        idx = np.unravel_index(flat, arrays[which].shape)
        vals = []
        for sign in (1.0, -1.0):
            shifted = [a.copy() for a in arrays]
            shifted[which][idx] += sign * step
            vals.append(fn([Tensor(a) for a in shifted]).item())
        numeric = (vals[0] - vals[1]) / (2 * step)
        result.append(Probe(op, (which,) + tuple(int(i) for i in idx), float(grads[which][idx]), numeric))
    return result


def _weighted(fn, rng):
    """Reduce an op's output to a scalar with fixed random weights."""
    cache = {}

    def scalar(ts):
        y = fn(ts)
        if "w" not in cache:
            cache["w"] = rng.normal(size=y.shape)
        return (y * cache["w"]).sum()

    return scalar


def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def op_cases(rng: np.random.Generator):
    """``(name, fn, inputs)`` for every differentiable op and loss."""
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    mask = rng.uniform(size=(5, 6)) > 0.3
    mask[:, 0] = True
    labels = rng.integers(0, 3, size=8)
    labels[:2] = labels[0]  # at least one positive pair
    gq = _unit_quats(rng, 3)
    gt_t = n(3, 3)
    # keep predictions close to targets so |<q, q_gt>| is far from its kink at 0
    pq = gq + 0.05 * n(3, 4)
    clouds = [n(7, 3) * 3, n(5, 3) * 3, np.zeros((0, 3))]
    gts = [RigidTransform(Quaternion.from_array(q), t) for q, t in zip(_unit_quats(rng, 3), n(3, 3))]

    def w(fn):
        return _weighted(fn, rng)

    return [
        ("add", w(lambda t: t[0] + t[1]), [n(3, 4), n(4)]),
        ("sub", w(lambda t: t[0] - t[1]), [n(3, 1), n(3, 4)]),
        ("mul", w(lambda t: t[0] * t[1]), [n(2, 3, 4), n(3, 1)]),
        ("div", w(lambda t: t[0] / t[1]), [n(4, 3), _away_from_zero(rng, (4, 3))]),
        ("rdiv", w(lambda t: 2.0 / t[0]), [_away_from_zero(rng, (5,))]),
        ("pow", w(lambda t: t[0] ** 3), [n(6)]),
        ("matmul", w(lambda t: t[0] @ t[1]), [n(3, 5), n(5, 2)]),
        ("exp", w(lambda t: t[0].exp()), [n(4, 2)]),
        ("log", w(lambda t: t[0].log()), [pos(4, 2)]),
        ("sqrt", w(lambda t: t[0].sqrt()), [pos(6)]),
        ("abs", w(lambda t: t[0].abs()), [_away_from_zero(rng, (6,))]),
        ("sum", w(lambda t: t[0].sum(axis=1)), [n(3, 4)]),
        ("mean", w(lambda t: t[0].mean(axis=0, keepdims=True)), [n(3, 4)]),
        ("max", w(lambda t: t[0].max(axis=1)), [n(4, 5)]),
        ("reshape", w(lambda t: t[0].reshape(6, 2) * t[0].reshape(6, 2)), [n(3, 4)]),
        ("transpose", w(lambda t: t[0].transpose(1, 0, 2).exp()), [n(2, 3, 2)]),
        ("getitem", w(lambda t: t[0][1:, ::2] * t[0][:-1, 1::2]), [n(4, 6)]),
        ("where", w(lambda t: ad.where(mask[:, :4], t[0], t[1] * 2.0)), [n(5, 4), n(5, 4)]),
        ("concat", w(lambda t: ad.concat([t[0], t[1].exp()], axis=1)), [n(3, 2), n(3, 3)]),
        ("relu", w(lambda t: ad.relu(t[0])), [_away_from_zero(rng, (5, 4))]),
        ("leaky_relu", w(lambda t: ad.leaky_relu(t[0], 0.1)), [_away_from_zero(rng, (5, 4))]),
        ("rms_normalize_channels", w(lambda t: rms_normalize_channels(t[0], 1e-3)), [n(2, 4, 3, 3)]),
        ("logsumexp", w(lambda t: ad.logsumexp(t[0], axis=1, mask=mask)), [n(5, 6) * 3]),
        ("linear", w(lambda t: ad.linear(t[0], t[1], t[2])), [n(4, 5), n(3, 5), n(3)]),
        ("l2_normalize_rows", w(lambda t: ad.l2_normalize_rows(t[0])), [n(4, 5)]),
        ("conv2d", w(lambda t: ad.conv2d(t[0], t[1], t[2])), [n(2, 3, 6, 5), n(4, 3, 3, 3), n(4)]),
        ("conv2d_stride2", w(lambda t: ad.conv2d(t[0], t[1], t[2], stride=2)), [n(1, 2, 7, 6), n(3, 2, 3, 3), n(3)]),
        ("maxpool2d", w(lambda t: ad.maxpool2d(t[0])), [n(2, 2, 6, 4)]),
        ("global_avg_pool", w(lambda t: ad.global_avg_pool(t[0])), [n(2, 3, 4, 5)]),
        ("correlation", w(lambda t: ad.correlation(t[0], t[1], 2)), [n(2, 3, 5, 6), n(2, 3, 5, 6)]),
        (
            "calibration_loss",
            lambda t: calibration_loss(ad.l2_normalize_rows(t[0]), t[1], gq, gt_t),
            [pq, gt_t + _away_from_zero(rng, (3, 3), 0.05, 0.5)],
        ),
        (
            "cloud_distance_loss",
            lambda t: cloud_distance_loss(clouds, ad.l2_normalize_rows(t[0]), t[1], gts),
            [n(3, 4), n(3, 3)],
        ),
        (
            "supervised_contrastive_loss",
            lambda t: supervised_contrastive_loss(t[0], labels, SclConfig(0.5)),
            [n(8, 5)],
        ),
    ]


def check_ops(seed: int = 0, probes_per_op: int = 40, step: float = DEFAULT_STEP) -> List[Probe]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn, inputs in op_cases(rng):
        out.extend(check_scalar_fn(name, fn, inputs, rng, probes_per_op, step))
    return out


def check_pipeline(seed: int = 0, coords: int = 100, step: float = DEFAULT_STEP) -> List[Probe]:
    """Full training loss (all three terms) on a 2-sample batch against parameter coordinates."""
    # imported here: pipeline pulls in scene generation
    from .batching import make_samples
    from .pipeline import Model, SceneSet, TrainConfig, _step_pairs, compute_loss, output_scales
    from .scene import SceneConfig

    rng = np.random.default_rng(seed)
    scenes = SceneSet.generate(SceneConfig(seed=seed), 2, first_seed=seed)
    cfg = TrainConfig(batch_size=2, scl_enabled=True)
    net = replace(cfg.network, **output_scales(cfg.range))
    model = Model.initial(net, seed)
    # zero output layers would hide every gradient upstream of them
    for name in ("rot.out.weight", "trans.out.weight", "rot.out.bias", "trans.out.bias"):
        model.params[name].data[...] = rng.normal(0.0, 0.3, size=model.params[name].shape)
    samples = make_samples(scenes, [0, 1], rng, cfg.range)
    pairs, rl, tl = _step_pairs(cfg, samples, [0, 1])

    def loss():
        return compute_loss(model, cfg, scenes, pairs, rl, tl)[0]

    for p in model.params.values():
        p.grad = None
    loss().backward()
    names = list(model.params)
    sizes = np.array([model.params[k].data.size for k in names])
    out = []
    for _ in range(coords):
        k = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        t = model.params[k]
        idx = np.unravel_index(int(rng.integers(t.data.size)), t.shape)
        analytic = float(t.grad[idx])
        orig = t.data[idx]
        vals = []
        for sign in (1.0, -1.0):
            t.data[idx] = orig + sign * step
            vals.append(loss().item())
        t.data[idx] = orig
        out.append(Probe(f"pipeline:{k}", tuple(int(i) for i in idx), analytic, (vals[0] - vals[1]) / (2 * step)))
    return out


def run_gradcheck(
    seed: int = 0, probes_per_op: int = 40, pipeline_coords: int = 100, tol: float = DEFAULT_TOL, step: float = DEFAULT_STEP
) -> GradcheckReport:
    probes = check_ops(seed, probes_per_op, step)
    if pipeline_coords:
        probes += check_pipeline(seed, pipeline_coords, step)
    return GradcheckReport(probes, tol)
