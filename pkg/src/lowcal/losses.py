"""Training losses: calibration, cloud distance, supervised contrastive."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, l2_normalize_rows, logsumexp
from .geometry import PointCloud, Quaternion, RigidTransform, quat_to_matrix


@dataclass(frozen=True)
class SclConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LossWeights:
    calib: float = 1.0
    cloud: float = 0.5
    scl: float = 0.1
    quat_mix: float = 0.5

    def __post_init__(self):
        if min(self.calib, self.cloud, self.scl) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.calib, self.cloud, self.scl) <= 0:
            raise ValueError("at least one loss weight must be positive")
        if not 0.0 <= self.quat_mix <= 1.0:
            raise ValueError("quat_mix must lie in [0, 1]")


def _quat_rows(qs) -> np.ndarray:
    if isinstance(qs, Quaternion):
        qs = [qs]
    return np.array([q.as_array() if isinstance(q, Quaternion) else np.asarray(q, float) for q in qs]).reshape(-1, 4)


def calibration_loss(pred_q: Tensor, pred_t: Tensor, gt_q, gt_t, quat_mix: float = 0.5) -> Tensor:
    """``λ·mean(1 - |<q, q_gt>|) + (1 - λ)·mean|t - t_gt|``; sign-invariant in ``q``."""
    gq = _quat_rows(gt_q)
    gt = np.asarray(gt_t, dtype=np.float64).reshape(-1, 3)
    b = pred_q.shape[0]
    if pred_q.shape != (b, 4) or pred_t.shape != (b, 3) or len(gq) != b or len(gt) != b:
        raise ValueError(
            f"batch mismatch: pred_q {pred_q.shape}, pred_t {pred_t.shape}, gt_q {gq.shape}, gt_t {gt.shape}"
        )
    dot = (pred_q * gq).sum(axis=1)
    rot = (1.0 - dot.abs()).mean()
    trans = (pred_t - gt).abs().mean()
    return rot * quat_mix + trans * (1.0 - quat_mix)


def _rotate(q: Tensor, pts: np.ndarray):
    """Rotate ``pts (b, m, 3)`` by the rows of unit quaternions ``q (b, 4)``."""
    w, x, y, z = (q[:, i : i + 1] for i in range(4))
    px, py, pz = pts[..., 0], pts[..., 1], pts[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rx = (1.0 - 2.0 * (yy + zz)) * px + 2.0 * (xy - wz) * py + 2.0 * (xz + wy) * pz
    ry = 2.0 * (xy + wz) * px + (1.0 - 2.0 * (xx + zz)) * py + 2.0 * (yz - wx) * pz
    rz = 2.0 * (xz - wy) * px + 2.0 * (yz + wx) * py + (1.0 - 2.0 * (xx + yy)) * pz
    return rx, ry, rz


_SQRT_FLOOR = 1e-24


def cloud_distance_loss(clouds: Sequence, pred_q: Tensor, pred_t: Tensor, gt: Sequence[RigidTransform]) -> Tensor:
    """Batch mean of per-cloud mean ``||pred(p) - gt(p)||``.

    ``clouds`` holds one :class:`PointCloud` (or ``(n, 3)`` array) per batch
    row; empty clouds contribute 0.
    """
    if isinstance(gt, RigidTransform):
        gt = [gt]
    arrays = [c.points if isinstance(c, PointCloud) else np.asarray(c, float).reshape(-1, 3) for c in clouds]
    b = len(arrays)
    if pred_q.shape != (b, 4) or pred_t.shape != (b, 3) or len(gt) != b:
        raise ValueError("cloud_distance_loss: batch sizes disagree")
    m = max([len(a) for a in arrays] + [1])
    pts = np.zeros((b, m, 3))
    weight = np.zeros((b, m))
    target = np.zeros((b, m, 3))
    for i, (a, g) in enumerate(zip(arrays, gt)):
        n = len(a)
        if n == 0:
            continue
        pts[i, :n] = a
        weight[i, :n] = 1.0 / n
        target[i, :n] = a @ quat_to_matrix(g.rotation).T + g.translation
    rx, ry, rz = _rotate(pred_q, pts)
    dx = rx + pred_t[:, 0:1] - target[..., 0]
    dy = ry + pred_t[:, 1:2] - target[..., 1]
    dz = rz + pred_t[:, 2:3] - target[..., 2]
    # shifted sqrt: exact 0 at zero distance with a finite gradient there
    dist = (dx * dx + dy * dy + dz * dz + _SQRT_FLOOR).sqrt() - np.sqrt(_SQRT_FLOOR)
    return (dist * weight).sum() * (1.0 / b)


def supervised_contrastive_loss(features: Tensor, labels: Sequence[int], cfg: SclConfig = SclConfig()) -> Tensor:
    """Supervised contrastive loss summed over anchors.

    For anchor ``i`` the positives are the other samples sharing its label and
    the denominator runs over every sample except ``i``.  Features are
    L2-normalised first.  Anchors without positives are skipped.
    """
    labels = np.asarray(labels).reshape(-1)
    n = features.shape[0]
    if features.ndim != 2:
        raise ValueError(f"features must be (n, f), got {features.shape}")
    if n < 2:
        raise ValueError("supervised contrastive loss needs at least 2 samples")
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} features")
    z = l2_normalize_rows(features)
    sim = (z @ z.T) * (1.0 / cfg.temperature)
    others = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & others
    n_pos = pos.sum(axis=1)
    if not n_pos.any():
        warnings.warn("no anchor has a positive; supervised contrastive loss is 0", RuntimeWarning, stacklevel=2)
    log_denom = logsumexp(sim, axis=1, mask=others)
    coef = np.where(n_pos > 0, 1.0 / np.maximum(n_pos, 1), 0.0)
    pos_sum = (sim * pos).sum(axis=1)
    # Σ_p log(exp(s_ip) / Σ_a exp(s_ia)) = Σ_p s_ip - |P(i)|·logΣ_a exp(s_ia)
    per_anchor = (pos_sum - log_denom * n_pos) * (-coef)
    return per_anchor.sum()


def total_loss(
    calib: Tensor,
    cloud: Tensor,
    scl_rot=0.0,
    scl_trans=0.0,
    weights: LossWeights = LossWeights(),
) -> Tensor:
    """``w_calib·calib + w_cloud·cloud + w_scl·(scl_rot + scl_trans)``."""
    out = calib * weights.calib + cloud * weights.cloud
    if weights.scl:
        out = out + (scl_rot + scl_trans) * weights.scl
    return out
