"""Miscalibration sampling and contrastive batch composition."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .geometry import (
    EulerAngles,
    PointCloud,
    Quaternion,
    RigidTransform,
    euler_to_quat,
    transform_compose,
    transform_inverse,
)


@dataclass(frozen=True)
class MiscalibRange:
    """Maximum perturbation per axis: translation in cm, rotation in degrees."""

    max_translation: float
    max_rotation: float

    def __post_init__(self):
        if not (self.max_translation > 0 and self.max_rotation > 0):
            raise ValueError("miscalibration range components must be positive")

    def __str__(self):
        return f"{self.max_translation:g}/{self.max_rotation:g}"

    @classmethod
    def parse(cls, text: str) -> "MiscalibRange":
        """Parse ``"150/20"`` (cm/degrees)."""
        t, _, r = text.partition("/")
        return cls(float(t), float(r))


# ranges used for the staged models, coarse to fine
STAGE_RANGES = (
    MiscalibRange(150, 20),
    MiscalibRange(100, 10),
    MiscalibRange(50, 5),
    MiscalibRange(20, 2),
    MiscalibRange(10, 1),
)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    image: np.ndarray  # (3, h, w) in [0, 1]
    cloud: PointCloud  # LiDAR frame
    rot: Quaternion
    trans: np.ndarray  # (3,) meters


def sample_rotation(rng: np.random.Generator, max_rotation: float) -> Quaternion:
    roll, pitch, yaw = rng.uniform(-max_rotation, max_rotation, size=3)
    return euler_to_quat(EulerAngles(float(roll), float(pitch), float(yaw)))


def sample_translation(rng: np.random.Generator, max_translation: float) -> np.ndarray:
    return rng.uniform(-max_translation, max_translation, size=3) / 100.0


def sample_miscalibration(rng: np.random.Generator, rng_range: MiscalibRange) -> RigidTransform:
    """Per-axis uniform translation (±cm → m) and per-axis uniform Euler rotation."""
    t = sample_translation(rng, rng_range.max_translation)
    q = sample_rotation(rng, rng_range.max_rotation)
    return RigidTransform(q, t)


@dataclass(frozen=True)
class ComposedBatch:
    """All ``b³`` (pair, rotation, translation) combinations.

    ``entries[e] = (k, i, j)`` are 0-based indices of the image/cloud pair,
    the rotation and the translation; labels are the 1-based ``i + 1`` and
    ``j + 1``.
    """

    entries: tuple
    rot_labels: tuple
    trans_labels: tuple
    b: int

    def __len__(self):
        return len(self.entries)


def compose_scl_batch(samples: Sequence) -> ComposedBatch:
    """Expand ``b`` samples into ``b³`` entries, image-major, then rotation, then translation."""
    b = len(samples)
    if b == 0:
        raise ValueError("cannot compose an empty batch")
    entries = tuple(itertools.product(range(b), repeat=3))
    return ComposedBatch(
        entries=entries,
        rot_labels=tuple(i + 1 for _, i, _ in entries),
        trans_labels=tuple(j + 1 for _, _, j in entries),
        b=b,
    )


def miscalibration_for(samples: Sequence[TrainingSample], rot_index: int, trans_index: int) -> RigidTransform:
    return RigidTransform(samples[rot_index].rot, samples[trans_index].trans)


def apply_miscalibration(cloud: PointCloud, gt_extrinsic: RigidTransform, mis: RigidTransform) -> PointCloud:
    """Express a LiDAR-frame cloud under ``mis ∘ gt_extrinsic`` (camera frame, perturbed)."""
    return cloud.transformed(transform_compose(mis, gt_extrinsic))


def regression_target(mis: RigidTransform) -> RigidTransform:
    """The correction that undoes ``mis``."""
    return transform_inverse(mis)


def make_samples(
    scenes: Sequence, indices: Sequence[int], rng: np.random.Generator, rng_range: MiscalibRange
) -> List[TrainingSample]:
    """Pair scenes with freshly drawn rotation/translation perturbations."""
    out = []
    for k in indices:
        cloud, image, _ = scenes[k]
        mis = sample_miscalibration(rng, rng_range)
        out.append(TrainingSample(image, cloud, mis.rotation, mis.translation))
    return out
