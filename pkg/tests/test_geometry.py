import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowcal.geometry import (
    EulerAngles,
    PointCloud,
    Quaternion,
    RigidTransform,
    axis_angle_quat,
    euler_to_quat,
    quat_angle,
    quat_compose,
    quat_to_euler,
    quat_to_matrix,
    subsample_uniform,
    transform_apply,
    transform_compose,
    transform_inverse,
    transform_to_matrix,
)


def rodrigues(axis, angle_rad):
    """Rotation matrix from axis-angle, built without quaternions."""
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * kx + (1 - math.cos(angle_rad)) * kx @ kx


def random_axis_angle(rng):
    axis = rng.normal(size=3)
    return axis / np.linalg.norm(axis), rng.uniform(0, math.pi)


def quat_from_axis_angle(axis, angle_rad):
    s = math.sin(angle_rad / 2)
    return Quaternion(math.cos(angle_rad / 2), *(np.asarray(axis) * s)).normalized()


def random_transform(rng):
    axis, ang = random_axis_angle(rng)
    return RigidTransform(quat_from_axis_angle(axis, ang), rng.normal(size=3) * 3)


def close_q(a: Quaternion, b: Quaternion, tol=1e-9):
    return np.allclose(a.as_array(), b.as_array(), atol=tol) or np.allclose(a.as_array(), -b.as_array(), atol=tol)


def test_identity_compose():
    q = axis_angle_quat([1, 2, 3], 40)
    assert close_q(quat_compose(Quaternion.identity(), q), q)


def test_quarter_turns_about_z_make_half_turn():
    q90 = axis_angle_quat([0, 0, 1], 90)
    assert close_q(quat_compose(q90, q90), axis_angle_quat([0, 0, 1], 180))


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a1, t1 = random_axis_angle(rng)
        a2, t2 = random_axis_angle(rng)
        q = quat_compose(quat_from_axis_angle(a1, t1), quat_from_axis_angle(a2, t2))
        assert np.allclose(quat_to_matrix(q), rodrigues(a1, t1) @ rodrigues(a2, t2), atol=1e-12)
        assert q.w >= 0


def test_compose_rejects_non_finite():
    with pytest.raises(ValueError):
        quat_compose(Quaternion(float("nan"), 0, 0, 0), Quaternion.identity())


def test_quat_angle_examples():
    q = axis_angle_quat([0.3, -1, 2], 77)
    assert quat_angle(q, q) == pytest.approx(0, abs=1e-12)
    assert quat_angle(Quaternion.identity(), axis_angle_quat([1, 0, 0], 10)) == pytest.approx(10, abs=1e-12)


def test_quat_angle_matches_trace_formula():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a1, t1 = random_axis_angle(rng)
        a2, t2 = random_axis_angle(rng)
        r1, r2 = rodrigues(a1, t1), rodrigues(a2, t2)
        cos = np.clip((np.trace(r1.T @ r2) - 1) / 2, -1, 1)
        expected = math.degrees(math.acos(cos))
        got = quat_angle(quat_from_axis_angle(a1, t1), quat_from_axis_angle(a2, t2))
        assert got == pytest.approx(expected, abs=1e-6)


def test_quat_angle_sign_invariant_and_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = quat_from_axis_angle(*random_axis_angle(rng))
        b = quat_from_axis_angle(*random_axis_angle(rng))
        neg = Quaternion(*(-b.as_array()))
        assert quat_angle(a, b) == pytest.approx(quat_angle(b, a), abs=1e-12)
        assert quat_angle(a, neg) == pytest.approx(quat_angle(a, b), abs=1e-12)
        assert 0 <= quat_angle(a, b) <= 180


def test_quat_angle_triangle_inequality():
    rng = np.random.default_rng(4)
    for _ in range(500):
        a, b, c = (quat_from_axis_angle(*random_axis_angle(rng)) for _ in range(3))
        assert quat_angle(a, c) <= quat_angle(a, b) + quat_angle(b, c) + 1e-9


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_normalize_idempotent_and_canonical(v):
    q = Quaternion(*v).normalized()
    assert q.norm() == pytest.approx(1.0, abs=1e-9)
    assert q.w >= 0
    assert np.array_equal(q.normalized().as_array(), q.as_array())


def test_transform_apply_examples():
    p = np.array([0.4, -2.0, 7.0])
    assert np.allclose(transform_apply(RigidTransform.identity(), p), p)
    assert np.allclose(transform_apply(RigidTransform(Quaternion.identity(), [1, 2, 3]), np.zeros(3)), [1, 2, 3])
    rz = RigidTransform(axis_angle_quat([0, 0, 1], 90), np.zeros(3))
    assert np.allclose(transform_apply(rz, [1, 0, 0]), [0, 1, 0], atol=1e-15)


def test_compose_and_inverse_examples():
    t = random_transform(np.random.default_rng(5))
    same = transform_compose(t, RigidTransform.identity())
    assert close_q(same.rotation, t.rotation) and np.allclose(same.translation, t.translation)
    ident = transform_compose(t, transform_inverse(t))
    assert close_q(ident.rotation, Quaternion.identity()) and np.allclose(ident.translation, 0, atol=1e-9)


def test_compose_matches_homogeneous_matrices():
    rng = np.random.default_rng(6)
    for _ in range(200):
        a, b = random_transform(rng), random_transform(rng)
        p = rng.normal(size=3) * 5
        ma = np.eye(4)
        ma[:3, :3] = rodrigues(*_axis_angle_of(a.rotation))
        ma[:3, 3] = a.translation
        mb = np.eye(4)
        mb[:3, :3] = rodrigues(*_axis_angle_of(b.rotation))
        mb[:3, 3] = b.translation
        expected = (ma @ mb @ np.append(p, 1.0))[:3]
        assert np.allclose(transform_apply(transform_compose(a, b), p), expected, atol=1e-9)
        assert np.allclose(transform_apply(transform_compose(a, b), p), transform_apply(a, transform_apply(b, p)), atol=1e-9)
        assert np.allclose(transform_to_matrix(transform_compose(a, b)), ma @ mb, atol=1e-9)


def _axis_angle_of(q: Quaternion):
    v = np.array([q.x, q.y, q.z])
    s = np.linalg.norm(v)
    if s < 1e-15:
        return np.array([1.0, 0, 0]), 0.0
    return v / s, 2 * math.atan2(s, q.w)


def test_euler_examples():
    assert close_q(euler_to_quat(EulerAngles(0, 0, 0)), Quaternion.identity())
    assert close_q(euler_to_quat(EulerAngles(0, 0, 90)), axis_angle_quat([0, 0, 1], 90))
    assert close_q(euler_to_quat(EulerAngles(30, 0, 0)), axis_angle_quat([1, 0, 0], 30))
    assert close_q(euler_to_quat(EulerAngles(0, -20, 0)), axis_angle_quat([0, 1, 0], -20))


def test_euler_is_intrinsic_zyx_matrix_product():
    rng = np.random.default_rng(7)
    for _ in range(200):
        r, p, y = rng.uniform(-179, 179), rng.uniform(-88, 88), rng.uniform(-179, 179)
        m = rodrigues([0, 0, 1], math.radians(y)) @ rodrigues([0, 1, 0], math.radians(p)) @ rodrigues([1, 0, 0], math.radians(r))
        assert np.allclose(quat_to_matrix(euler_to_quat(EulerAngles(r, p, y))), m, atol=1e-12)


def test_gimbal_lock_decomposition_is_canonical():
    q = euler_to_quat(EulerAngles(25, 90, 40))
    e = quat_to_euler(q)
    assert e.pitch == pytest.approx(90)
    assert e.roll == 0.0
    assert quat_angle(euler_to_quat(e), q) == pytest.approx(0, abs=1e-5)


def test_pure_roll_round_trip_and_range():
    e = quat_to_euler(euler_to_quat(EulerAngles(180, 0, 0)))
    assert -180 < e.roll <= 180


def test_subsample_examples():
    pc = PointCloud(np.arange(30, dtype=float).reshape(10, 3), np.linspace(0, 1, 10))
    sub = subsample_uniform(pc, 2)
    assert len(sub) == 5
    assert np.array_equal(sub.points[:, 0], pc.points[[0, 2, 4, 6, 8], 0])
    assert np.array_equal(sub.intensity, pc.intensity[[0, 2, 4, 6, 8]])
    same = subsample_uniform(pc, 1)
    assert np.array_equal(same.points, pc.points)


@pytest.mark.parametrize("rate", [2, 4, 8])
@pytest.mark.parametrize("n", [0, 1, 7, 64, 101])
def test_subsample_length_is_ceil(rate, n):
    pc = PointCloud(np.zeros((n, 3)))
    assert len(subsample_uniform(pc, rate)) == math.ceil(n / rate)


def test_subsample_rejects_zero_rate():
    with pytest.raises(ValueError):
        subsample_uniform(PointCloud(np.zeros((3, 3))), 0)


@given(st.integers(0, 200), st.integers(1, 9), st.integers(1, 9))
def test_subsample_rates_compose(n, r, s):
    pc = PointCloud(np.arange(n, dtype=float)[:, None].repeat(3, axis=1))
    twice = subsample_uniform(subsample_uniform(pc, r), s)
    assert np.array_equal(twice.points, subsample_uniform(pc, r * s).points)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_isometry(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng)
    p, q = rng.normal(size=3) * 10, rng.normal(size=3) * 10
    d0 = np.linalg.norm(p - q)
    d1 = np.linalg.norm(transform_apply(t, p) - transform_apply(t, q))
    assert abs(d1 - d0) < 1e-9
