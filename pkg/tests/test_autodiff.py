import numpy as np
import pytest

from lowcal import autodiff as ad
from lowcal.autodiff import Tensor
from lowcal.gradcheck import Probe, check_scalar_fn, run_gradcheck


def test_gradcheck_suite_passes():
    report = run_gradcheck(seed=1, probes_per_op=40, pipeline_coords=0)
    assert len(report.probes) >= 1000
    assert report.passed, report.failures()[:5]


def test_gradcheck_flags_a_wrong_gradient():
    def bad(ts):
        x = ts[0]
        # forward x**2 but backward claims 3x
        return Tensor._make((x.data**2).sum(), (x,), lambda g: (3.0 * g * x.data,))

    probes = check_scalar_fn("bad", bad, [np.ones(4)], np.random.default_rng(0), 5)
    assert all(p.rel_error > 0.1 for p in probes)


def test_rel_error_floor():
    assert Probe("z", (), 0.0, 1e-12).rel_error < 1e-4
    assert Probe("z", (), 1.0, 1.001).rel_error == pytest.approx(0.001 / 1.001)


def test_broadcast_grad_sums_back():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    (a * b).sum().backward()
    assert np.array_equal(b.grad, np.full(4, 3.0))
    assert a.grad.shape == (3, 4)


def test_shared_node_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_backward_requires_graph_and_scalar():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(2)).sum().backward()
    with pytest.raises(RuntimeError):
        (Tensor(np.ones(2), requires_grad=True) * 2.0).backward()


def test_ndarray_on_left_defers_to_tensor():
    x = Tensor(np.ones(3), requires_grad=True)
    y = np.arange(3.0) * x
    assert isinstance(y, Tensor)


def test_conv2d_same_padding_matches_direct_sum():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, o, i, j] = (xp[n, :, i : i + 3, j : j + 3] * w[o]).sum() + b[o]
    assert np.allclose(got, ref, atol=1e-12)
    s2 = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    assert s2.shape == (2, 4, 3, 3)
    assert np.allclose(s2, ref[:, :, ::2, ::2], atol=1e-12)


def test_maxpool_and_gap_examples():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    assert np.array_equal(ad.maxpool2d(x).data[0, 0], [[5, 7], [13, 15]])
    assert np.array_equal(ad.global_avg_pool(x).data, [[7.5]])


def test_logsumexp_mask_matches_direct():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 5)) * 30
    mask = rng.uniform(size=(4, 5)) > 0.4
    mask[:, 0] = True
    got = ad.logsumexp(Tensor(x), axis=1, mask=mask).data
    ref = [np.log(np.sum(np.exp(np.longdouble(r[m])))) for r, m in zip(x, mask)]
    assert np.allclose(got, np.array(ref, dtype=float), atol=1e-12)


def test_l2_normalize_and_relu():
    v = ad.l2_normalize_rows(Tensor([[3.0, 4.0], [0.0, -2.0]])).data
    assert np.allclose(v, [[0.6, 0.8], [0.0, -1.0]])
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_linear_example():
    y = ad.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [1.0, 1.0]]), Tensor([0.5, -1.0]))
    assert np.array_equal(y.data, [[1.5, 2.0]])


def test_concat_where_getitem():
    a, b = Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))
    assert ad.concat([a, b], axis=1).shape == (2, 3)
    w = ad.where(np.array([True, False]), Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(w.data, [1, 4])
    assert np.array_equal(Tensor(np.arange(6.0))[1::2].data, [1, 3, 5])


def test_leaky_relu_example():
    x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    y = ad.leaky_relu(x, 0.1)
    assert np.allclose(y.data, [-0.2, 0.0, 3.0])
    y.sum().backward()
    assert np.allclose(x.grad, [0.1, 0.1, 1.0])
