import numpy as np
import pytest

from irs_sensing.neuralnet import layers as L
from oracles import central_difference, naive_conv_same


@pytest.mark.parametrize("c_in, c_out", [(1, 5), (3, 3), (6, 2)])
def test_conv_forward_matches_loops(c_in, c_out):
    rng = np.random.default_rng(c_in * 10 + c_out)
    x = rng.normal(size=(2, 5, 4, c_in))
    w = rng.normal(size=(c_out, c_in, 3, 3))
    out, _ = L.conv_forward(x, w)
    assert np.allclose(out, naive_conv_same(x, w), atol=1e-12)


@pytest.mark.parametrize("c_in, c_out", [(1, 4), (5, 2)])
def test_conv_backward_matches_finite_differences(c_in, c_out):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 4, 3, c_in))
    w = rng.normal(size=(c_out, c_in, 3, 3))
    probe = rng.normal(size=(2, 4, 3, c_out))

    def f():
        return float((naive_conv_same(x, w) * probe).sum())

    _, cache = L.conv_forward(x, w)
    dx, dw = L.conv_backward(probe, cache, w, x.shape)
    for idx in [(0, 0, 0, 0), (c_out - 1, c_in - 1, 2, 1), (0, c_in - 1, 1, 2)]:
        assert dw[idx] == pytest.approx(central_difference(f, w, idx), rel=1e-6, abs=1e-8)
    for idx in [(0, 0, 0, 0), (1, 3, 2, c_in - 1), (1, 1, 1, 0)]:
        assert dx[idx] == pytest.approx(central_difference(f, x, idx), rel=1e-6, abs=1e-8)


def test_grouped_conv_equals_independent_group_convs():
    rng = np.random.default_rng(1)
    G, F, Cg = 3, 2, 2
    x = rng.normal(size=(2, 4, 3, G * Cg))
    w = rng.normal(size=(G, F, Cg, 3, 3))
    out, _ = L.grouped_conv_forward(x, w)
    for g in range(G):
        ref = naive_conv_same(x[..., g * Cg:(g + 1) * Cg], w[g])
        assert np.allclose(out[..., g * F:(g + 1) * F], ref, atol=1e-12)


def test_grouped_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        L.grouped_conv_forward(np.zeros((1, 4, 4, 5)), np.zeros((3, 2, 2, 3, 3)))


def test_grouped_conv_backward_keeps_groups_separate():
    rng = np.random.default_rng(2)
    G, F, Cg = 3, 2, 2
    x = rng.normal(size=(1, 4, 3, G * Cg))
    w = rng.normal(size=(G, F, Cg, 3, 3))
    _, cache = L.grouped_conv_forward(x, w)
    dout = np.zeros((1, 4, 3, G * F))
    dout[..., F:2 * F] = rng.normal(size=(1, 4, 3, F))  # only group 1 receives gradient
    dx, dw = L.grouped_conv_backward(dout, cache, w, x.shape)
    assert np.all(dw[0] == 0) and np.all(dw[2] == 0) and np.any(dw[1] != 0)
    assert np.all(dx[..., :Cg] == 0) and np.all(dx[..., 2 * Cg:] == 0)


def test_batchnorm_train_normalises_and_eval_uses_given_stats():
    rng = np.random.default_rng(3)
    x = rng.normal(3.0, 2.0, size=(8, 4, 4, 5))
    gamma, beta = np.ones(5), np.zeros(5)
    out, _, mu, var = L.batchnorm_forward(x, gamma, beta, None, None, True, 1e-5)
    flat = out.reshape(-1, 5)
    assert np.allclose(flat.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(flat.var(axis=0), 1, atol=1e-4)
    assert np.allclose(mu, x.reshape(-1, 5).mean(axis=0))
    assert np.allclose(var, x.reshape(-1, 5).var(axis=0))
    out_eval, *_ = L.batchnorm_forward(x, gamma, beta, np.full(5, 3.0), np.full(5, 4.0), False)
    assert np.allclose(out_eval, (x - 3.0) / np.sqrt(4.0 + 1e-5))


def test_batchnorm_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 2, 2, 2))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    probe = rng.normal(size=x.shape)

    def f():
        out, *_ = L.batchnorm_forward(x, gamma, beta, None, None, True)
        return float((out * probe).sum())

    _, cache, *_ = L.batchnorm_forward(x, gamma, beta, None, None, True)
    dx, dgamma, dbeta = L.batchnorm_backward(probe, cache)
    for idx in np.ndindex(x.shape):
        assert dx[idx] == pytest.approx(central_difference(f, x, idx), rel=1e-5, abs=1e-8)
    for c in range(2):
        assert dgamma[c] == pytest.approx(central_difference(f, gamma, c), rel=1e-6)
        assert dbeta[c] == pytest.approx(central_difference(f, beta, c), rel=1e-6)


def test_maxpool_forward_and_backward():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    out, mask = L.maxpool_forward(x, 2, 1)
    assert out[0, :, :, 0].tolist() == [[4, 5, 6, 7], [12, 13, 14, 15]]
    d = L.maxpool_backward(np.ones_like(out), mask, x.shape, 2, 1)
    assert d[0, :, :, 0].tolist() == [[0] * 4, [1] * 4, [0] * 4, [1] * 4]


def test_pools_reject_non_tiling_windows():
    with pytest.raises(ValueError):
        L.maxpool_forward(np.zeros((1, 5, 4, 1)), 2, 1)
    with pytest.raises(ValueError):
        L.avgpool_forward(np.zeros((1, 4, 5, 1)), 2, 2)


def test_avgpool_forward_and_backward():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    out = L.avgpool_forward(x, 2, 2)
    assert out[0, :, :, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    d = L.avgpool_backward(np.ones_like(out), 2, 2)
    assert np.all(d == 0.25) and d.shape == x.shape


def test_sigmoid_is_stable_at_extremes():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = L.sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    assert np.all(np.diff(s) >= 0)
