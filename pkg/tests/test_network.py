import numpy as np
import pytest

from oracle_utils import oracle_mlp
from tcode.network import Mlp, MlpSpec, sigmoid, trunc_exp


def make(spec, seed=3, dtype=np.float64, zero_last=False):
    return Mlp(spec, np.random.default_rng(seed), dtype=dtype, zero_last_layer=zero_last)


def test_zero_params_give_zero_output(rng):
    m = make(MlpSpec(5, 3, 2, 8))
    for w in m.weights:
        w[:] = 0
    out, _ = m.forward(rng.random((7, 5)))
    assert np.all(out == 0)


def test_identity_single_layer():
    m = make(MlpSpec(4, 4, 0, 1))
    m.weights[0][:] = np.eye(4)
    m.biases[0][:] = 0
    x = np.random.default_rng(0).random((6, 4))
    out, _ = m.forward(x)
    np.testing.assert_allclose(out, x)


@pytest.mark.parametrize("act", ["none", "sigmoid", "truncexp"])
def test_forward_matches_straight_loop_oracle(act, rng):
    m = make(MlpSpec(6, 4, 2, 9, output_activation=act), seed=11)
    x = rng.standard_normal((5, 6))
    out, _ = m.forward(x)
    want = oracle_mlp(x, m.weights, m.biases, "relu", act)
    np.testing.assert_allclose(out, want, rtol=1e-6, atol=1e-12)


def test_forward_rejects_bad_input(rng):
    m = make(MlpSpec(3, 2, 1, 4))
    with pytest.raises(ValueError):
        m.forward(np.array([[1.0, np.inf, 0.0]]))
    with pytest.raises(ValueError):
        m.forward(rng.random((2, 5)))


def test_batch_invariance(rng):
    m = make(MlpSpec(5, 3, 2, 8, output_activation="sigmoid"))
    x = rng.standard_normal((10, 5))
    full, _ = m.forward(x)
    rows = np.concatenate([m.forward(x[i : i + 1])[0] for i in range(10)])
    np.testing.assert_allclose(full, rows, rtol=1e-12)


def test_truncexp_clamps():
    x = np.array([[-20.0, 0.0, 20.0]])
    y = trunc_exp(x)
    np.testing.assert_allclose(y[0], [np.exp(-15), 1.0, np.exp(15)])


def test_sigmoid_stable_extremes():
    y = sigmoid(np.array([-800.0, 800.0]))
    assert y[0] == 0.0 and y[1] == 1.0 and np.isfinite(y).all()


def test_backward_zero_upstream(rng):
    m = make(MlpSpec(4, 3, 2, 6))
    out, tape = m.forward(rng.standard_normal((5, 4)))
    d_in = m.backward(tape, np.zeros_like(out))
    assert np.all(d_in == 0)
    assert all(np.all(g == 0) for g in m.grad_w + m.grad_b)


def test_backward_linear_net_closed_form(rng):
    m = make(MlpSpec(4, 3, 0, 1))
    x = rng.standard_normal((6, 4))
    _, tape = m.forward(x)
    up = rng.standard_normal((6, 3))
    d_in = m.backward(tape, up)
    np.testing.assert_allclose(d_in, up @ m.weights[0].T, rtol=1e-12)
    np.testing.assert_allclose(m.grad_w[0], x.T @ up, rtol=1e-12)
    np.testing.assert_allclose(m.grad_b[0], up.sum(axis=0), rtol=1e-12)


@pytest.mark.parametrize("act", ["none", "sigmoid", "truncexp"])
def test_backward_matches_finite_differences(act):
    rng = np.random.default_rng(5)
    m = make(MlpSpec(5, 3, 2, 7, output_activation=act), seed=8)
    x = rng.standard_normal((4, 5)) * 0.7
    up = rng.standard_normal((4, 3))

    def loss():
        out, _ = m.forward(x)
        return float((out * up).sum())

    _, tape = m.forward(x)
    d_in = m.backward(tape, up)
    h = 1e-6
    # parameter grads
    for li in range(m.n_layers):
        w = m.weights[li]
        for _ in range(6):
            i = rng.integers(0, w.shape[0])
            j = rng.integers(0, w.shape[1])
            orig = w[i, j]
            w[i, j] = orig + h
            hi = loss()
            w[i, j] = orig - h
            lo = loss()
            w[i, j] = orig
            fd = (hi - lo) / (2 * h)
            an = m.grad_w[li][i, j]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-6
        b = m.biases[li]
        j = int(rng.integers(0, b.shape[0]))
        orig = b[j]
        b[j] = orig + h
        hi = loss()
        b[j] = orig - h
        lo = loss()
        b[j] = orig
        fd = (hi - lo) / (2 * h)
        assert abs(fd - m.grad_b[li][j]) / max(abs(fd), 1e-8) < 1e-6
    # input grads
    for _ in range(8):
        i = int(rng.integers(0, x.shape[0]))
        j = int(rng.integers(0, x.shape[1]))
        orig = x[i, j]
        x[i, j] = orig + h
        hi = loss()
        x[i, j] = orig - h
        lo = loss()
        x[i, j] = orig
        fd = (hi - lo) / (2 * h)
        assert abs(fd - d_in[i, j]) / max(abs(fd), abs(d_in[i, j]), 1e-8) < 1e-6


def test_grad_accumulation_and_zero(rng):
    m = make(MlpSpec(3, 2, 1, 4))
    x = rng.standard_normal((5, 3))
    _, tape = m.forward(x)
    up = rng.standard_normal((5, 2))
    m.backward(tape, up)
    g1 = [g.copy() for g in m.grad_w]
    m.backward(tape, up)
    for a, b in zip(m.grad_w, g1):
        np.testing.assert_allclose(a, 2 * b, rtol=1e-12)
    m.zero_grad()
    assert all(np.all(g == 0) for g in m.grad_w + m.grad_b)


def test_zero_last_layer_init():
    m = make(MlpSpec(5, 3, 2, 8), zero_last=True)
    assert np.all(m.weights[-1] == 0)
    out, _ = m.forward(np.random.default_rng(1).standard_normal((4, 5)))
    assert np.all(out == 0)


def test_param_count():
    spec = MlpSpec(72, 49, 2, 64)
    assert spec.param_count() == 72 * 64 + 64 + 64 * 64 + 64 + 64 * 49 + 49
