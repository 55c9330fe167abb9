import math

import numpy as np
import pytest

import oracles
from conftest import random_params
from cfgp.errors import ArgumentError, FormatError, NumericalError
from cfgp.meanmodel import (
    PARAM_NAMES, backward, backward_batch, forward, forward_batch, heads, init_params,
    inv_softplus, load_params, lstm_step, save_params, softplus, standardize,
)


def test_init_shapes_and_noise():
    p = init_params(H=64, input_dim=3, seed=0)
    assert p["W_x"].shape == (3, 256)
    assert p["W_h"].shape == (64, 256)
    assert p["b"].shape == (256,)
    for h in ("mu", "ell", "sig"):
        assert p[f"{h}_W1"].shape == (64, 64)
        assert p[f"{h}_w2"].shape == (64,)
    assert p.sigma0 == pytest.approx(0.1, abs=1e-10)
    assert set(p.weights) == set(PARAM_NAMES)


def test_init_is_seeded():
    a, b = init_params(8, seed=3), init_params(8, seed=3)
    assert all(np.array_equal(a[k], b[k]) for k in PARAM_NAMES)
    assert not np.array_equal(a["W_h"], init_params(8, seed=4)["W_h"])


def test_softplus_inverse():
    x = np.array([1e-3, 0.1, 1.0, 5.0])
    np.testing.assert_allclose(softplus(inv_softplus(x)), x, rtol=1e-12)


def test_single_step_two_unit_cell_by_hand():
    H = 2
    p = init_params(H=H, input_dim=1, seed=0)
    p.x_mean, p.x_std = np.zeros(1), np.ones(1)
    for k in p.weights:
        p.weights[k] = np.zeros_like(p.weights[k])
    p.weights["W_x"] = np.array([[0.5, -0.5, 1.0, 0.2, 0.3, 0.1, -0.4, 0.8]])
    p.weights["b"] = np.array([0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.1, 0.0])
    p.weights["mu_W1"] = np.eye(2)
    p.weights["mu_w2"] = np.array([1.0, -1.0])
    p.weights["mu_b2"] = np.array(0.25)
    x = 2.0
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    i = [sig(0.5 * x + 0.1), sig(-0.5 * x)]
    g = [math.tanh(0.3 * x), math.tanh(0.1 * x)]
    o = [sig(-0.4 * x + 0.1), sig(0.8 * x)]
    c = [i[0] * g[0], i[1] * g[1]]
    h = [o[0] * math.tanh(c[0]), o[1] * math.tanh(c[1])]
    silu = lambda z: z * sig(z)
    a_expect = silu(h[0]) - silu(h[1]) + 0.25
    out = forward(p, np.array([[x]]))
    assert out.hidden_states[0] == pytest.approx(h, abs=1e-12)
    assert out.a_nn[0] == pytest.approx(a_expect, abs=1e-12)
    assert out.ell_nn[0] == pytest.approx(math.log(2.0), abs=1e-12)


def test_forward_matches_scalar_loop_oracle():
    p = random_params(H=4, seed=2)
    x = np.random.default_rng(0).normal(size=(6, 3))
    out = forward(p, x)
    a, ell, sig = oracles.lstm_heads(p.weights, p.x_mean, p.x_std, x)
    np.testing.assert_allclose(out.a_nn, a, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(out.ell_nn, ell, rtol=1e-12)
    np.testing.assert_allclose(out.sigma_nn, sig, rtol=1e-12)
    assert np.all(out.ell_nn > 0) and np.all(out.sigma_nn > 0)


def test_step_api_matches_batch_forward():
    p = random_params(H=5, seed=1)
    x = np.random.default_rng(1).normal(size=(2, 7, 3))
    a, ell, sig, cache = forward_batch(p, x)
    h = np.zeros((2, 5))
    c = np.zeros((2, 5))
    for t in range(7):
        h, c = lstm_step(p, standardize(p, x[:, t]), h, c)
        a_t, ell_t, sig_t = heads(p, h)
        np.testing.assert_allclose(a_t, a[:, t], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(ell_t, ell[:, t], rtol=1e-12)
        np.testing.assert_allclose(sig_t, sig[:, t], rtol=1e-12)


def test_step_rows_independent_of_batch():
    p = random_params(H=6, seed=4)
    rng = np.random.default_rng(2)
    xs, h, c = rng.normal(size=(9, 3)), rng.normal(size=(9, 6)), rng.normal(size=(9, 6))
    hb, cb = lstm_step(p, xs, h, c)
    h1, c1 = lstm_step(p, xs[3:4], h[3:4], c[3:4])
    assert np.array_equal(hb[3], h1[0]) and np.array_equal(cb[3], c1[0])
    assert all(np.array_equal(u[3], v[0]) for u, v in zip(heads(p, hb), heads(p, h1)))


def test_forward_is_deterministic():
    p = init_params(H=4, seed=9)
    x = np.random.default_rng(0).normal(size=(5, 3))
    a1 = forward(p, x).a_nn
    a2 = forward(p, x).a_nn
    assert np.array_equal(a1, a2)


def test_forward_rejects_bad_shape():
    with pytest.raises(ArgumentError):
        forward_batch(init_params(H=2), np.zeros((1, 4, 2)))


def test_forward_nonfinite_raises_numerical():
    p = init_params(H=2)
    p.weights["W_x"] = np.full_like(p["W_x"], np.nan)
    with pytest.raises(NumericalError, match="step"):
        forward(p, np.zeros((3, 3)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = random_params(H=3, seed=seed)
    x = rng.normal(size=(4, 3))
    w_a, w_l, w_s = rng.normal(size=(3, 4))
    w_0 = rng.normal()

    def loss_of(params):
        o = forward(params, x)
        return float(w_a @ o.a_nn + w_l @ o.ell_nn + w_s @ o.sigma_nn + w_0 * params.sigma0)

    grads = backward(p, x, None, (w_a, w_l, w_s, w_0))
    for name in PARAM_NAMES:
        def f(v, name=name):
            q = p.copy()
            q.weights[name] = np.asarray(v)
            return loss_of(q)
        fd = oracles.central_fd(f, p[name])
        an = grads[name]
        assert np.all(np.abs(fd - an) <= np.maximum(1e-4 * np.abs(an), 1e-8)), name


def test_backward_with_initial_state_and_mask():
    rng = np.random.default_rng(5)
    p = random_params(H=3, seed=5)
    x = rng.normal(size=(2, 4, 3))
    h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    mask = (rng.random((2, 4, 3)) > 0.3) / 0.7
    d = rng.normal(size=(3, 2, 4))

    def loss(params):
        a, ell, sig, _ = forward_batch(params, x, (h0, c0), mask)
        return float(np.sum(d[0] * a + d[1] * ell + d[2] * sig))

    *_, cache = forward_batch(p, x, (h0, c0), mask)
    grads = backward_batch(p, cache, d[0], d[1], d[2])
    for name in ("W_x", "W_h", "b", "sig_W1"):
        def f(v, name=name):
            q = p.copy()
            q.weights[name] = np.asarray(v)
            return loss(q)
        np.testing.assert_allclose(grads[name], oracles.central_fd(f, p[name]), rtol=1e-4, atol=1e-8)


def test_checkpoint_round_trip(tmp_path):
    p = random_params(H=4, seed=3)
    p.kernel = "matern52"
    path = tmp_path / "m.ckpt"
    save_params(p, path)
    q = load_params(path)
    assert q.H == 4 and q.kernel == "matern52"
    assert all(np.array_equal(p[k], q[k]) for k in PARAM_NAMES)
    assert np.array_equal(p.x_mean, q.x_mean) and np.array_equal(p.x_std, q.x_std)
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(forward(p, x).a_nn, forward(q, x).a_nn)


def test_checkpoint_garbage_is_format_error(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_params(path)
