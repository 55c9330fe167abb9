import math

import numpy as np
import pytest

import oracles
from cfgp.errors import ArgumentError, NumericalError
from cfgp.gp import (
    JointStateNoise, block_nll_and_grads, joint_block_nll_and_grads, joint_state_nll, nll,
    predict_next, predict_next_batch,
)
from cfgp.kernels import SE, Gibbs, NonstationaryParams, StationaryParams, WhiteNoise, build_gram
from cfgp.meanmodel import HeadOutputs

KINDS = ["gibbs", "se", "matern52", "white"]


def _heads(a, ell, sig):
    return HeadOutputs(a_nn=np.asarray(a), ell_nn=np.asarray(ell), sigma_nn=np.asarray(sig),
                       hidden_states=None)


def test_scalar_nll_closed_form():
    g = build_gram(np.array([0.0]), WhiteNoise(1.5), noise_var=0.5)
    assert nll([1.0], [0.0], g) == pytest.approx(0.5 * math.log(2.0) + 0.25, abs=1e-12)
    assert nll([1.0], [0.0], g) == pytest.approx(0.59657359, abs=1e-8)


def test_nll_matches_dense_inverse():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        times = np.cumsum(rng.uniform(0.1, 0.4, n))
        spec = Gibbs(NonstationaryParams(rng.uniform(0.2, 2, n), rng.uniform(0.2, 1.5, n)))
        g = build_gram(times, spec, noise_var=0.02)
        y, m = rng.normal(size=n), rng.normal(size=n)
        assert nll(y, m, g) == pytest.approx(oracles.gaussian_nll(y - m, g.total), abs=1e-10)


def test_nll_length_mismatch():
    g = build_gram(np.arange(3.0), SE(StationaryParams(1.0, 1.0)), noise_var=0.1)
    with pytest.raises(ArgumentError):
        nll(np.zeros(2), np.zeros(2), g)


@pytest.mark.parametrize("kind", KINDS)
def test_predict_next_matches_dense_oracle(kind):
    rng = np.random.default_rng(11)
    for _ in range(25):
        T = int(rng.integers(1, 9))
        times = np.arange(T + 1) * 0.2
        ell = rng.uniform(0.2, 2.0, T + 1)
        sig = rng.uniform(0.2, 1.2, T + 1)
        res = rng.normal(size=T)
        a = rng.normal(size=T + 1)
        s0 = 0.05
        got = predict_next(res, times[:T], times[T], _heads(a, ell, sig), kind, s0)
        mu, var = oracles.conditional(oracles.gram(kind, times, ell, sig), res, a[-1], s0)
        assert got.mean == pytest.approx(mu, abs=1e-10)
        assert got.var == pytest.approx(var, abs=1e-10)


def test_predict_next_se_hand_built_T3():
    times = np.array([0.0, 0.2, 0.4, 0.6])
    res = np.array([0.3, -0.1, 0.2])
    ell, sig = np.full(4, 0.7), np.full(4, 0.5)
    K = np.array([[oracles.se(a - b, 0.7, 0.5) for b in times] for a in times])
    mu, var = oracles.conditional(K, res, 0.1, 0.01, include_noise=False)
    got = predict_next(res, times[:3], 0.6, _heads(np.full(4, 0.1), ell, sig), "se", 0.01,
                       include_noise=False)
    assert got.mean == pytest.approx(mu, abs=1e-10)
    assert got.var == pytest.approx(var, abs=1e-10)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_residuals_give_mean_head(kind):
    ell = np.array([0.5, 0.8, 1.1, 0.9])
    sig = np.array([0.3, 0.4, 0.2, 0.5])
    a = np.array([0.0, 0.0, 0.0, 0.37])
    got = predict_next(np.zeros(3), np.arange(3) * 0.2, 0.6, _heads(a, ell, sig), kind, 0.01)
    assert got.mean == 0.37


def test_empty_history_is_prior():
    got = predict_next(np.zeros(0), np.zeros(0), 0.0, _heads([0.2], [0.5], [0.4]), "gibbs", 0.01)
    assert got.mean == 0.2
    assert got.var == pytest.approx(0.16 + 0.01)


def test_posterior_variance_never_exceeds_prior():
    rng = np.random.default_rng(4)
    for _ in range(50):
        T = int(rng.integers(1, 12))
        ell = rng.uniform(0.1, 3, T + 1)
        sig = rng.uniform(0.1, 2, T + 1)
        got = predict_next(rng.normal(size=T), np.arange(T) * 0.2, T * 0.2,
                           _heads(np.zeros(T + 1), ell, sig), "gibbs", 0.01, include_noise=False)
        assert 0.0 <= got.var <= sig[-1] ** 2 + 1e-12


def test_batch_predict_equals_single():
    rng = np.random.default_rng(5)
    R, T = 6, 5
    times = np.arange(T + 1) * 0.2
    res = rng.normal(size=(R, T))
    a = rng.normal(size=R)
    ell = rng.uniform(0.3, 2, (R, T + 1))
    sig = rng.uniform(0.3, 1, (R, T + 1))
    mean, var = predict_next_batch("matern52", times, res, a, ell, sig, 0.02)
    for r in range(R):
        h = _heads(np.r_[np.zeros(T), a[r]], ell[r], sig[r])
        one = predict_next(res[r], times[:T], times[T], h, "matern52", 0.02)
        assert one.mean == pytest.approx(mean[r], abs=1e-12)
        assert one.var == pytest.approx(var[r], abs=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_block_nll_matches_dense_and_fd(kind):
    rng = np.random.default_rng(2)
    n = 6
    times = np.arange(n) * 0.2
    y = rng.normal(size=n)
    a = rng.normal(size=n)
    ell = rng.uniform(0.3, 1.5, n)
    sig = rng.uniform(0.3, 1.0, n)
    s0 = 0.2

    def f(a_, ell_, sig_, s0_):
        K = oracles.gram(kind, times, ell_, sig_)
        return oracles.gaussian_nll(y - a_, K + s0_ ** 2 * np.eye(n))

    loss, d_a, d_ell, d_sig, d_s0 = block_nll_and_grads(kind, times, y, a, ell, sig, s0)
    assert loss[0] == pytest.approx(f(a, ell, sig, s0), abs=1e-10)
    for got, fd in [(d_a[0], oracles.central_fd(lambda v: f(v, ell, sig, s0), a)),
                    (d_ell[0], oracles.central_fd(lambda v: f(a, v, sig, s0), ell)),
                    (d_sig[0], oracles.central_fd(lambda v: f(a, ell, v, s0), sig)),
                    (d_s0, oracles.central_fd(lambda v: f(a, ell, sig, v[0]), [s0]))]:
        np.testing.assert_allclose(got, fd, rtol=1e-4, atol=1e-8)


def test_white_kernel_nll_is_iid_gaussian():
    rng = np.random.default_rng(9)
    n = 50
    y = rng.normal(scale=0.6, size=n)
    sig, s0 = 0.5, 0.1
    loss, *_ = block_nll_and_grads("white", np.arange(n) * 0.2, y, np.zeros(n),
                                   np.ones(n), np.full(n, sig), s0)
    v = sig ** 2 + s0 ** 2
    assert loss[0] == pytest.approx(0.5 * n * math.log(v) + 0.5 * float(y @ y) / v, rel=1e-12)


# ---------------------------------------------------------------- joint state


def _joint_problem(rng, n, kind="gibbs"):
    times = np.arange(n) * 0.2
    ell = rng.uniform(0.3, 2, n)
    sig = rng.uniform(0.2, 1, n)
    spec = Gibbs(NonstationaryParams(ell, sig)) if kind == "gibbs" else SE(StationaryParams(1.0, 0.5))
    g = build_gram(times, spec)
    obs = tuple(rng.normal(size=n) for _ in range(3))
    means = tuple(rng.normal(size=n) for _ in range(3))
    return g, obs, means


def test_joint_nll_matches_dense_oracle():
    rng = np.random.default_rng(21)
    noise = JointStateNoise(0.01, 0.004, 0.002)
    for n in range(1, 9):
        g, obs, means = _joint_problem(rng, n)
        r = np.concatenate([o - m for o, m in zip(obs, means)])
        S = oracles.joint_cov(g.K, 0.01, 0.004, 0.002, 0.2)
        assert joint_state_nll(obs, means, g, noise, 0.2) == pytest.approx(
            oracles.gaussian_nll(r, S, constant=True), abs=1e-10)


def test_joint_nll_single_step_closed_form():
    k, dt = 0.3, 0.2
    noise = JointStateNoise(0.05, 0.02, 0.01)
    g = build_gram(np.array([0.0]), WhiteNoise(k))
    C = np.array([1.0, dt, dt * dt / 2])
    S = k * np.outer(C, C) + np.diag([0.05, 0.02, 0.01])
    r = np.array([0.2, -0.1, 0.05])
    # 3x3 determinant and inverse by cofactors
    det = (S[0, 0] * (S[1, 1] * S[2, 2] - S[1, 2] * S[2, 1])
           - S[0, 1] * (S[1, 0] * S[2, 2] - S[1, 2] * S[2, 0])
           + S[0, 2] * (S[1, 0] * S[2, 1] - S[1, 1] * S[2, 0]))
    adj = np.array([[S[(j + 1) % 3, (i + 1) % 3] * S[(j + 2) % 3, (i + 2) % 3]
                     - S[(j + 1) % 3, (i + 2) % 3] * S[(j + 2) % 3, (i + 1) % 3]
                     for j in range(3)] for i in range(3)])
    quad = float(r @ (adj / det) @ r)
    expect = 0.5 * (3 * math.log(2 * math.pi) + math.log(det) + quad)
    got = joint_state_nll(([0.2], [-0.1], [0.05]), ([0.0], [0.0], [0.0]), g, noise, dt)
    assert got == pytest.approx(expect, rel=1e-14, abs=1e-14)


def test_joint_nll_decouples_without_kernel():
    rng = np.random.default_rng(8)
    n = 6
    g = build_gram(np.arange(n) * 0.2, WhiteNoise(0.0), noise_var=1.0)
    noise = JointStateNoise(0.04, 0.01, 0.09)
    obs = tuple(rng.normal(size=n) for _ in range(3))
    zero = (np.zeros(n),) * 3
    total = sum(sum(0.5 * math.log(2 * math.pi * v) + x * x / (2 * v) for x in o)
                for o, v in zip(obs, (0.04, 0.01, 0.09)))
    assert joint_state_nll(obs, zero, g, noise, 0.2) == pytest.approx(total, abs=1e-10)


def test_joint_nll_rank_one_fails_loudly():
    g = build_gram(np.array([0.0]), WhiteNoise(1.0))
    with pytest.raises(NumericalError):
        joint_state_nll(([0.1], [0.0], [0.0]), ([0.0], [0.0], [0.0]), g,
                        JointStateNoise(1e-30, 0.0, 0.0), 0.2)


def test_joint_noise_validation():
    with pytest.raises(ArgumentError):
        JointStateNoise(0.0, 0.0, 0.0)
    with pytest.raises(ArgumentError):
        JointStateNoise(-1.0, 0.1, 0.1)


@pytest.mark.parametrize("kind", ["gibbs", "se"])
def test_joint_block_grads_match_fd(kind):
    rng = np.random.default_rng(13)
    T, dt = 6, 0.2
    times = np.arange(T) * dt
    a_obs, v_obs, p_obs = rng.normal(size=T), 20 + rng.normal(size=T), np.cumsum(rng.uniform(3, 5, T))
    a = rng.normal(size=T)
    ell = rng.uniform(0.3, 1.5, T)
    sig = rng.uniform(0.3, 1.0, T)
    s0, vv, vp = 0.2, 0.01, 0.02

    def f(a_, ell_, sig_, s0_):
        r = np.concatenate([a_obs[1:] - a_[1:],
                            v_obs[1:] - v_obs[:-1] - dt * a_[1:],
                            p_obs[1:] - p_obs[:-1] - dt * v_obs[:-1] - 0.5 * dt * dt * a_[1:]])
        K = oracles.gram(kind, times[1:], ell_[1:], sig_[1:])
        return oracles.gaussian_nll(r, oracles.joint_cov(K, s0_ ** 2, vv, vp, dt), constant=True)

    loss, d_a, d_ell, d_sig, d_s0 = joint_block_nll_and_grads(
        kind, times, a_obs, v_obs, p_obs, a, ell, sig, s0, vv, vp, dt)
    assert loss[0] == pytest.approx(f(a, ell, sig, s0), abs=1e-10)
    np.testing.assert_allclose(d_a[0], oracles.central_fd(lambda v: f(v, ell, sig, s0), a),
                               rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(d_ell[0], oracles.central_fd(lambda v: f(a, v, sig, s0), ell),
                               rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(d_sig[0], oracles.central_fd(lambda v: f(a, ell, v, s0), sig),
                               rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(d_s0, oracles.central_fd(lambda v: f(a, ell, sig, v[0]), [s0]),
                               rtol=1e-4, atol=1e-8)
