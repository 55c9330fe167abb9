"""Gaussian-process likelihoods and the one-step predictive conditional.

The residual ``targets - means`` over a block of ``n`` steps is modelled as
``N(0, K + sigma0^2 I)``.  The training loss is the negative log-likelihood
without the ``n log(2 pi) / 2`` constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ArgumentError, NumericalError
from .kernels import GramMatrix, batch_cholesky, head_gram, head_gram_grads

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: float
    var: float


@dataclass(frozen=True)
class JointStateNoise:
    """Observation-noise variances for acceleration, speed and position."""

    var_a: float
    var_v: float
    var_p: float

    def __post_init__(self):
        v = (self.var_a, self.var_v, self.var_p)
        if any(not np.isfinite(x) or x < 0 for x in v) or not any(v):
            raise ArgumentError(f"noise variances must be >= 0 and not all zero, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.var_a, self.var_v, self.var_p])


def kinematic_loading(dt: float) -> np.ndarray:
    """Loading vector ``[1, dt, dt^2 / 2]`` of the residual onto (a, v, p)."""
    return np.array([1.0, dt, 0.5 * dt * dt])


# --------------------------------------------------------------------------
# acceleration likelihood
# --------------------------------------------------------------------------

def nll(targets, means, gram: GramMatrix) -> float:
    """``0.5 log|K + s0^2 I| + 0.5 r' (K + s0^2 I)^-1 r`` via the stored factor."""
    r = np.asarray(targets, dtype=float) - np.asarray(means, dtype=float)
    if r.shape != (gram.n,):
        raise ArgumentError(f"residual length {r.shape} does not match Gram size {gram.n}")
    z = solve_triangular(gram.chol, r, lower=True)
    return 0.5 * gram.logdet() + 0.5 * float(z @ z)


def _tri_inverse(L):
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    return np.linalg.solve(L, eye)


def block_nll_and_grads(kind: str, times, targets, a_nn, ell_nn, sigma_nn, sigma0: float):
    """Batched NLL over (B, n) blocks with gradients w.r.t. every head output.

    Returns ``(loss (B,), d_a, d_ell, d_sigma, d_sigma0 (B,))``.  Stationary
    kernels use block means of ``ell_nn`` and ``sigma_nn``; the chain rule
    passes through that mean.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    a_nn = np.atleast_2d(a_nn)
    ell_nn = np.atleast_2d(ell_nn)
    sigma_nn = np.atleast_2d(sigma_nn)
    B, n = targets.shape
    if a_nn.shape != (B, n) or ell_nn.shape != (B, n) or sigma_nn.shape != (B, n):
        raise ArgumentError("head outputs and targets must share shape (B, n)")
    K = head_gram(kind, times, ell_nn, sigma_nn)
    Sigma = K + sigma0 ** 2 * np.eye(n)
    L, _ = batch_cholesky(Sigma)
    Linv = _tri_inverse(L)
    Sinv = np.swapaxes(Linv, -1, -2) @ Linv
    r = targets - a_nn
    alpha = np.einsum("bij,bj->bi", Sinv, r)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    loss = 0.5 * logdet + 0.5 * np.einsum("bi,bi->b", r, alpha)
    G = 0.5 * (Sinv - alpha[:, :, None] * alpha[:, None, :])
    d_ell, d_sig = head_gram_grads(kind, times, ell_nn, sigma_nn, G)
    d_s0 = 2.0 * sigma0 * np.trace(G, axis1=-2, axis2=-1)
    return loss, -alpha, d_ell, d_sig, d_s0


def nll_gradient_wrt_heads(targets, head_outputs, times, kind: str, sigma0: float | None = None):
    """Gradients of the block NLL w.r.t. ``(a_nn, ell_nn, sigma_nn, sigma0)``."""
    s0 = head_outputs.sigma0 if sigma0 is None else sigma0
    _, d_a, d_ell, d_sig, d_s0 = block_nll_and_grads(
        kind, times, targets, head_outputs.a_nn, head_outputs.ell_nn,
        head_outputs.sigma_nn, s0)
    return d_a[0], d_ell[0], d_sig[0], float(d_s0[0])


# --------------------------------------------------------------------------
# predictive conditional
# --------------------------------------------------------------------------

def predict_next_batch(kind: str, times, residuals, a_next, ell, sigma, sigma0_sq: float,
                       include_noise: bool = True):
    """Vectorised one-step conditional over R independent histories.

    ``times`` holds the T history times followed by the next time;
    ``residuals`` is (R, T); ``ell`` and ``sigma`` are (R, T+1) per-step head
    outputs (history then next); ``a_next`` is (R,).  Returns ``(mean, var)``.
    """
    residuals = np.asarray(residuals, dtype=float)
    R, T = residuals.shape
    times = np.asarray(times, dtype=float)
    if times.shape[-1] != T + 1 or ell.shape != (R, T + 1) or sigma.shape != (R, T + 1):
        raise ArgumentError("predict_next expects T history steps plus the next step")
    Kfull = head_gram(kind, times, ell, sigma)
    k_ss = Kfull[:, T, T]
    noise = sigma0_sq if include_noise else 0.0
    if T == 0:
        return np.asarray(a_next, dtype=float).copy(), k_ss + noise
    Kh = Kfull[:, :T, :T] + sigma0_sq * np.eye(T)
    L, _ = batch_cholesky(Kh)
    rhs = np.concatenate([Kfull[:, :T, T:], residuals[:, :, None]], axis=-1)
    sol = np.linalg.solve(L, rhs)
    v, u = sol[:, :, 0], sol[:, :, 1]
    mean = np.asarray(a_next, dtype=float) + np.einsum("rt,rt->r", v, u)
    var = k_ss - np.einsum("rt,rt->r", v, v)
    var = np.where(var < 0.0, 0.0, var)
    return mean, var + noise


def predict_next(history_residuals, history_times, next_time, head_outputs, kind: str,
                 sigma0_sq: float, include_noise: bool = True) -> PredictiveGaussian:
    """Conditional law of the next acceleration given past residuals.

    ``head_outputs`` covers the T history steps and the next step (length
    T + 1); only its last mean entry is used, the history residuals already
    carry the history means.  With ``include_noise`` the observation noise
    ``sigma0^2`` is added to the posterior variance, which is the law a
    realized acceleration is drawn from.
    """
    r = np.asarray(history_residuals, dtype=float)
    times = np.append(np.asarray(history_times, dtype=float), float(next_time))
    ell = np.asarray(head_outputs.ell_nn, dtype=float)
    sig = np.asarray(head_outputs.sigma_nn, dtype=float)
    if len(ell) != len(r) + 1:
        raise ArgumentError(f"head outputs must cover {len(r) + 1} steps, got {len(ell)}")
    mean, var = predict_next_batch(kind, times, r[None], np.asarray(head_outputs.a_nn)[-1:],
                                   ell[None], sig[None], sigma0_sq, include_noise)
    return PredictiveGaussian(float(mean[0]), float(var[0]))


# --------------------------------------------------------------------------
# joint likelihood over acceleration, speed and position
# --------------------------------------------------------------------------

def joint_covariance(K, noise: JointStateNoise, dt: float) -> np.ndarray:
    """``C C' (x) K + diag(var_a, var_v, var_p) (x) I`` in (a, v, p) block order."""
    C = kinematic_loading(dt)
    n = K.shape[-1]
    return np.kron(np.outer(C, C), K) + np.kron(np.diag(noise.as_array()), np.eye(n))


def _strict_cholesky(S):
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalError("joint covariance is not positive definite") from None
    # a pivot that lost all but ~1e-12 of its diagonal signals rank deficiency
    ratio = np.diagonal(L, axis1=-2, axis2=-1) ** 2 / np.diagonal(S, axis1=-2, axis2=-1)
    if np.any(ratio <= 1e-12):
        raise NumericalError("joint covariance is numerically singular "
                             f"(min pivot ratio {ratio.min():.3g})")
    return L


def joint_state_nll(obs, means, gram: GramMatrix, noise: JointStateNoise, dt: float) -> float:
    """Full Gaussian NLL of stacked (a, v, p) residuals, constant included.

    The covariance is dense 3n x 3n; no jitter is added, the observation
    noise plays that role.  A singular covariance raises
    :class:`~cfgp.errors.NumericalError`.
    """
    a, v, p = (np.asarray(x, dtype=float) for x in obs)
    a_m, v_m, p_m = (np.asarray(x, dtype=float) for x in means)
    n = gram.n
    if not all(x.shape == (n,) for x in (a, v, p, a_m, v_m, p_m)):
        raise ArgumentError(f"all state series must have length {n}")
    r = np.concatenate([a - a_m, v - v_m, p - p_m])
    S = joint_covariance(gram.K, noise, dt)
    L = _strict_cholesky(S)
    z = solve_triangular(L, r, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return 0.5 * (3 * n * _LOG2PI + logdet + float(z @ z))


def joint_block_nll_and_grads(kind: str, times, a_obs, v_obs, p_obs, a_nn, ell_nn, sigma_nn,
                              sigma0: float, var_v: float, var_p: float, dt: float):
    """Batched joint objective for training windows of T steps.

    Step 0 of each window anchors the kinematics: for steps 1..T-1 the speed
    and position means are the one-step updates from the previous observed
    state driven by ``a_nn``.  The acceleration noise variance is
    ``sigma0^2``.  Returns ``(loss, d_a, d_ell, d_sigma, d_sigma0)`` with
    zero gradients at step 0; the loss includes the ``3n log(2 pi) / 2``
    constant.
    """
    a_obs, v_obs, p_obs = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (a_obs, v_obs, p_obs))
    a_nn, ell_nn, sigma_nn = (np.atleast_2d(x) for x in (a_nn, ell_nn, sigma_nn))
    B, T = a_obs.shape
    n = T - 1
    C = kinematic_loading(dt)
    am = a_nn[:, 1:]
    r = np.concatenate([
        a_obs[:, 1:] - am,
        v_obs[:, 1:] - v_obs[:, :-1] - dt * am,
        p_obs[:, 1:] - p_obs[:, :-1] - dt * v_obs[:, :-1] - 0.5 * dt * dt * am,
    ], axis=1)
    tt = np.asarray(times, dtype=float)[..., 1:]
    K = head_gram(kind, tt, ell_nn[:, 1:], sigma_nn[:, 1:])
    noise = np.array([sigma0 ** 2, var_v, var_p])
    S = np.kron(np.outer(C, C), K) + np.kron(np.diag(noise), np.eye(n))
    L = _strict_cholesky(S)
    Linv = _tri_inverse(L)
    Sinv = np.swapaxes(Linv, -1, -2) @ Linv
    alpha = np.einsum("bij,bj->bi", Sinv, r)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    loss = 0.5 * (3 * n * _LOG2PI + logdet + np.einsum("bi,bi->b", r, alpha))
    G = 0.5 * (Sinv - alpha[:, :, None] * alpha[:, None, :])
    Gb = G.reshape(B, 3, n, 3, n)
    GK = np.einsum("c,d,bcidj->bij", C, C, Gb)
    d_ell_t, d_sig_t = head_gram_grads(kind, tt, ell_nn[:, 1:], sigma_nn[:, 1:], GK)
    al = alpha.reshape(B, 3, n)
    d_a = np.zeros((B, T))
    d_a[:, 1:] = -np.einsum("c,bci->bi", C, al)
    d_ell = np.zeros((B, T))
    d_ell[:, 1:] = d_ell_t
    d_sig = np.zeros((B, T))
    d_sig[:, 1:] = d_sig_t
    d_s0 = 2.0 * sigma0 * np.trace(Gb[:, 0, :, 0, :], axis1=-2, axis2=-1)
    return loss, d_a, d_ell, d_sig, d_s0
