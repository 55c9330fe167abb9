"""Covariance functions for the Gaussian-process residual.

Four covariance structures share one code path: squared exponential,
Matérn(5/2), the nonstationary Gibbs kernel and white noise.  Times are in
seconds and are never rescaled.

Two layers live here:

* scalar/pointwise kernels (:func:`se_kernel`, :func:`matern52_kernel`,
  :func:`gibbs_kernel`) and :func:`build_gram`, which returns a factorized
  :class:`GramMatrix`;
* head-driven batched helpers (:func:`head_gram`, :func:`head_gram_grads`)
  used by training and simulation, where lengthscales and standard
  deviations come per step from the recurrent network.  Stationary kernels
  use the arithmetic mean of those per-step values over the block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import cho_solve

from .errors import ArgumentError, NumericalError

KERNELS = ("gibbs", "matern52", "se", "white")
JITTER_LEVELS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)
_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class StationaryParams:
    lengthscale: float
    marginal_std: float

    def __post_init__(self):
        for name in ("lengthscale", "marginal_std"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ArgumentError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class NonstationaryParams:
    lengthscales: np.ndarray
    marginal_stds: np.ndarray

    def __post_init__(self):
        ell = np.asarray(self.lengthscales, dtype=float)
        sig = np.asarray(self.marginal_stds, dtype=float)
        if ell.shape != sig.shape or ell.ndim != 1:
            raise ArgumentError("lengthscales and marginal_stds must be 1-D arrays of "
                                "equal length")
        if not (np.all(np.isfinite(ell)) and np.all(ell > 0)):
            raise ArgumentError("lengthscales must be positive and finite")
        if not (np.all(np.isfinite(sig)) and np.all(sig > 0)):
            raise ArgumentError("marginal_stds must be positive and finite")
        object.__setattr__(self, "lengthscales", ell)
        object.__setattr__(self, "marginal_stds", sig)


@dataclass(frozen=True)
class SE:
    params: StationaryParams


@dataclass(frozen=True)
class Matern52:
    params: StationaryParams


@dataclass(frozen=True)
class Gibbs:
    params: NonstationaryParams


@dataclass(frozen=True)
class WhiteNoise:
    variance: float

    def __post_init__(self):
        if not (np.isfinite(self.variance) and self.variance >= 0):
            raise ArgumentError(f"white-noise variance must be >= 0, got {self.variance}")


KernelSpec = Union[SE, Matern52, Gibbs, WhiteNoise]


# --------------------------------------------------------------------------
# pointwise kernels
# --------------------------------------------------------------------------

def _se_unit(d, ell):
    return np.exp(-(d * d) / (2.0 * ell * ell))


def _matern52_unit(d, ell):
    r = _SQRT5 * np.abs(d) / ell
    return (1.0 + r + r * r / 3.0) * np.exp(-r)


def se_kernel(t, t2, params: StationaryParams):
    """``sigma^2 * exp(-d^2 / (2 ell^2))`` with ``d = |t - t2|``."""
    d = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    return params.marginal_std ** 2 * _se_unit(d, params.lengthscale)


def matern52_kernel(t, t2, params: StationaryParams):
    d = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    return params.marginal_std ** 2 * _matern52_unit(d, params.lengthscale)


def gibbs_kernel(t, t2, ell_t, ell_t2, sigma_t, sigma_t2):
    """Nonstationary Gibbs covariance between two time points.

    ``sigma_t sigma_t2 sqrt(2 ell_t ell_t2 / S) exp(-(t - t2)^2 / S)`` where
    ``S = ell_t^2 + ell_t2^2``.  With equal scales this is exactly the SE
    kernel.
    """
    d = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    s = ell_t * ell_t + ell_t2 * ell_t2
    return (sigma_t * sigma_t2) * (np.sqrt(2.0 * ell_t * ell_t2 / s) * np.exp(-(d * d) / s))


# --------------------------------------------------------------------------
# Gram construction
# --------------------------------------------------------------------------

def _sq_dists(times):
    d = times[..., :, None] - times[..., None, :]
    return d * d


def _gibbs_unit_matrix(times, ell):
    s = ell[..., :, None] ** 2 + ell[..., None, :] ** 2
    return np.sqrt(2.0 * ell[..., :, None] * ell[..., None, :] / s) * np.exp(-_sq_dists(times) / s)


def _mirror_upper(K):
    return np.triu(K) + np.swapaxes(np.triu(K, 1), -1, -2)


def _unit_kernel_matrix(kind, times, ell):
    """Unit-variance stationary correlation matrix; ``ell`` has batch shape."""
    d = np.abs(times[..., :, None] - times[..., None, :])
    ell = np.asarray(ell, dtype=float)[..., None, None]
    if kind == "se":
        return _se_unit(d, ell)
    if kind == "matern52":
        return _matern52_unit(d, ell)
    raise ArgumentError(f"not a stationary kernel: {kind!r}")


def kernel_matrix(spec: KernelSpec, times) -> np.ndarray:
    """Dense covariance matrix K (no noise) for ``spec`` on ``times``."""
    times = np.asarray(times, dtype=float)
    n = len(times)
    if isinstance(spec, (SE, Matern52)):
        kind = "se" if isinstance(spec, SE) else "matern52"
        K = spec.params.marginal_std ** 2 * _unit_kernel_matrix(kind, times, spec.params.lengthscale)
    elif isinstance(spec, Gibbs):
        ell, sig = spec.params.lengthscales, spec.params.marginal_stds
        if len(ell) != n:
            raise ArgumentError(f"Gibbs parameters have length {len(ell)}, times have {n}")
        K = np.outer(sig, sig) * _gibbs_unit_matrix(times, ell)
    elif isinstance(spec, WhiteNoise):
        K = spec.variance * np.eye(n)
    else:
        raise ArgumentError(f"unknown kernel spec {spec!r}")
    return _mirror_upper(K)


def cholesky_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A`` with escalating diagonal jitter.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute variance added.
    """
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    eye = np.eye(A.shape[-1])
    last = 0.0
    for level in JITTER_LEVELS:
        last = level * scale
        try:
            return np.linalg.cholesky(A + last * eye if last else A), last
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"Cholesky failed after jitter {last:.3g}")


def batch_cholesky(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`cholesky_jitter` over the leading axes of ``A``."""
    try:
        L = np.linalg.cholesky(A)
        return L, np.zeros(A.shape[:-2])
    except np.linalg.LinAlgError:
        pass
    flat = A.reshape((-1,) + A.shape[-2:])
    Ls = np.empty_like(flat)
    jit = np.empty(len(flat))
    for i, a in enumerate(flat):
        Ls[i], jit[i] = cholesky_jitter(a)
    return Ls.reshape(A.shape), jit.reshape(A.shape[:-2])


@dataclass(frozen=True)
class GramMatrix:
    """Covariance block K with the Cholesky factor of ``K + noise_var I + jitter I``."""

    K: np.ndarray
    noise_var: float
    chol: np.ndarray
    jitter: float

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def total(self) -> np.ndarray:
        return self.K + (self.noise_var + self.jitter) * np.eye(self.n)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.chol, True), b)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def build_gram(times, spec: KernelSpec, noise_var: float = 0.0) -> GramMatrix:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise ArgumentError("times must be a 1-D array")
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        raise ArgumentError("times must be strictly increasing")
    if not (np.isfinite(noise_var) and noise_var >= 0):
        raise ArgumentError(f"noise_var must be >= 0, got {noise_var}")
    K = kernel_matrix(spec, times)
    L, jitter = cholesky_jitter(K + noise_var * np.eye(len(times)))
    return GramMatrix(K=K, noise_var=float(noise_var), chol=L, jitter=jitter)


def spec_from_heads(kind: str, ell, sigma) -> KernelSpec:
    """Kernel spec for one block of per-step head outputs."""
    ell = np.asarray(ell, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if kind == "gibbs":
        return Gibbs(NonstationaryParams(ell, sigma))
    if kind == "se":
        return SE(StationaryParams(float(np.mean(ell)), float(np.mean(sigma))))
    if kind == "matern52":
        return Matern52(StationaryParams(float(np.mean(ell)), float(np.mean(sigma))))
    if kind == "white":
        return WhiteNoise(float(np.mean(sigma)) ** 2)
    raise ArgumentError(f"unknown kernel {kind!r}; expected one of {KERNELS}")


# --------------------------------------------------------------------------
# batched, head-driven construction and its derivatives
# --------------------------------------------------------------------------

def head_gram(kind: str, times, ell, sigma) -> np.ndarray:
    """K for per-step head outputs ``ell``, ``sigma`` of shape (..., n).

    ``times`` is (n,) or broadcastable to (..., n).
    """
    times = np.asarray(times, dtype=float)
    ell = np.asarray(ell, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = ell.shape[-1]
    if kind == "gibbs":
        K = (sigma[..., :, None] * sigma[..., None, :]) * _gibbs_unit_matrix(times, ell)
        return _mirror_upper(K)
    s_bar = sigma.mean(axis=-1)
    if kind == "white":
        return (s_bar ** 2)[..., None, None] * np.eye(n)
    if kind in ("se", "matern52"):
        K = (s_bar ** 2)[..., None, None] * _unit_kernel_matrix(kind, times, ell.mean(axis=-1))
        return _mirror_upper(K)
    raise ArgumentError(f"unknown kernel {kind!r}; expected one of {KERNELS}")


def head_gram_grads(kind: str, times, ell, sigma, G):
    """Chain ``G = dL/dK`` (symmetric, (..., n, n)) into per-step head gradients.

    Returns ``(dL/d ell, dL/d sigma)``, each of shape (..., n).
    """
    times = np.asarray(times, dtype=float)
    ell = np.asarray(ell, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = ell.shape[-1]
    if kind == "gibbs":
        L2 = ell * ell
        S = L2[..., :, None] + L2[..., None, :]
        D2 = _sq_dists(times)
        Kstar = np.sqrt(2.0 * ell[..., :, None] * ell[..., None, :] / S) * np.exp(-D2 / S)
        K = (sigma[..., :, None] * sigma[..., None, :]) * Kstar
        GK = G * K
        # d log K_ij / d ell_i for the row slot; the column slot is symmetric
        dlog = 0.5 * (1.0 / ell[..., :, None] - 2.0 * ell[..., :, None] / S) \
            + 2.0 * D2 * ell[..., :, None] / (S * S)
        d_ell = 2.0 * np.sum(GK * dlog, axis=-1)
        d_sig = 2.0 * np.sum(G * Kstar * sigma[..., None, :], axis=-1)
        return d_ell, d_sig

    s_bar = sigma.mean(axis=-1)
    if kind == "white":
        tr = np.trace(G, axis1=-2, axis2=-1)
        d_sbar = 2.0 * s_bar * tr
        return np.zeros_like(ell), np.broadcast_to((d_sbar / n)[..., None], sigma.shape).copy()

    l_bar = ell.mean(axis=-1)
    d = np.abs(times[..., :, None] - times[..., None, :])
    lb = l_bar[..., None, None]
    if kind == "se":
        unit = _se_unit(d, lb)
        dunit_dl = unit * d * d / lb ** 3
    elif kind == "matern52":
        r = _SQRT5 * d / lb
        e = np.exp(-r)
        unit = (1.0 + r + r * r / 3.0) * e
        dunit_dl = r * r * (1.0 + r) * e / (3.0 * lb)
    else:
        raise ArgumentError(f"unknown kernel {kind!r}; expected one of {KERNELS}")
    d_lbar = (s_bar ** 2) * np.sum(G * dunit_dl, axis=(-2, -1))
    d_sbar = 2.0 * s_bar * np.sum(G * unit, axis=(-2, -1))
    d_ell = np.broadcast_to((d_lbar / n)[..., None], ell.shape).copy()
    d_sig = np.broadcast_to((d_sbar / n)[..., None], sigma.shape).copy()
    return d_ell, d_sig
