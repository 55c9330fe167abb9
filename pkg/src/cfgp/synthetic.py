"""Synthetic car-following pairs with a known residual process.

The follower is driven by a fixed linear rule

    a = k_gap * (s - s_min - headway * v) + k_rel * dv

and its recorded kinematics are the noiseless integration of that rule.  The
recorded acceleration adds a Gaussian-process residual (SE or Gibbs) plus
white observation noise, so the residual cannot be recovered from the
covariates and the generating kernel is identifiable from the accelerations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Trajectory
from .errors import ArgumentError
from .kernels import Gibbs, NonstationaryParams, SE, StationaryParams, kernel_matrix


@dataclass(frozen=True)
class LinearRule:
    k_gap: float = 0.25
    k_rel: float = 0.7
    headway: float = 1.5
    s_min: float = 2.0

    def __call__(self, s, dv, v):
        return self.k_gap * (s - self.s_min - self.headway * v) + self.k_rel * dv

    def equilibrium_gap(self, v):
        return self.s_min + self.headway * v


@dataclass(frozen=True)
class RegimeScales:
    """Lengthscale and std that switch smoothly with the sign of ``dv``.

    Closing in (``dv < 0``) gives the short, noisy regime.
    """

    ell_closing: float = 0.3
    ell_opening: float = 2.5
    sigma_closing: float = 0.6
    sigma_opening: float = 0.2
    width: float = 0.25

    def __call__(self, dv):
        w = expit(np.asarray(dv) / self.width)
        ell = self.ell_closing + (self.ell_opening - self.ell_closing) * w
        sig = self.sigma_closing + (self.sigma_opening - self.sigma_closing) * w
        return ell, sig


def leader_speed(rng, n, dt, base=(12.0, 28.0), n_modes=3, amp=3.0, periods=(5.0, 20.0)):
    t = np.arange(n) * dt
    v = np.full(n, rng.uniform(*base))
    amps = rng.dirichlet(np.ones(n_modes)) * amp
    for a_k in amps:
        per = rng.uniform(*periods)
        v += a_k * np.sin(2 * np.pi * t / per + rng.uniform(0, 2 * np.pi))
    return np.maximum(v, 0.5)


def integrate_follower(rule: LinearRule, lead_pos, lead_vel, lead_length, dt, v0=None, gap0=None):
    """Noiseless follower kinematics under ``rule`` (midpoint position update)."""
    n = len(lead_pos)
    v = np.empty(n)
    p = np.empty(n)
    a = np.empty(n)
    v[0] = lead_vel[0] if v0 is None else v0
    gap = rule.equilibrium_gap(v[0]) if gap0 is None else gap0
    p[0] = lead_pos[0] - lead_length - gap
    for i in range(n):
        s = lead_pos[i] - p[i] - lead_length
        a[i] = rule(s, lead_vel[i] - v[i], v[i])
        if i + 1 < n:
            v[i + 1] = max(v[i] + a[i] * dt, 0.0)
            a[i] = (v[i + 1] - v[i]) / dt
            p[i + 1] = p[i] + 0.5 * (v[i] + v[i + 1]) * dt
    return p, v, a


def make_pair(rng, pair_id: str, duration: float, dt: float = 0.2, residual: str = "se",
              ell: float = 1.0, sigma: float = 0.5, noise_std: float = 0.05,
              rule: LinearRule = LinearRule(), regimes: RegimeScales = RegimeScales(),
              lead_length: float = 4.5, gap_jitter: float = 0.0, speed_jitter: float = 0.0,
              **speed_kw) -> Trajectory:
    """One synthetic pair; ``residual`` is ``"se"``, ``"gibbs"`` or ``"none"``.

    ``gap_jitter`` and ``speed_jitter`` are standard deviations of the
    follower's initial offset from equilibrium, which excites the transient
    response of the rule.
    """
    n = int(round(duration / dt)) + 1
    lead_vel = leader_speed(rng, n, dt, **speed_kw)
    lead_pos = 100.0 + np.concatenate([[0.0], np.cumsum(0.5 * (lead_vel[1:] + lead_vel[:-1]) * dt)])
    v0 = max(lead_vel[0] + speed_jitter * rng.standard_normal(), 0.0)
    gap0 = max(rule.equilibrium_gap(v0) + gap_jitter * rng.standard_normal(), 3.0)
    foll_pos, foll_vel, a_mean = integrate_follower(rule, lead_pos, lead_vel, lead_length, dt,
                                                    v0=v0, gap0=gap0)
    times = np.arange(n) * dt
    if residual == "se":
        K = kernel_matrix(SE(StationaryParams(ell, sigma)), times)
    elif residual == "gibbs":
        ells, sigs = regimes(lead_vel - foll_vel)
        K = kernel_matrix(Gibbs(NonstationaryParams(ells, sigs)), times)
    elif residual == "none":
        K = np.zeros((n, n))
    else:
        raise ArgumentError(f"unknown residual kind {residual!r}")
    if residual != "none":
        w, U = np.linalg.eigh(K)
        delta = U @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(n))
    else:
        delta = np.zeros(n)
    acc = a_mean + delta + noise_std * rng.standard_normal(n)
    return Trajectory(pair_id=pair_id, dt=dt, lead_pos=lead_pos, lead_vel=lead_vel,
                      foll_pos=foll_pos, foll_vel=foll_vel, foll_acc=acc,
                      lead_length=lead_length)


def make_dataset(n_pairs: int, seed: int = 0, durations=(40.0, 80.0), **kw) -> list[Trajectory]:
    """``n_pairs`` independent pairs with durations drawn uniformly from ``durations``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_pairs):
        out.append(make_pair(rng, f"P{i:04d}", rng.uniform(*durations), **kw))
    return out
