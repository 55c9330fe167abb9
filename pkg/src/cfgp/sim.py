"""Stochastic rollouts: single rounds, ensembles and platoons.

Every rollout samples the follower acceleration from the GP one-step
conditional, then applies

    v[k+1] = v[k] + a[k] * dt
    p[k+1] = p[k] + 0.5 * (v[k] + v[k+1]) * dt

Speeds are floored at zero (the realized acceleration is then
``-v[k] / dt``).  A nonpositive gap marks the step as collided and the gap
fed to the network is floored at 0.01 m; the rollout continues.

The GP conditions on a sliding window of the ``T_ctx`` most recent
residuals: observed ones from the pre-start context first, then the
simulated ones.  Rounds of an ensemble and followers of a platoon run in
lockstep as a batch; each owns a ``numpy.random.Generator`` seeded with
``seed + index``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Trajectory
from .errors import ArgumentError
from .gp import predict_next_batch
from .meanmodel import ModelParams, forward_batch, heads, lstm_step, standardize

MIN_GAP = 0.01


@dataclass
class Rollout:
    """One simulated follower trajectory.

    ``times``, ``v``, ``p``, ``s``, ``dv``, ``lead_p``, ``lead_v`` and
    ``collided`` have ``n + 1`` entries (states at the step boundaries);
    ``a`` and the per-step model outputs (``a_nn``, ``mu``, ``var``, ``ell``,
    ``sigma``) have ``n``.  ``ctx_*`` hold the conditioning context that
    preceded the first simulated step.
    """

    times: np.ndarray
    a: np.ndarray
    v: np.ndarray
    p: np.ndarray
    s: np.ndarray
    dv: np.ndarray
    ell: np.ndarray
    sigma: np.ndarray
    a_nn: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    collided: np.ndarray
    lead_p: np.ndarray
    lead_v: np.ndarray
    seed: int
    pair_id: str
    dt: float
    ctx_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ctx_ell: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ctx_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_steps(self) -> int:
        return len(self.a)

    @property
    def any_collision(self) -> bool:
        return bool(np.any(self.collided))

    @property
    def residuals(self) -> np.ndarray:
        return self.a - self.a_nn


@dataclass
class EnsembleResult:
    rollouts: list
    ground_truth: Trajectory  # frames t_start .. t_end inclusive
    t_start: float

    @property
    def ell(self) -> np.ndarray:
        return np.stack([r.ell for r in self.rollouts])

    @property
    def sigma(self) -> np.ndarray:
        return np.stack([r.sigma for r in self.rollouts])

    def states(self, name: str) -> np.ndarray:
        """(rounds, n) array of ``a`` or the post-update ``v`` / ``s`` values."""
        if name == "a":
            return np.stack([r.a for r in self.rollouts])
        return np.stack([getattr(r, name)[1:] for r in self.rollouts])

    def truth(self, name: str) -> np.ndarray:
        gt = self.ground_truth
        if name == "a":
            return gt.foll_acc[:-1]
        if name == "v":
            return gt.foll_vel[1:]
        if name == "s":
            return gt.gap[1:]
        raise ArgumentError(f"unknown state {name!r}")

    @property
    def collision_rate(self) -> float:
        return float(np.mean([r.any_collision for r in self.rollouts]))


@dataclass(frozen=True)
class PlatoonConfig:
    """Platoon scenario with a trapezoidal lead-speed maneuver.

    The lead holds ``base_speed`` for ``warmup + pre_hold`` seconds, ramps by
    ``amplitude`` over ``ramp`` seconds, holds for ``hold`` seconds and ramps
    back.  A negative amplitude is a braking maneuver.
    """

    n_vehicles: int = 100
    base_speed: float = 20.0
    amplitude: float = 5.0
    ramp: float = 10.0
    hold: float = 20.0
    warmup: float = 30.0
    pre_hold: float = 10.0
    initial_gap: float = 32.0
    vehicle_length: float = 4.5
    horizon: float = 1000.0
    dt: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_vehicles < 2:
            raise ArgumentError(f"a platoon needs at least 2 vehicles, got {self.n_vehicles}")
        if self.base_speed < 0 or self.base_speed + min(self.amplitude, 0.0) < 0:
            raise ArgumentError("lead speeds must stay non-negative")
        if self.initial_gap <= 0 or self.vehicle_length < 0:
            raise ArgumentError("initial_gap must be positive")
        if self.ramp < 0 or self.hold < 0 or self.warmup < 0 or self.pre_hold < 0:
            raise ArgumentError("trapezoid durations must be non-negative")
        if self.horizon <= 0 or self.dt <= 0:
            raise ArgumentError("horizon and dt must be positive")

    def lead_speed(self, t):
        t = np.asarray(t, dtype=float) - self.warmup - self.pre_hold
        if self.ramp > 0:
            up = np.clip(t / self.ramp, 0.0, 1.0)
            down = np.clip((t - self.ramp - self.hold) / self.ramp, 0.0, 1.0)
        else:
            up = (t >= 0).astype(float)
            down = (t >= self.hold).astype(float)
        return self.base_speed + self.amplitude * (up - down)


@dataclass
class PlatoonResult:
    times: np.ndarray
    lead_v: np.ndarray
    lead_p: np.ndarray
    followers: list
    config: PlatoonConfig

    def speeds(self) -> np.ndarray:
        """(n_vehicles, steps + 1) speeds, lead first."""
        return np.vstack([self.lead_v] + [r.v for r in self.followers])

    def positions(self) -> np.ndarray:
        return np.vstack([self.lead_p] + [r.p for r in self.followers])


class _Lanes:
    """Lockstep state of R simulated followers."""

    def __init__(self, params: ModelParams, kind: str, dt: float, T_ctx: int, seeds,
                 v0, p0, lead_length, state=None, ctx=None, use_gp=True,
                 variance_scale=1.0, include_noise=True):
        self.params = params
        self.kind = kind
        self.dt = dt
        self.T_ctx = T_ctx
        self.rngs = [np.random.default_rng(int(s)) for s in seeds]
        R = len(self.rngs)
        self.v = np.broadcast_to(np.asarray(v0, dtype=float), (R,)).copy()
        self.p = np.broadcast_to(np.asarray(p0, dtype=float), (R,)).copy()
        self.lead_length = np.broadcast_to(np.asarray(lead_length, dtype=float), (R,)).copy()
        if state is None:
            self.h = np.zeros((R, params.H))
            self.c = np.zeros((R, params.H))
        else:
            self.h = np.repeat(state[0].reshape(1, -1), R, axis=0)
            self.c = np.repeat(state[1].reshape(1, -1), R, axis=0)
        if ctx is None:
            ctx = (np.zeros(0), np.zeros(0), np.zeros(0))
        self.res, self.ell, self.sig = (np.repeat(np.asarray(x, dtype=float)[None, -T_ctx:] if T_ctx else
                                                  np.zeros((1, 0)), R, axis=0)
                                        for x in ctx)
        self.use_gp = use_gp
        self.variance_scale = variance_scale
        self.include_noise = include_noise
        self.sigma0_sq = params.sigma0 ** 2

    def gap(self, lead_p):
        return lead_p - self.p - self.lead_length

    def step(self, lead_p, lead_v):
        dt = self.dt
        s = self.gap(lead_p)
        collided = s <= 0.0
        s_in = np.where(collided, MIN_GAP, s)
        x = np.column_stack([s_in, lead_v - self.v, self.v])
        self.h, self.c = lstm_step(self.params, standardize(self.params, x), self.h, self.c)
        a_nn, ell, sig = heads(self.params, self.h)
        if self.use_gp:
            m = self.res.shape[1]
            times = np.arange(m + 1) * dt
            mu, var = predict_next_batch(self.kind, times, self.res, a_nn,
                                         np.column_stack([self.ell, ell]),
                                         np.column_stack([self.sig, sig]),
                                         self.sigma0_sq, self.include_noise)
        else:
            mu = a_nn.copy()
            var = sig * sig + (self.sigma0_sq if self.include_noise else 0.0)
        var = var * self.variance_scale
        z = np.array([rng.standard_normal() for rng in self.rngs])
        a = mu + np.sqrt(var) * z
        v_next = self.v + a * dt
        stopped = v_next < 0.0
        if np.any(stopped):
            v_next = np.where(stopped, 0.0, v_next)
            a = np.where(stopped, (v_next - self.v) / dt, a)
        p_next = self.p + 0.5 * (self.v + v_next) * dt
        out = dict(s=s_in, dv=lead_v - self.v, collided=collided, a=a, a_nn=a_nn, mu=mu,
                   var=var, ell=ell, sigma=sig)
        if self.T_ctx:
            self.res = np.column_stack([self.res, a - a_nn])[:, -self.T_ctx:]
            self.ell = np.column_stack([self.ell, ell])[:, -self.T_ctx:]
            self.sig = np.column_stack([self.sig, sig])[:, -self.T_ctx:]
        self.v, self.p = v_next, p_next
        return out


def _step_index(traj: Trajectory, t: float, what: str) -> int:
    k = (t - traj.t_first) / traj.dt
    i = int(round(k))
    if abs(k - i) > 1e-6:
        raise ArgumentError(f"{what}={t} is not on the sampling grid of pair {traj.pair_id}")
    return i


def _run(params, traj: Trajectory, t_start: float, t_end: float, kernel, T_ctx, seeds, **opts):
    kind = kernel or params.kernel
    i0 = _step_index(traj, t_start, "t_start")
    i1 = _step_index(traj, t_end, "t_end")
    n = i1 - i0
    if n < 1:
        raise ArgumentError(f"t_end must exceed t_start (got {t_start}, {t_end})")
    if i0 - T_ctx < 0 or i1 > traj.n - 1:
        raise ArgumentError(
            f"pair {traj.pair_id} covers [{traj.t_first}, {traj.times[-1]:.6g}] s; a rollout over "
            f"[{t_start}, {t_end}] s needs {T_ctx} context steps before t_start")
    x = traj.covariates()
    state, ctx = None, None
    if T_ctx > 0:
        a_h, ell_h, sig_h, cache = forward_batch(params, x[None, i0 - T_ctx:i0])
        state = (cache.hs[0, -1], cache.cs[0, -1])
        ctx = (traj.foll_acc[i0 - T_ctx:i0] - a_h[0], ell_h[0], sig_h[0])
    lanes = _Lanes(params, kind, traj.dt, T_ctx, seeds, traj.foll_vel[i0], traj.foll_pos[i0],
                   traj.lead_length, state=state, ctx=ctx, **opts)
    ctx_arrays = [np.asarray(c) for c in ctx] if ctx else [np.zeros(0)] * 3
    R = len(seeds)
    recs = []
    v_hist = [lanes.v.copy()]
    p_hist = [lanes.p.copy()]
    for k in range(n):
        i = i0 + k
        lp = np.full(R, traj.lead_pos[i])
        lv = np.full(R, traj.lead_vel[i])
        recs.append(lanes.step(lp, lv))
        v_hist.append(lanes.v.copy())
        p_hist.append(lanes.p.copy())
    V = np.stack(v_hist, axis=1)
    P = np.stack(p_hist, axis=1)
    lead_p = traj.lead_pos[i0:i1 + 1]
    lead_v = traj.lead_vel[i0:i1 + 1]
    S_raw = lead_p - P - traj.lead_length
    collided = S_raw <= 0.0
    S = np.where(collided, MIN_GAP, S_raw)
    cols = {key: np.stack([r[key] for r in recs], axis=1)
            for key in ("a", "a_nn", "mu", "var", "ell", "sigma")}
    times = traj.times[i0:i1 + 1]
    rollouts = [
        Rollout(times=times.copy(), a=cols["a"][j], v=V[j], p=P[j], s=S[j], dv=lead_v - V[j],
                ell=cols["ell"][j], sigma=cols["sigma"][j], a_nn=cols["a_nn"][j],
                mu=cols["mu"][j], var=cols["var"][j], collided=collided[j],
                lead_p=lead_p.copy(), lead_v=lead_v.copy(), seed=int(seeds[j]),
                pair_id=traj.pair_id, dt=traj.dt, ctx_residuals=ctx_arrays[0],
                ctx_ell=ctx_arrays[1], ctx_sigma=ctx_arrays[2])
        for j in range(R)
    ]
    return rollouts, traj.slice(i0, i1 + 1)


def simulate_round(params: ModelParams, traj: Trajectory, t_start: float, t_end: float,
                   kernel: Optional[str] = None, T_ctx: int = 50, seed: int = 0,
                   **opts) -> Rollout:
    """One stochastic rollout of the follower over ``[t_start, t_end]``.

    The leader is replayed from ``traj``; the follower starts from the
    recorded state at ``t_start`` after the recurrent state is warmed up on
    the ``T_ctx`` recorded steps before it.  Options: ``use_gp=False``
    samples from the independent prior, ``variance_scale`` multiplies the
    sampling variance (0 gives a deterministic rollout), ``include_noise``
    toggles the ``sigma0^2`` add-back.
    """
    rollouts, _ = _run(params, traj, t_start, t_end, kernel, T_ctx, [seed], **opts)
    return rollouts[0]


def simulate_ensemble(params: ModelParams, traj: Trajectory, t_start: float, horizon: float,
                      rounds: int, kernel: Optional[str] = None, T_ctx: int = 50,
                      seed: int = 0, **opts) -> EnsembleResult:
    """``rounds`` independent rollouts with seeds ``seed, seed + 1, ...``."""
    if rounds < 1:
        raise ArgumentError(f"rounds must be >= 1, got {rounds}")
    n = int(round(horizon / traj.dt))
    t_end = t_start + n * traj.dt
    rollouts, gt = _run(params, traj, t_start, t_end, kernel, T_ctx,
                        [seed + i for i in range(rounds)], **opts)
    return EnsembleResult(rollouts=rollouts, ground_truth=gt, t_start=t_start)


def simulate_platoon(params: ModelParams, cfg: PlatoonConfig, kernel: Optional[str] = None,
                     T_ctx: int = 50, seed: Optional[int] = None, **opts) -> PlatoonResult:
    """Vehicle 0 follows the trapezoid exactly; vehicle k follows vehicle k-1.

    All vehicles start at the base speed with ``initial_gap`` spacing and no
    residual history.  At each step every follower reacts to its
    predecessor's state at that step, so the platoon advances in lockstep.
    """
    kind = kernel or params.kernel
    seed = cfg.seed if seed is None else seed
    dt = cfg.dt
    n = int(round(cfg.horizon / dt))
    times = np.arange(n + 1) * dt
    lead_v = cfg.lead_speed(times)
    lead_p = np.concatenate([[0.0], np.cumsum(0.5 * (lead_v[1:] + lead_v[:-1]) * dt)])
    R = cfg.n_vehicles - 1
    spacing = cfg.initial_gap + cfg.vehicle_length
    p0 = -spacing * np.arange(1, R + 1)
    lanes = _Lanes(params, kind, dt, T_ctx, [seed + j for j in range(R)],
                   np.full(R, cfg.base_speed), p0, cfg.vehicle_length, **opts)
    V = np.empty((R, n + 1))
    P = np.empty((R, n + 1))
    V[:, 0], P[:, 0] = lanes.v, lanes.p
    recs = []
    for k in range(n):
        pred_p = np.concatenate([[lead_p[k]], lanes.p[:-1]])
        pred_v = np.concatenate([[lead_v[k]], lanes.v[:-1]])
        recs.append(lanes.step(pred_p, pred_v))
        V[:, k + 1], P[:, k + 1] = lanes.v, lanes.p
    PP = np.vstack([lead_p, P])
    VV = np.vstack([lead_v, V])
    S_raw = PP[:-1] - PP[1:] - cfg.vehicle_length
    collided = S_raw <= 0.0
    S = np.where(collided, MIN_GAP, S_raw)
    cols = {key: np.stack([r[key] for r in recs], axis=1)
            for key in ("a", "a_nn", "mu", "var", "ell", "sigma")}
    followers = [
        Rollout(times=times, a=cols["a"][j], v=V[j], p=P[j], s=S[j], dv=VV[j] - V[j],
                ell=cols["ell"][j], sigma=cols["sigma"][j], a_nn=cols["a_nn"][j],
                mu=cols["mu"][j], var=cols["var"][j], collided=collided[j],
                lead_p=PP[j], lead_v=VV[j], seed=seed + j, pair_id=f"vehicle{j + 1}", dt=dt)
        for j in range(R)
    ]
    return PlatoonResult(times=times, lead_v=lead_v, lead_p=lead_p, followers=followers, config=cfg)
