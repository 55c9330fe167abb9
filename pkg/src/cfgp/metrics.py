"""Ensemble scores: RMSE, CRPS and energy score, plus the test-set protocol."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist

from .data import DatasetSplit, Trajectory
from .errors import ArgumentError
from .meanmodel import ModelParams
from .sim import simulate_ensemble

STATES = ("a", "v", "s")
METRICS = ("RMSE", "CRPS", "ES")
SCORE_COLUMNS = ("model", "kernel", "state", "metric", "mean", "count")
RAW_COLUMNS = ("model", "kernel", "pair_id", "t_start", "state", "metric", "value",
               "collision_rate")


def rmse(truth, pred) -> float:
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape or truth.ndim != 1 or truth.size == 0:
        raise ArgumentError(f"rmse needs two equal-length non-empty series, got shapes "
                            f"{truth.shape} and {pred.shape}")
    return float(np.sqrt(np.mean((truth - pred) ** 2)))


def crps_ensemble(samples, obs) -> np.ndarray:
    """Column-wise empirical CRPS of an (M, n) ensemble against ``obs`` (n,).

    Uses the sorted-gap form of the pair sum,
    ``sum_ij |X_i - X_j| = 2 sum_k k (M - k) (X_(k+1) - X_(k))``, whose terms
    are all nonnegative and vanish exactly for tied members.
    """
    X = np.asarray(samples, dtype=float)
    y = np.asarray(obs, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or y.shape != X.shape[1:]:
        raise ArgumentError(f"crps needs an (M, n) ensemble with M >= 1 and n observations, "
                            f"got {X.shape} and {y.shape}")
    M = X.shape[0]
    gaps = np.diff(np.sort(X, axis=0), axis=0)
    k = np.arange(1, M, dtype=float)[:, None]
    spread = (k * (M - k) * gaps).sum(axis=0) / (M * M)
    return np.maximum(np.abs(X - y).mean(axis=0) - spread, 0.0)


def crps_samples(samples, obs) -> float:
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ArgumentError("crps needs at least one sample")
    return float(crps_ensemble(samples[:, None], np.array([float(obs)]))[0])


def energy_score(samples, obs) -> float:
    """Energy score of an (M, d) ensemble against the d-vector ``obs``."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(obs, dtype=float).ravel()
    if X.shape[0] < 2:
        raise ArgumentError(f"energy score needs at least 2 samples, got {X.shape[0]}")
    if X.shape[1] != y.size or y.size == 0:
        raise ArgumentError(f"sample dimension {X.shape[1]} does not match observation "
                            f"dimension {y.size}")
    M = X.shape[0]
    fit = np.linalg.norm(X - y, axis=1).mean()
    spread = pdist(X).sum() / (M * M)
    return float(max(fit - spread, 0.0))


@dataclass(frozen=True)
class EvalProtocol:
    horizon: float = 10.0
    start_stride: float = 5.0
    rounds: int = 200
    T_ctx: int = 50
    seed: int = 0
    point: str = "mean"  # ensemble summary for RMSE: "mean" or "median"

    def __post_init__(self):
        if self.horizon <= 0 or self.start_stride <= 0:
            raise ArgumentError("horizon and start_stride must be positive")
        if self.rounds < 2:
            raise ArgumentError(f"rounds must be >= 2 for the energy score, got {self.rounds}")
        if self.T_ctx < 0:
            raise ArgumentError(f"T_ctx must be non-negative, got {self.T_ctx}")
        if self.point not in ("mean", "median"):
            raise ArgumentError(f"point must be 'mean' or 'median', got {self.point!r}")


@dataclass
class ScoreTable:
    """Raw per-evaluation scores and their means per (model, kernel, state, metric)."""

    raw: list = field(default_factory=list)

    def add(self, model, kernel, pair_id, t_start, state, metric, value, collision_rate):
        self.raw.append((model, kernel, pair_id, float(t_start), state, metric, float(value),
                         float(collision_rate)))

    def means(self) -> dict:
        acc = defaultdict(list)
        for model, kernel, _, _, state, metric, value, _ in self.raw:
            acc[(model, kernel, state, metric)].append(value)
        return {k: (float(np.mean(v)), len(v)) for k, v in acc.items()}

    def mean(self, model, state, metric) -> float:
        for (m, _, s, met), (value, _) in self.means().items():
            if (m, s, met) == (model, state, metric):
                return value
        raise KeyError((model, state, metric))

    def collision_rate(self, model) -> float:
        rates = {}
        for m, _, pid, t0, *_, rate in self.raw:
            if m == model:
                rates[(pid, t0)] = rate
        return float(np.mean(list(rates.values()))) if rates else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SCORE_COLUMNS)
            for (model, kernel, state, metric), (value, count) in self.means().items():
                w.writerow([model, kernel, state, metric, repr(value), count])

    def write_raw_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(RAW_COLUMNS)
            for row in self.raw:
                w.writerow([*row[:3], repr(row[3]), row[4], row[5], repr(row[6]), repr(row[7])])


def start_times(traj: Trajectory, protocol: EvalProtocol) -> list[float]:
    """Forecast origins: first one after ``T_ctx`` context steps, then every stride."""
    dt = traj.dt
    n_h = int(round(protocol.horizon / dt))
    stride = max(int(round(protocol.start_stride / dt)), 1)
    first = protocol.T_ctx
    return [traj.t_first + i * dt for i in range(first, traj.n - n_h, stride)]


def score_ensemble(ens, point: str = "mean") -> dict:
    """{(state, metric): value} for one ensemble."""
    out = {}
    for state in STATES:
        X = ens.states(state)
        y = ens.truth(state)
        summary = np.median(X, axis=0) if point == "median" else X.mean(axis=0)
        out[(state, "RMSE")] = rmse(y, summary)
        out[(state, "CRPS")] = float(crps_ensemble(X, y).mean())
        out[(state, "ES")] = energy_score(X, y)
    return out


ModelEntry = Union[ModelParams, tuple]


def evaluate_testset(models: Mapping[str, ModelEntry],
                     split: Union[DatasetSplit, Sequence[Trajectory]],
                     protocol: EvalProtocol = EvalProtocol()) -> ScoreTable:
    """Score every model on every (test pair, forecast origin).

    ``models`` maps a label to parameters or to ``(params, kernel)``.  All
    models see the same random streams at a given origin.
    """
    trajs = split.test if isinstance(split, DatasetSplit) else list(split)
    if not trajs:
        raise ArgumentError("empty test split")
    if not models:
        raise ArgumentError("no models to evaluate")
    origins = []
    for tr in trajs:
        starts = start_times(tr, protocol)
        if not starts:
            raise ArgumentError(f"pair {tr.pair_id} ({tr.t0:.3g} s) is too short for "
                                f"{protocol.T_ctx} context steps and a {protocol.horizon} s horizon")
        origins.extend((tr, t0) for t0 in starts)

    table = ScoreTable()
    for label, entry in models.items():
        params, kernel = entry if isinstance(entry, tuple) else (entry, entry.kernel)
        for j, (tr, t0) in enumerate(origins):
            ens = simulate_ensemble(params, tr, t0, protocol.horizon, protocol.rounds,
                                    kernel=kernel, T_ctx=protocol.T_ctx,
                                    seed=protocol.seed + j * protocol.rounds)
            rate = ens.collision_rate
            for (state, metric), value in score_ensemble(ens, protocol.point).items():
                table.add(label, kernel, tr.pair_id, t0, state, metric, value, rate)
    return table
