"""Trajectory ingestion, resampling, pair filtering and covariate windows.

Positions are longitudinal arc-length along the lane, increasing in the
direction of travel.  Relative speed is ``lead_vel - foll_vel`` everywhere in
the package (positive means the gap is opening).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, DataError, FormatError

CSV_COLUMNS = (
    "pair_id",
    "t",
    "lead_pos",
    "lead_vel",
    "foll_pos",
    "foll_vel",
    "foll_acc",
    "lead_length",
)
_REQUIRED = tuple(c for c in CSV_COLUMNS if c != "foll_acc")


@dataclass(frozen=True)
class Trajectory:
    """Leader/follower kinematics of one car-following pair on a uniform grid."""

    pair_id: str
    dt: float
    lead_pos: np.ndarray
    lead_vel: np.ndarray
    foll_pos: np.ndarray
    foll_vel: np.ndarray
    foll_acc: np.ndarray
    lead_length: float
    t_first: float = 0.0

    def __post_init__(self):
        n = len(self.lead_pos)
        for name in ("lead_vel", "foll_pos", "foll_vel", "foll_acc"):
            if len(getattr(self, name)) != n:
                raise DataError(f"pair {self.pair_id}: series {name} has length "
                                f"{len(getattr(self, name))}, expected {n}")
        if n < 2:
            raise DataError(f"pair {self.pair_id}: needs at least 2 frames, got {n}")
        if not self.dt > 0:
            raise DataError(f"pair {self.pair_id}: dt must be positive, got {self.dt}")

    @property
    def n(self) -> int:
        return len(self.lead_pos)

    @property
    def t0(self) -> float:
        """Duration in seconds, ``(N - 1) * dt``."""
        return (self.n - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t_first + np.arange(self.n) * self.dt

    @property
    def gap(self) -> np.ndarray:
        return self.lead_pos - self.foll_pos - self.lead_length

    @property
    def rel_speed(self) -> np.ndarray:
        return self.lead_vel - self.foll_vel

    def covariates(self) -> np.ndarray:
        """(N, 3) array of (gap, relative speed, follower speed)."""
        return np.column_stack([self.gap, self.rel_speed, self.foll_vel])

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(
            pair_id=self.pair_id,
            dt=self.dt,
            lead_pos=self.lead_pos[start:stop],
            lead_vel=self.lead_vel[start:stop],
            foll_pos=self.foll_pos[start:stop],
            foll_vel=self.foll_vel[start:stop],
            foll_acc=self.foll_acc[start:stop],
            lead_length=self.lead_length,
            t_first=self.t_first + start * self.dt,
        )


@dataclass(frozen=True)
class CovariateWindow:
    inputs: np.ndarray  # (T, 3): gap, relative speed, follower speed
    targets: np.ndarray  # (T,) follower acceleration
    times: np.ndarray  # (T,)
    pair_id: str
    positions: Optional[np.ndarray] = None  # (T,) follower position, for the joint objective

    @property
    def T(self) -> int:
        return len(self.targets)


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]
    seed: int = 0
    dropped: list[str] = field(default_factory=list)


def _check_invariants(traj: Trajectory) -> None:
    gap = traj.gap
    bad = np.flatnonzero(~(gap > 0))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"pair {traj.pair_id}: nonpositive gap {gap[i]:.6g} m "
                        f"at t={traj.times[i]:.6g} s")
    for name in ("lead_vel", "foll_vel"):
        v = getattr(traj, name)
        bad = np.flatnonzero(~(v >= 0))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"pair {traj.pair_id}: negative {name} {v[i]:.6g} "
                            f"at t={traj.times[i]:.6g} s")


def finite_difference_acc(vel: np.ndarray, dt: float) -> np.ndarray:
    """Central differences inside, one-sided at the two boundaries."""
    return np.gradient(np.asarray(vel, dtype=float), dt, edge_order=1)


def load_trajectories(path, format: str = "generic-csv") -> list[Trajectory]:
    """Read a trajectory CSV into one :class:`Trajectory` per ``pair_id``.

    Rows of a pair may be interleaved with other pairs; they are sorted by
    ``t``.  Timestamps inside a pair must be unique and uniformly spaced.  An
    absent ``foll_acc`` column (or empty cells) falls back to finite
    differences of ``foll_vel``.
    """
    if format != "generic-csv":
        raise ArgumentError(f"unsupported trajectory format {format!r}")
    path = Path(path)
    if not path.exists():
        raise ArgumentError(f"no such file: {path}")

    rows: dict[str, list[list[str]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        for col in _REQUIRED:
            if col not in header:
                raise FormatError(f"{path}: missing column {col!r}")
        idx = {c: header.index(c) for c in CSV_COLUMNS if c in header}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not r.strip() for r in rec):
                continue
            if len(rec) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, "
                                  f"got {len(rec)}")
            rows.setdefault(rec[idx["pair_id"]].strip(), []).append(rec)

    out = []
    for pair_id, recs in rows.items():
        try:
            cols = {c: np.array([float(r[idx[c]]) for r in recs])
                    for c in _REQUIRED if c != "pair_id"}
        except ValueError as exc:
            raise FormatError(f"{path}: pair {pair_id}: {exc}") from None
        if "foll_acc" in idx:
            raw = [r[idx["foll_acc"]].strip() for r in recs]
            acc = None if any(x == "" for x in raw) else np.array([float(x) for x in raw])
        else:
            acc = None

        order = np.argsort(cols["t"], kind="stable")
        t = cols["t"][order]
        if len(t) < 2:
            raise DataError(f"pair {pair_id}: needs at least 2 frames, got {len(t)}")
        steps = np.diff(t)
        if np.any(steps <= 0):
            i = int(np.flatnonzero(steps <= 0)[0])
            raise DataError(f"pair {pair_id}: non-monotone timestamps near t={t[i]:.6g} s")
        dt = float(np.median(steps))
        if np.any(np.abs(steps - dt) > 1e-6 * dt + 1e-9):
            raise DataError(f"pair {pair_id}: timestamps are not uniformly spaced")
        lengths = np.unique(cols["lead_length"])
        if len(lengths) != 1:
            raise DataError(f"pair {pair_id}: lead_length varies across rows")

        vel = cols["foll_vel"][order]
        traj = Trajectory(
            pair_id=pair_id,
            dt=dt,
            lead_pos=cols["lead_pos"][order],
            lead_vel=cols["lead_vel"][order],
            foll_pos=cols["foll_pos"][order],
            foll_vel=vel,
            foll_acc=acc[order] if acc is not None else finite_difference_acc(vel, dt),
            lead_length=float(lengths[0]),
            t_first=float(t[0]),
        )
        _check_invariants(traj)
        out.append(traj)
    return out


def write_trajectories(trajs: Iterable[Trajectory], path) -> None:
    """Write trajectories in the generic CSV format (17 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for tr in trajs:
            for i, t in enumerate(tr.times):
                w.writerow([tr.pair_id, repr(float(t)),
                            repr(float(tr.lead_pos[i])), repr(float(tr.lead_vel[i])),
                            repr(float(tr.foll_pos[i])), repr(float(tr.foll_vel[i])),
                            repr(float(tr.foll_acc[i])), repr(float(tr.lead_length))])


def resample(traj: Trajectory, target_dt: float) -> Trajectory:
    """Keep every k-th frame, ``k = target_dt / dt``.  No interpolation."""
    ratio = target_dt / traj.dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
        raise ArgumentError(f"target_dt={target_dt} is not an integer multiple of "
                            f"dt={traj.dt}")
    if k == 1:
        return traj
    return Trajectory(
        pair_id=traj.pair_id,
        dt=traj.dt * k,
        lead_pos=traj.lead_pos[::k].copy(),
        lead_vel=traj.lead_vel[::k].copy(),
        foll_pos=traj.foll_pos[::k].copy(),
        foll_vel=traj.foll_vel[::k].copy(),
        foll_acc=traj.foll_acc[::k].copy(),
        lead_length=traj.lead_length,
        t_first=traj.t_first,
    )


def filter_and_split(
    trajs: Sequence[Trajectory],
    min_duration: float = 30.0,
    test_min_duration: float = 50.0,
    n_test: int = 30,
    train_frac: float = 0.7,
    seed: int = 0,
) -> DatasetSplit:
    """Drop short pairs, draw a long-duration test set, split the rest.

    Inputs are ordered by ``pair_id`` first, so the result depends only on
    the set of trajectories and the seed.
    """
    if not 0 < train_frac < 1:
        raise ArgumentError(f"train_frac must lie in (0, 1), got {train_frac}")
    if n_test < 0:
        raise ArgumentError(f"n_test must be non-negative, got {n_test}")
    ids = [t.pair_id for t in trajs]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate pair_id in input trajectories")

    ordered = sorted(trajs, key=lambda t: t.pair_id)
    kept = [t for t in ordered if t.t0 > min_duration]
    dropped = [t.pair_id for t in ordered if t.t0 <= min_duration]
    long_idx = [i for i, t in enumerate(kept) if t.t0 > test_min_duration]
    if len(long_idx) < n_test:
        raise DataError(f"need {n_test} pairs longer than {test_min_duration} s for "
                        f"the test set, found {len(long_idx)} (of {len(kept)} kept)")

    rng = np.random.default_rng(seed)
    test_pick = set(rng.choice(long_idx, size=n_test, replace=False).tolist()) if n_test else set()
    test = [kept[i] for i in sorted(test_pick)]
    rest = [t for i, t in enumerate(kept) if i not in test_pick]
    perm = rng.permutation(len(rest))
    n_train = int(round(train_frac * len(rest)))
    train = [rest[i] for i in sorted(perm[:n_train])]
    val = [rest[i] for i in sorted(perm[n_train:])]
    return DatasetSplit(train=train, val=val, test=test, seed=seed, dropped=dropped)


def make_windows(traj: Trajectory, T: int, stride: int) -> list[CovariateWindow]:
    """Contiguous length-``T`` windows starting at 0, stride, 2*stride, ..."""
    if T < 2:
        raise ArgumentError(f"window length must be >= 2, got {T}")
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if T > traj.n:
        raise ArgumentError(f"window length {T} exceeds trajectory length {traj.n} "
                            f"(pair {traj.pair_id})")
    x = traj.covariates()
    times = traj.times
    return [
        CovariateWindow(inputs=x[s:s + T], targets=traj.foll_acc[s:s + T],
                        times=times[s:s + T], pair_id=traj.pair_id,
                        positions=traj.foll_pos[s:s + T])
        for s in range(0, traj.n - T + 1, stride)
    ]
