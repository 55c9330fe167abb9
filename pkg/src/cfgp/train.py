"""Mini-batch training of the mean model and GP residual parameters."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DatasetSplit, Trajectory, make_windows
from .errors import ArgumentError, ConfigError, DataError, NumericalError
from .gp import block_nll_and_grads, joint_block_nll_and_grads
from .kernels import KERNELS
from .meanmodel import (BIAS_NAMES, ModelParams, backward_batch, forward_batch, init_params,
                        save_params)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    kernel: str
    H: int = 64
    T_block: int = 50
    segments_per_step: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    epochs: int = 500
    dropout: float = 0.1
    seed: int = 0
    objective: str = "acc"
    T_ctx: int = 50
    patience: int = 50
    window_stride: int = 0  # 0 means non-overlapping (stride = T_block)
    sigma_v: float = 0.05  # joint objective only
    sigma_p: float = 0.05

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.objective not in ("acc", "joint"):
            raise ConfigError(f"objective must be 'acc' or 'joint', got {self.objective!r}")
        for name in ("H", "T_block", "segments_per_step", "epochs", "T_ctx", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.T_block < 2:
            raise ConfigError(f"T_block must be >= 2, got {self.T_block}")
        if self.window_stride < 0:
            raise ConfigError("window_stride must be >= 0")
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ConfigError("lr and weight_decay must be >= 0, clip_norm > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.sigma_v <= 0 or self.sigma_p <= 0:
            raise ConfigError("sigma_v and sigma_p must be positive")

    @property
    def stride(self) -> int:
        return self.window_stride or self.T_block

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        conv = {"int": int, "float": float}.get(types[key], str)
        try:
            values[key] = conv(val)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    if "kernel" not in values:
        raise ConfigError("missing config key 'kernel'")
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


@dataclass
class TrainReport:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    best_epoch: int = -1
    wall_seconds: float = 0.0
    checkpoint_path: Optional[str] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "val_nll"])
            for i, (tr, va) in enumerate(zip(self.train_nll, self.val_nll)):
                w.writerow([i, repr(float(tr)), repr(float(va))])


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, T, 3)
    targets: np.ndarray  # (B, T)
    positions: np.ndarray  # (B, T)
    dt: float

    def __len__(self):
        return len(self.targets)

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.inputs[idx], self.targets[idx], self.positions[idx], self.dt)


def collect_windows(trajs: Sequence[Trajectory], T: int, stride: int) -> WindowBatch:
    if not trajs:
        raise DataError("no trajectories to build windows from")
    dts = {round(t.dt, 9) for t in trajs}
    if len(dts) != 1:
        raise DataError(f"trajectories have mixed sampling intervals {sorted(dts)}")
    ws = []
    for tr in trajs:
        if tr.n < T:
            raise DataError(f"pair {tr.pair_id} has {tr.n} steps, fewer than T_block={T}")
        ws.extend(make_windows(tr, T, stride))
    return WindowBatch(np.stack([w.inputs for w in ws]), np.stack([w.targets for w in ws]),
                       np.stack([w.positions for w in ws]), trajs[0].dt)


def standardization(trajs: Sequence[Trajectory]):
    x = np.concatenate([t.covariates() for t in trajs])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


# --------------------------------------------------------------------------
# loss, gradients, optimizer
# --------------------------------------------------------------------------

def batch_loss_and_grads(params: ModelParams, batch: WindowBatch, cfg: TrainConfig,
                         mask=None, need_grads: bool = True):
    """Mean per-window NLL over ``batch`` and its exact parameter gradient.

    Weight decay is not included here.
    """
    a, ell, sig, cache = forward_batch(params, batch.inputs, mask=mask)
    B, T = batch.targets.shape
    times = np.arange(T) * batch.dt
    s0 = params.sigma0
    if cfg.objective == "acc":
        loss, d_a, d_ell, d_sig, d_s0 = block_nll_and_grads(cfg.kernel, times, batch.targets,
                                                           a, ell, sig, s0)
    else:
        loss, d_a, d_ell, d_sig, d_s0 = joint_block_nll_and_grads(
            cfg.kernel, times, batch.targets, batch.inputs[:, :, 2], batch.positions,
            a, ell, sig, s0, cfg.sigma_v ** 2, cfg.sigma_p ** 2, batch.dt)
    mean_loss = float(np.mean(loss))
    if not need_grads:
        return mean_loss, None
    grads = backward_batch(params, cache, d_a / B, d_ell / B, d_sig / B, float(np.sum(d_s0)) / B)
    return mean_loss, grads


def weight_decay_penalty(weights: dict, coef: float) -> float:
    return 0.5 * coef * sum(float(np.sum(v * v)) for k, v in weights.items() if k not in BIAS_NAMES)


def add_weight_decay(grads: dict, weights: dict, coef: float) -> dict:
    return {k: (g + coef * weights[k] if k not in BIAS_NAMES else g) for k, g in grads.items()}


def clip_gradients(grads: dict, max_norm: float):
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm)."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, weights: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            weights[k] = np.asarray(weights[k] - upd)


def dropout_mask(rng, shape, rate):
    if rate <= 0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


# --------------------------------------------------------------------------
# public entry points
# --------------------------------------------------------------------------

def evaluate_nll(params: ModelParams, trajs: Sequence[Trajectory], cfg: TrainConfig,
                 chunk: int = 512) -> float:
    """Mean NLL per time step over non-overlapping windows, dropout off."""
    batch = collect_windows(trajs, cfg.T_block, cfg.stride)
    total = 0.0
    for start in range(0, len(batch), chunk):
        sub = batch.take(slice(start, start + chunk))
        loss, _ = batch_loss_and_grads(params, sub, cfg, need_grads=False)
        total += loss * len(sub)
    return total / len(batch) / cfg.T_block


def train(split: DatasetSplit, cfg: TrainConfig, out_dir=None, init: Optional[ModelParams] = None):
    """Fit ``cfg.kernel`` model on ``split.train``; returns (best params, report).

    Validation NLL selects the best epoch (train NLL when the validation set
    is empty).  With ``out_dir`` the best parameters are saved to
    ``model.ckpt`` and the loss curves to ``losses.csv``.
    """
    if not split.train:
        raise DataError("training split is empty")
    t_begin = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    batch_all = collect_windows(split.train, cfg.T_block, cfg.stride)
    if init is None:
        params = init_params(cfg.H, batch_all.inputs.shape[-1], cfg.seed)
        params.x_mean, params.x_std = standardization(split.train)
    else:
        params = init.copy()
    params.kernel = cfg.kernel
    opt = Adam(params.weights, cfg.lr)
    report = TrainReport()
    best = params.copy()
    best_score = np.inf
    since_best = 0
    n_win = len(batch_all)
    T = cfg.T_block

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_win)
        losses = []
        for step, start in enumerate(range(0, n_win, cfg.segments_per_step)):
            sub = batch_all.take(perm[start:start + cfg.segments_per_step])
            mask = dropout_mask(rng, (len(sub), T, params.H), cfg.dropout)
            loss, grads = batch_loss_and_grads(params, sub, cfg, mask=mask)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {step}")
            grads = add_weight_decay(grads, params.weights, cfg.weight_decay)
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            opt.step(params.weights, grads)
            losses.append(loss * len(sub))
        train_nll = evaluate_nll(params, split.train, cfg)
        val_nll = evaluate_nll(params, split.val, cfg) if split.val else train_nll
        if not np.isfinite(val_nll):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        report.train_nll.append(train_nll)
        report.val_nll.append(val_nll)
        log.info("epoch %d train %.5f val %.5f", epoch, train_nll, val_nll)
        if val_nll < best_score:
            best_score = val_nll
            best = params.copy()
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    report.wall_seconds = time.perf_counter() - t_begin
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_params(best, out / "model.ckpt")
        report.write_csv(out / "losses.csv")
        report.checkpoint_path = str(out / "model.ckpt")
    return best, report


def mean_head_outputs(params: ModelParams, trajs: Sequence[Trajectory], T: int):
    """Average ``ell_nn`` and ``sigma_nn`` over all non-overlapping windows."""
    batch = collect_windows(trajs, T, T)
    _, ell, sig, _ = forward_batch(params, batch.inputs)
    return float(ell.mean()), float(sig.mean())


def per_step_heads(params: ModelParams, trajs: Sequence[Trajectory], T: int):
    """Head outputs with covariates for every step covered by length-T windows."""
    batch = collect_windows(trajs, T, T)
    a, ell, sig, _ = forward_batch(params, batch.inputs)
    return batch, a, ell, sig


