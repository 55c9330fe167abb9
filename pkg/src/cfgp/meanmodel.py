"""Recurrent mean model: LSTM cell plus three feedforward heads.

Each head is ``h -> SiLU(W1 h + b1) -> w2 . u + b2``.  The mean head output is
the mean acceleration; the lengthscale and standard-deviation heads pass
through softplus.  The observation-noise scale ``sigma0`` is a learned global
scalar, ``softplus(noise_raw)``.

Forward and backward passes are batched over windows (leading axis ``B``)
and written out by hand so gradients are exact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, FormatError, NumericalError

HEADS = ("mu", "ell", "sig")
CELL_NAMES = ("W_x", "W_h", "b")
HEAD_NAMES = tuple(f"{h}_{p}" for h in HEADS for p in ("W1", "b1", "w2", "b2"))
PARAM_NAMES = CELL_NAMES + HEAD_NAMES + ("noise_raw",)
# excluded from weight decay
BIAS_NAMES = frozenset(n for n in PARAM_NAMES if n == "b" or n.endswith(("_b1", "_b2"))) | {"noise_raw"}
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return np.log(np.expm1(y))


@dataclass
class ModelParams:
    """All trainable weights plus the fixed input standardization.

    ``weights`` maps the names in :data:`PARAM_NAMES` to arrays.  ``W_x`` is
    (input_dim, 4H), ``W_h`` is (H, 4H) and ``b`` is (4H,), gate order
    input, forget, candidate, output.
    """

    H: int
    input_dim: int
    weights: dict
    x_mean: np.ndarray
    x_std: np.ndarray
    kernel: str = "gibbs"

    def __getitem__(self, name):
        return self.weights[name]

    @property
    def sigma0(self) -> float:
        return float(softplus(self.weights["noise_raw"]))

    def copy(self) -> "ModelParams":
        return ModelParams(self.H, self.input_dim,
                           {k: v.copy() for k, v in self.weights.items()},
                           self.x_mean.copy(), self.x_std.copy(), self.kernel)

    def n_params(self) -> int:
        return sum(v.size for v in self.weights.values())


@dataclass
class HeadOutputs:
    a_nn: np.ndarray
    ell_nn: np.ndarray
    sigma_nn: np.ndarray
    hidden_states: np.ndarray
    cell_states: Optional[np.ndarray] = None
    sigma0: float = 0.0


def init_params(H: int = 64, input_dim: int = 3, seed: int = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, ``sigma0 = 0.1``."""
    if H < 1 or input_dim < 1:
        raise ArgumentError(f"H and input_dim must be >= 1, got {H}, {input_dim}")
    rng = np.random.default_rng(seed)

    def unif(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w = {
        "W_x": unif(input_dim, (input_dim, 4 * H)),
        "W_h": unif(H, (H, 4 * H)),
        "b": np.zeros(4 * H),
    }
    for h in HEADS:
        w[f"{h}_W1"] = unif(H, (H, H))
        w[f"{h}_b1"] = np.zeros(H)
        w[f"{h}_w2"] = unif(H, (H,))
        w[f"{h}_b2"] = np.zeros(())
    w["noise_raw"] = np.array(inv_softplus(0.1))
    return ModelParams(H, input_dim, w, np.zeros(input_dim), np.ones(input_dim))


def zeros_like_params(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def standardize(params: ModelParams, x):
    return (np.asarray(x, dtype=float) - params.x_mean) / params.x_std


def _rowwise(x, W):
    # one product per row, so a row's result does not depend on the batch size
    return np.matmul(x[:, None, :], W)[:, 0]


def lstm_step(params: ModelParams, xs, h, c):
    """One cell update on standardized inputs ``xs`` (B, D); returns (h, c).

    Rows are computed independently: the result for a row is bit-identical
    whatever else is in the batch.
    """
    H = params.H
    z = _rowwise(xs, params["W_x"]) + _rowwise(h, params["W_h"]) + params["b"]
    i = expit(z[:, :H])
    f = expit(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = expit(z[:, 3 * H:])
    c = f * c + i * g
    return o * np.tanh(c), c


def heads(params: ModelParams, h):
    """Apply the three heads to hidden states ``h`` (B, H), row by row."""
    out = []
    for name in HEADS:
        z1 = _rowwise(h, params[f"{name}_W1"]) + params[f"{name}_b1"]
        u = z1 * expit(z1)
        out.append(_rowwise(u, params[f"{name}_w2"][:, None])[:, 0] + params[f"{name}_b2"])
    return out[0], softplus(out[1]), softplus(out[2])


def _zero_state(params, B):
    return np.zeros((B, params.H)), np.zeros((B, params.H))


def _check_finite(hs, offset=0):
    ok = np.all(np.isfinite(hs), axis=tuple(i for i in range(hs.ndim) if i != 1))
    if not np.all(ok):
        step = int(np.flatnonzero(~ok)[0]) + offset
        raise NumericalError(f"non-finite hidden activation at step {step}")


# --------------------------------------------------------------------------
# batched forward / backward
# --------------------------------------------------------------------------

@dataclass
class ForwardCache:
    X: np.ndarray  # standardized inputs (B, T, D)
    h0: np.ndarray
    c0: np.ndarray
    gates: np.ndarray  # (B, T, 4H) activated i, f, g, o
    hs: np.ndarray  # (B, T, H)
    cs: np.ndarray  # (B, T, H)
    mask: Optional[np.ndarray]
    head_z1: dict = field(default_factory=dict)
    head_out: dict = field(default_factory=dict)


def forward_batch(params: ModelParams, inputs, state=None, mask=None):
    """Run the network over raw covariates ``inputs`` (B, T, D).

    ``state`` is an optional ``(h0, c0)`` pair of (B, H) arrays; ``mask`` an
    optional dropout multiplier (B, T, H) applied to hidden states before the
    heads.  Returns ``(a_nn, ell_nn, sigma_nn, cache)`` with (B, T) outputs.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[-1] != params.input_dim:
        raise ArgumentError(f"inputs must have shape (B, T, {params.input_dim}), got {inputs.shape}")
    X = standardize(params, inputs)
    B, T, _ = X.shape
    H = params.H
    h, c = _zero_state(params, B) if state is None else (np.array(state[0], dtype=float).reshape(B, H),
                                                         np.array(state[1], dtype=float).reshape(B, H))
    h0, c0 = h, c
    xw = X @ params["W_x"] + params["b"]
    W_h = params["W_h"]
    gates = np.empty((B, T, 4 * H))
    hs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    for t in range(T):
        z = xw[:, t] + h @ W_h
        gt = gates[:, t]
        gt[:, :2 * H] = expit(z[:, :2 * H])
        gt[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        gt[:, 3 * H:] = expit(z[:, 3 * H:])
        c = gt[:, H:2 * H] * c + gt[:, :H] * gt[:, 2 * H:3 * H]
        h = gt[:, 3 * H:] * np.tanh(c)
        hs[:, t] = h
        cs[:, t] = c
    _check_finite(hs)

    hd = hs * mask if mask is not None else hs
    cache = ForwardCache(X, h0, c0, gates, hs, cs, mask)
    outs = []
    for name in HEADS:
        z1 = hd @ params[f"{name}_W1"] + params[f"{name}_b1"]
        u = z1 * expit(z1)
        o = u @ params[f"{name}_w2"] + params[f"{name}_b2"]
        cache.head_z1[name] = z1
        cache.head_out[name] = o
        outs.append(o)
    return outs[0], softplus(outs[1]), softplus(outs[2]), cache


def backward_batch(params: ModelParams, cache: ForwardCache, d_a, d_ell, d_sig, d_sigma0=0.0):
    """Backpropagation through time.

    ``d_a``, ``d_ell``, ``d_sig`` are loss gradients w.r.t. the (B, T) head
    outputs (after softplus); ``d_sigma0`` w.r.t. ``softplus(noise_raw)``.
    Returns a dict of gradients keyed like ``params.weights``.
    """
    H = params.H
    B, T, _ = cache.X.shape
    for g in (d_a, d_ell, d_sig):
        if np.shape(g) != (B, T):
            raise ArgumentError(f"head gradient shape {np.shape(g)} != {(B, T)}")
    grads = {}
    hd = cache.hs * cache.mask if cache.mask is not None else cache.hs
    dhd = np.zeros_like(hd)
    for name, d_out in zip(HEADS, (d_a, d_ell, d_sig)):
        d_out = np.asarray(d_out, dtype=float)
        if name != "mu":
            d_out = d_out * expit(cache.head_out[name])
        z1 = cache.head_z1[name]
        s = expit(z1)
        u = z1 * s
        grads[f"{name}_w2"] = np.einsum("bt,bth->h", d_out, u)
        grads[f"{name}_b2"] = np.array(d_out.sum())
        du = d_out[..., None] * params[f"{name}_w2"]
        dz1 = du * (s + z1 * s * (1.0 - s))
        grads[f"{name}_W1"] = np.einsum("bti,btj->ij", hd, dz1)
        grads[f"{name}_b1"] = dz1.sum(axis=(0, 1))
        dhd += dz1 @ params[f"{name}_W1"].T
    dhs = dhd * cache.mask if cache.mask is not None else dhd

    W_hT = params["W_h"].T
    dz_all = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        gt = cache.gates[:, t]
        i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        c = cache.cs[:, t]
        c_prev = cache.cs[:, t - 1] if t > 0 else cache.c0
        tc = np.tanh(c)
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dh_next = dz @ W_hT
        dc_next = dc * f
    h_prev = np.concatenate([cache.h0[:, None, :], cache.hs[:, :-1]], axis=1)
    grads["W_x"] = np.einsum("bti,btj->ij", cache.X, dz_all)
    grads["W_h"] = np.einsum("bti,btj->ij", h_prev, dz_all)
    grads["b"] = dz_all.sum(axis=(0, 1))
    grads["noise_raw"] = np.array(float(d_sigma0) * expit(params["noise_raw"]))
    return grads


# --------------------------------------------------------------------------
# single-window API
# --------------------------------------------------------------------------

def _window_inputs(window):
    return window.inputs if hasattr(window, "inputs") else np.asarray(window, dtype=float)


def _state_arg(h0, H):
    if h0 is None:
        return None
    if isinstance(h0, tuple):
        return h0[0].reshape(1, H), h0[1].reshape(1, H)
    return np.asarray(h0, dtype=float).reshape(1, H), np.zeros((1, H))


def forward(params: ModelParams, window, h0=None) -> HeadOutputs:
    """Head outputs for one :class:`~cfgp.data.CovariateWindow` (or (T, D) array).

    ``h0`` is ``None`` (zeros), a hidden vector (cell state zero) or an
    ``(h, c)`` pair.
    """
    x = _window_inputs(window)
    a, ell, sig, cache = forward_batch(params, x[None], _state_arg(h0, params.H))
    return HeadOutputs(a[0], ell[0], sig[0], cache.hs[0], cache.cs[0], params.sigma0)


def backward(params: ModelParams, window, h0, grad_outputs) -> dict:
    """Exact parameter gradients for one window.

    ``grad_outputs`` is ``(d_a, d_ell, d_sigma[, d_sigma0])`` with (T,) arrays.
    """
    x = _window_inputs(window)
    *_, cache = forward_batch(params, x[None], _state_arg(h0, params.H))
    d_a, d_ell, d_sig = (np.asarray(g, dtype=float)[None] for g in grad_outputs[:3])
    d_s0 = grad_outputs[3] if len(grad_outputs) > 3 else 0.0
    return backward_batch(params, cache, d_a, d_ell, d_sig, d_s0)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    """Write a self-describing ``.npz`` archive (exact binary round-trip)."""
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({
        "format_version": np.array(CHECKPOINT_VERSION),
        "H": np.array(params.H),
        "input_dim": np.array(params.input_dim),
        "x_mean": params.x_mean,
        "x_std": params.x_std,
        "kernel": np.array(params.kernel),
    })
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> ModelParams:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            version = int(z["format_version"])
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {version}")
            weights = {k[2:]: z[k].copy() for k in z.files if k.startswith("w/")}
            params = ModelParams(int(z["H"]), int(z["input_dim"]), weights,
                                 z["x_mean"].copy(), z["x_std"].copy(), str(z["kernel"]))
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from None
    missing = set(PARAM_NAMES) - set(weights)
    if missing:
        raise FormatError(f"{path}: checkpoint lacks sections {sorted(missing)}")
    return params
