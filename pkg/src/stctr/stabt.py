"""Context-modulated tower: fusion batch-norm, fusion FC, prediction head, loss.

Each tower layer applies BN over its input, then an FC with leaky-ReLU.
When modulation is on, the context embedding ``h_c`` drives four small
affine nets per layer:

* FC gain ``2*sigmoid(h_c @ W_dfc1 + b_dfc1)``, one factor per output unit
  (it scales the matching column of the trunk weight);
* FC shift ``h_c @ W_dfc2 + b_dfc2``, added to the trunk bias;
* BN gain ``2*sigmoid(h_c @ W_dbn1 + b_dbn1)``, multiplying gamma;
* BN shift ``h_c @ W_dbn2 + b_dbn2``, added to beta.

Multiplicative modulators use ``2*sigmoid`` and additive ones are linear, so
zero-initialised modulation nets leave the tower exactly equal to the plain
FC/BN stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numcore as nc
from .errors import DataError, DimensionError, UsageError

BN_MOMENTUM = 0.99
BN_EPS = 1e-5
PROB_CLAMP = 1e-7


# ----------------------------------------------------------- BN statistics

@dataclass
class RunningStats:
    """Exponential moving averages of batch mean and variance.

    The averages start at zero and are divided by ``1 - momentum**steps`` when
    read, which removes the start-up bias of the zero initialisation.
    """

    width: int
    momentum: float = BN_MOMENTUM
    raw_mean: np.ndarray = None
    raw_var: np.ndarray = None
    steps: int = 0

    def __post_init__(self):
        if self.raw_mean is None:
            self.raw_mean = np.zeros(self.width)
        if self.raw_var is None:
            self.raw_var = np.zeros(self.width)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.raw_mean = m * self.raw_mean + (1.0 - m) * mean
        self.raw_var = m * self.raw_var + (1.0 - m) * var
        self.steps += 1

    def estimates(self):
        if self.steps == 0:
            return np.zeros(self.width), np.ones(self.width)
        debias = 1.0 - self.momentum ** self.steps
        return self.raw_mean / debias, self.raw_var / debias

    def copy(self) -> "RunningStats":
        return RunningStats(self.width, self.momentum, self.raw_mean.copy(),
                            self.raw_var.copy(), self.steps)


@dataclass
class TowerShape:
    d_in: int
    widths: tuple
    d_context: int
    modulated: bool = True

    @property
    def layer_dims(self):
        dims = (self.d_in,) + tuple(self.widths)
        return list(zip(dims[:-1], dims[1:]))

    def param_shapes(self) -> dict:
        shapes = {}
        for l, (n_in, n_out) in enumerate(self.layer_dims):
            p = f"stabt.{l}"
            shapes.update({f"{p}.bn.gamma": (n_in,), f"{p}.bn.beta": (n_in,),
                           f"{p}.fc.w": (n_in, n_out), f"{p}.fc.b": (n_out,)})
            if self.modulated:
                for net, width in (("dfc1", n_out), ("dfc2", n_out),
                                   ("dbn1", n_in), ("dbn2", n_in)):
                    shapes[f"{p}.{net}.w"] = (self.d_context, width)
                    shapes[f"{p}.{net}.b"] = (width,)
        shapes["head.w"] = (self.widths[-1], 1)
        shapes["head.b"] = (1,)
        return shapes

    def init_params(self, rng_for) -> dict:
        """``rng_for(name)`` returns a generator dedicated to that parameter."""
        p = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("bn.gamma"):
                p[name] = np.ones(shape)
            elif name.endswith(".fc.w") or name == "head.w":
                p[name] = rng_for(name).normal(0.0, np.sqrt(2.0 / shape[0]), shape)
            else:
                # biases, beta and every modulation net start at zero
                p[name] = np.zeros(shape)
        return p

    def new_stats(self) -> list:
        return [RunningStats(n_in) for n_in, _ in self.layer_dims]


# ------------------------------------------------------------------- layers

def _check_rows(name, t: nc.Tensor, B: int, n: int):
    if t.shape != (B, n):
        raise DimensionError(f"{name}: expected {(B, n)}, got {t.shape}")


def fusion_bn_forward(x: nc.Tensor, gamma: nc.Tensor, beta: nc.Tensor, mode: str,
                      stats: RunningStats, gain: Optional[nc.Tensor] = None,
                      shift: Optional[nc.Tensor] = None, eps: float = BN_EPS,
                      update_stats: bool = True) -> nc.Tensor:
    """``gain * gamma * (x - mu) / sqrt(var + eps) + beta + shift``.

    Train mode normalises with batch statistics (and folds them into
    ``stats`` when ``update_stats``); eval mode uses ``stats``. ``gain`` and
    ``shift`` are per-row (B, n) modulators; omit them for plain BN.
    """
    X = x.data
    if X.ndim != 2:
        raise DimensionError(f"batch norm expects (B, n), got {x.shape}")
    B, n = X.shape
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"batch norm parameters {gamma.shape}/{beta.shape} vs width {n}")
    if mode == "train":
        if B < 2:
            raise UsageError("train-mode batch norm needs at least two rows")
        mu = X.mean(axis=0)
        var = X.var(axis=0)
        if update_stats:
            stats.update(mu, var * B / (B - 1))
    elif mode == "eval":
        mu, var = stats.estimates()
    else:
        raise UsageError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    G = gamma.data if gain is None else gain.data * gamma.data
    out = G * xhat + beta.data
    if shift is not None:
        _check_rows("bn shift", shift, B, n)
        out = out + shift.data
    inputs = [x, gamma, beta]
    if gain is not None:
        _check_rows("bn gain", gain, B, n)
        inputs.append(gain)
    if shift is not None:
        inputs.append(shift)
    gm = gamma.data
    GN = gain.data if gain is not None else None

    def backward(g):
        d_g_total = g * xhat
        d_xhat = g * G
        if mode == "train":
            dx = inv / B * (B * d_xhat - d_xhat.sum(axis=0)
                            - xhat * np.sum(d_xhat * xhat, axis=0))
        else:
            dx = d_xhat * inv
        grads = [dx, (d_g_total if GN is None else d_g_total * GN).sum(axis=0), g.sum(axis=0)]
        if GN is not None:
            grads.append(d_g_total * gm)
        if shift is not None:
            grads.append(g)
        return grads

    return nc._graph_of(*inputs).record("fusion_bn", inputs, out, backward)


def _affine(h, params, name):
    return nc.add(nc.matmul(h, params[f"{name}.w"]), params[f"{name}.b"])


def fusion_fc_forward(h_in: nc.Tensor, h_c: nc.Tensor, params: dict, layer: int,
                      modulated: bool = True, slope: float = nc.DEFAULT_LEAKY_SLOPE,
                      mode: str = "train") -> nc.Tensor:
    """``leaky_relu((gain * (h_in @ W_t)) + (b_t + shift))``.

    Scaling output unit ``o`` of ``h_in @ W_t`` by ``gain[o]`` equals applying
    the Hadamard product of ``W_t`` with the gain broadcast across its input
    dimension. ``mode`` is accepted for symmetry with batch norm.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"unknown mode {mode!r}")
    p = f"stabt.{layer}"
    pre = nc.matmul(h_in, params[f"{p}.fc.w"])
    if not modulated:
        return nc.leaky_relu(nc.add(pre, params[f"{p}.fc.b"]), slope)
    gain = nc.scale(nc.sigmoid(_affine(h_c, params, f"{p}.dfc1")), 2.0)
    shift = _affine(h_c, params, f"{p}.dfc2")
    z = nc.add(nc.hadamard(gain, pre), nc.add(shift, params[f"{p}.fc.b"]))
    return nc.leaky_relu(z, slope)


def tower_forward(h: nc.Tensor, h_c: nc.Tensor, params: dict, shape: TowerShape,
                  stats: list, mode: str, slope: float = nc.DEFAULT_LEAKY_SLOPE,
                  update_stats: bool = True) -> nc.Tensor:
    """Run every layer (BN, then FC + activation); returns the last activation."""
    for l, _ in enumerate(shape.layer_dims):
        p = f"stabt.{l}"
        gain = shift = None
        if shape.modulated:
            gain = nc.scale(nc.sigmoid(_affine(h_c, params, f"{p}.dbn1")), 2.0)
            shift = _affine(h_c, params, f"{p}.dbn2")
        h = fusion_bn_forward(h, params[f"{p}.bn.gamma"], params[f"{p}.bn.beta"], mode,
                              stats[l], gain, shift, update_stats=update_stats)
        h = fusion_fc_forward(h, h_c, params, l, shape.modulated, slope, mode)
    return h


def head_logit(x_hat: nc.Tensor, params: dict) -> nc.Tensor:
    return _affine(x_hat, params, "head")


def predict(x_hat: nc.Tensor, params: dict) -> nc.Tensor:
    """Click probability ``sigmoid(x_hat @ W_o + b_o)``, shape (B, 1)."""
    return nc.sigmoid(head_logit(x_hat, params))


def bce_loss(y_hat: nc.Tensor, labels) -> nc.Tensor:
    """Mean binary cross-entropy with ``y_hat`` clamped to [1e-7, 1 - 1e-7].

    The gradient is passed straight through the clamp, so the gradient with
    respect to the head logit is ``(y_hat - y) / B`` up to rounding.
    """
    y = np.asarray(labels, dtype=float).reshape(y_hat.shape)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    p = np.clip(y_hat.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    B = p.size
    loss = np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p))

    def backward(g):
        return (float(g) * (p - y) / (p * (1.0 - p)) / B,)

    return nc._graph_of(y_hat).record("bce", (y_hat,), np.asarray(loss), backward)
