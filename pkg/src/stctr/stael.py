"""Context-aware field gates.

Each non-context field ``x_j`` gets one scalar weight per impression,
``alpha_j = 2 * sigmoid([x_j; x_c] @ w_j + b_j)``, which lies in (0, 2), and is
rescaled to ``h_j = alpha_j * x_j``. The context embedding itself enters every
gate but is passed through ungated.
"""

from __future__ import annotations

import csv
from typing import Optional

import numpy as np

from . import numcore as nc
from .errors import DimensionError
from .features import CONTEXT


def gate_param_shapes(field_widths: dict, context_width: int) -> dict:
    shapes = {}
    for name, width in field_widths.items():
        shapes[f"stael.{name}.w"] = (width + context_width, 1)
        shapes[f"stael.{name}.b"] = (1,)
    return shapes


def gate_weight(x_j: nc.Tensor, x_c: nc.Tensor, w: nc.Tensor, b: nc.Tensor) -> nc.Tensor:
    """Gate weight alpha_j, shape (B, 1)."""
    if w.shape != (x_j.shape[1] + x_c.shape[1], 1):
        raise DimensionError(f"gate weight shape {w.shape} does not fit inputs "
                             f"{x_j.shape}, {x_c.shape}")
    logit = nc.add(nc.matmul(nc.concat([x_j, x_c], axis=1), w), b)
    return nc.scale(nc.sigmoid(logit), 2.0)


def apply_gates(fields: dict, x_c: nc.Tensor, params: Optional[dict], order):
    """Gate every field and concatenate in ``order``.

    ``order`` lists all fields including the context one, which is inserted
    ungated. With ``params=None`` the layer is ablated (alpha == 1) and the
    fields pass through untouched.

    Returns ``(h, alphas, h_hat)``: gated fields, the (B, 1) gate tensors
    (empty when ablated) and their concatenation.
    """
    h, alphas, parts = {}, {}, []
    for name in order:
        if name == CONTEXT:
            parts.append(x_c)
            continue
        x_j = fields[name]
        if params is None:
            h[name] = x_j
        else:
            a = gate_weight(x_j, x_c, params[f"stael.{name}.w"], params[f"stael.{name}.b"])
            alphas[name] = a
            h[name] = nc.scale_rows(x_j, a)
        parts.append(h[name])
    return h, alphas, nc.concat(parts, axis=1)


def gate_heatmap(alpha_log: dict, keys: np.ndarray) -> list:
    """Mean gate weight per (context key, field).

    ``alpha_log`` maps field name -> per-impression alpha (n,); ``keys`` holds
    the context key of each impression. Rows come back sorted by key, then in
    the field order of ``alpha_log``, as ``(key, field, mean_alpha, count)``.
    """
    keys = np.asarray(keys)
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = {name: np.bincount(inv, weights=np.asarray(v, dtype=float), minlength=len(uniq))
            for name, v in alpha_log.items()}
    rows = []
    for g, key in enumerate(uniq):
        for name in alpha_log:
            rows.append((key.item(), name, float(sums[name][g] / counts[g]), int(counts[g])))
    return rows


def write_heatmap_csv(path, tables: dict) -> None:
    """``tables`` maps a context kind ("time_period", "city") to gate_heatmap rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context_key", "field_name", "mean_alpha", "count"])
        for kind, rows in tables.items():
            for key, name, mean, count in rows:
                w.writerow([f"{kind}:{key}", name, repr(mean), count])
