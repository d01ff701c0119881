"""Context-generated affine transform of the concatenated field vector.

A single affine meta layer maps ``z = [h_c; h_ui]`` to the entries of a
per-impression matrix ``W_stl`` (reshaped row-major to (d_out, d_in)) and a
bias ``b_stl``; the output is ``W_stl @ h_hat + b_stl``.

Low-rank mode generates factors ``U`` (d_out, r) and ``V`` (r, d_in) instead
and applies ``h_hat + U @ V @ h_hat + b_stl``; the fixed identity skip keeps
the layer an exact no-op at initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError

FULL_RANK_LIMIT = 256


@dataclass(frozen=True)
class MetaNetShape:
    d_meta: int
    d_in: int
    d_out: int
    rank: Optional[int] = None

    def __post_init__(self):
        if self.rank is None:
            if self.d_in > FULL_RANK_LIMIT:
                raise ConfigError(f"full-rank meta network limited to d_in <= "
                                  f"{FULL_RANK_LIMIT}; set a rank")
        else:
            if self.rank < 1:
                raise ConfigError("low-rank meta network needs rank >= 1")
            if self.d_out != self.d_in:
                raise ConfigError("low-rank mode keeps an identity skip and needs d_out == d_in")

    def param_shapes(self) -> dict:
        m, i, o, r = self.d_meta, self.d_in, self.d_out, self.rank
        shapes = {"ststl.w_b": (m, o), "ststl.b_b": (o,)}
        if r is None:
            shapes.update({"ststl.w_w": (m, o * i), "ststl.b_w": (o * i,)})
        else:
            shapes.update({"ststl.w_u": (m, o * r), "ststl.b_u": (o * r,),
                           "ststl.w_v": (m, r * i), "ststl.b_v": (r * i,)})
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict:
        """Identity initialisation: the generated transform starts as ``h* = h_hat``."""
        m, i, o, r = self.d_meta, self.d_in, self.d_out, self.rank
        p = {"ststl.w_b": np.zeros((m, o)), "ststl.b_b": np.zeros(o)}
        if r is None:
            p["ststl.w_w"] = np.zeros((m, o * i))
            p["ststl.b_w"] = np.eye(o, i).reshape(-1)
        else:
            # V starts at zero so U @ V vanishes; U is random so V still receives gradient
            p["ststl.w_u"] = rng.normal(0.0, 1.0 / np.sqrt(m), (m, o * r))
            p["ststl.b_u"] = rng.normal(0.0, 1.0 / np.sqrt(r), o * r)
            p["ststl.w_v"] = np.zeros((m, r * i))
            p["ststl.b_v"] = np.zeros(r * i)
        return p


@dataclass
class DynamicAffine:
    """Generated per-impression parameters. ``factors`` is set in low-rank mode."""

    weight: Optional[nc.Tensor]
    bias: nc.Tensor
    factors: Optional[tuple] = None


def meta_generate(h_c: nc.Tensor, h_ui: nc.Tensor, params: dict,
                  shape: MetaNetShape) -> DynamicAffine:
    z = nc.concat([h_c, h_ui], axis=1)
    if z.shape[1] != shape.d_meta:
        raise DimensionError(f"meta input width {z.shape[1]} != {shape.d_meta}")
    B = z.shape[0]
    bias = nc.add(nc.matmul(z, params["ststl.w_b"]), params["ststl.b_b"])
    if shape.rank is None:
        flat = nc.add(nc.matmul(z, params["ststl.w_w"]), params["ststl.b_w"])
        return DynamicAffine(nc.reshape(flat, (B, shape.d_out, shape.d_in)), bias)
    r = shape.rank
    u = nc.reshape(nc.add(nc.matmul(z, params["ststl.w_u"]), params["ststl.b_u"]),
                   (B, shape.d_out, r))
    v = nc.reshape(nc.add(nc.matmul(z, params["ststl.w_v"]), params["ststl.b_v"]),
                   (B, r, shape.d_in))
    return DynamicAffine(None, bias, (u, v))


def transform(h_hat: nc.Tensor, dyn: DynamicAffine) -> nc.Tensor:
    """Apply the generated affine map to ``h_hat`` (B, d_in) -> (B, d_out)."""
    if dyn.factors is None:
        if dyn.weight.shape[2] != h_hat.shape[1]:
            raise DimensionError(f"W_stl {dyn.weight.shape} cannot act on {h_hat.shape}")
        return nc.add(nc.batched_matvec(dyn.weight, h_hat), dyn.bias)
    u, v = dyn.factors
    if v.shape[2] != h_hat.shape[1]:
        raise DimensionError(f"V {v.shape} cannot act on {h_hat.shape}")
    low = nc.batched_matvec(u, nc.batched_matvec(v, h_hat))
    return nc.add(nc.add(h_hat, low), dyn.bias)


def static_affine_shapes(d_in: int, d_out: int) -> dict:
    return {"static_affine.w": (d_in, d_out), "static_affine.b": (d_out,)}


def static_affine_init(d_in: int, d_out: int) -> dict:
    return {"static_affine.w": np.eye(d_in, d_out), "static_affine.b": np.zeros(d_out)}


def static_transform(h_hat: nc.Tensor, params: dict) -> nc.Tensor:
    """Context-free replacement used when the meta network is ablated."""
    return nc.add(nc.matmul(h_hat, params["static_affine.w"]), params["static_affine.b"])
