"""Finite-difference check of the whole model graph on a tiny configuration."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .model import CTRModel, ModelConfig
from .stabt import bce_loss
from .synthgen import GenConfig, generate


def tiny_setup(seed: int = 0, batch_size: int = 8, dim: int = 2, widths=(4, 3),
               rank=None, variant: str = "full"):
    """A small vocabulary, a batch with behaviour history and a model whose
    parameters are all random (so no gate, meta or modulation net sits at its
    neutral zero start)."""
    gcfg = GenConfig(n_users=6, n_items=12, n_categories=3, n_brands=3, n_profiles=2,
                     n_cities=2, n_requests=max(4 * batch_size, 16), impressions_per_request=2,
                     max_behaviors=3, embedding_dim=dim, geohash_buckets=4, seed=seed)
    synth = generate(gcfg)
    data = synth.data
    # prefer rows that have behaviour history so the pooling path is exercised
    has_hist = data.behaviors.length[data.beh_row] > 0
    order = np.argsort(~has_hist, kind="stable")[:batch_size]
    batch = data.take(np.sort(order))
    cfg = ModelConfig(vocab=synth.vocab.to_dict(), tower_widths=tuple(widths), ststl_rank=rank,
                      seed=seed).variant(variant)
    model = CTRModel(cfg)
    rng = np.random.default_rng([seed, 7])
    params = {k: v + rng.normal(0.0, 0.3, v.shape) for k, v in model.params.items()}
    return model, params, batch


def model_loss_builder(model: CTRModel, batch, mode: str = "train"):
    """Loss closure for :func:`numcore.grad_check`; batch-norm statistics are not updated."""
    stats = [s.copy() for s in model.stats]

    def build(graph, leaves):
        res = model.forward(graph, leaves, batch, mode, update_stats=False, stats=stats)
        return bce_loss(res.prob, batch.label)

    return build


def full_model_grad_check(seed: int = 0, batch_size: int = 8, dim: int = 2, eps: float = 1e-4,
                          rank=None, variant: str = "full") -> nc.GradCheckReport:
    model, params, batch = tiny_setup(seed, batch_size, dim, rank=rank, variant=variant)
    return nc.grad_check(model_loss_builder(model, batch), params, eps)
