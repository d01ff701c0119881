"""Model assembly: embeddings -> field gates -> meta transform -> modulated tower -> head.

Each of the three context-adaptive stages can be switched off, in which case
it is replaced by a static counterpart with identical tensor shapes:
gates become alpha == 1, the meta transform becomes a trainable affine layer,
and the tower drops its modulation nets.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import numcore as nc
from . import stabt, stael, ststl
from .errors import ConfigError
from .features import (BEHAVIOR, CONTEXT, ImpressionSet, Vocabulary, embed_fields,
                       filter_behaviors)

VARIANTS = {
    "full": dict(use_stael=True, use_ststl=True, use_stabt_modulation=True),
    "no_stael": dict(use_stael=False, use_ststl=True, use_stabt_modulation=True),
    "no_ststl": dict(use_stael=True, use_ststl=False, use_stabt_modulation=True),
    "no_stabt": dict(use_stael=True, use_ststl=True, use_stabt_modulation=False),
    "static": dict(use_stael=False, use_ststl=False, use_stabt_modulation=False),
}


@dataclass(frozen=True)
class ModelConfig:
    vocab: dict
    tower_widths: tuple = (256, 128, 64)
    ststl_d_out: Optional[int] = None
    ststl_rank: Optional[int] = None
    use_stael: bool = True
    use_ststl: bool = True
    use_stabt_modulation: bool = True
    leaky_slope: float = nc.DEFAULT_LEAKY_SLOPE
    geohash_prefix: int = 4
    embed_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tower_widths", tuple(int(w) for w in self.tower_widths))
        if not self.tower_widths or min(self.tower_widths) < 1:
            raise ConfigError("tower needs at least one layer of positive width")
        if self.geohash_prefix < 1:
            raise ConfigError("geohash prefix length must be >= 1")
        if self.leaky_slope < 0:
            raise ConfigError("leaky slope must be non-negative")
        d_in = self.d_in
        if self.ststl_d_out is not None and self.ststl_d_out != d_in:
            # the ablation swap and the identity start both rely on a square transform
            raise ConfigError("ststl_d_out must equal the concatenated field width")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.from_dict(self.vocab)

    @property
    def d_in(self) -> int:
        v = self.vocabulary()
        return sum(v.field_width(f) for f in v.fields)

    @property
    def d_context(self) -> int:
        return self.vocabulary().field_width(CONTEXT)

    def variant(self, name: str) -> "ModelConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        return replace(self, **VARIANTS[name])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tower_widths"] = list(self.tower_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def model_notes(cfg: ModelConfig) -> dict:
    """Human-readable description of the modelling choices behind a run."""
    if not cfg.use_ststl:
        transform = "static affine h* = W h + b, identity start"
    elif cfg.ststl_rank is None:
        transform = "meta-generated full matrix h* = W(ctx) h + b(ctx), identity start"
    else:
        transform = (f"meta-generated rank-{cfg.ststl_rank} update with identity skip "
                     "h* = h + U(ctx) V(ctx) h + b(ctx); V starts at zero")
    tower = ("context-modulated: weight and gamma gains use 2*sigmoid (1 at zero init), "
             "bias and beta shifts use identity (0 at zero init)"
             if cfg.use_stabt_modulation else "plain FC + BN")
    return {"field_gates": "2*sigmoid per field, context ungated" if cfg.use_stael else "off",
            "semantic_transform": transform, "tower": tower,
            "tower_widths": list(cfg.tower_widths), "leaky_slope": cfg.leaky_slope}


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name): shared parameters of two
    variants receive identical initial values."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class ForwardResult:
    logit: nc.Tensor
    prob: nc.Tensor
    alphas: dict
    h_hat: nc.Tensor
    h_star: nc.Tensor
    tower_out: nc.Tensor
    h_c: nc.Tensor
    h_ui: nc.Tensor


class CTRModel:
    """Parameters, BN statistics and the forward pass for one configuration."""

    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None, stats=None):
        self.cfg = cfg
        self.vocab = cfg.vocabulary()
        v = self.vocab
        self.meta_shape = ststl.MetaNetShape(
            d_meta=cfg.d_context + v.behavior_width, d_in=cfg.d_in,
            d_out=cfg.ststl_d_out or cfg.d_in, rank=cfg.ststl_rank)
        self.tower_shape = stabt.TowerShape(self.meta_shape.d_out, cfg.tower_widths,
                                            cfg.d_context, modulated=cfg.use_stabt_modulation)
        self.params = params if params is not None else self.init_params()
        expected = self.param_shapes()
        if set(self.params) != set(expected):
            raise ConfigError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ConfigError(f"parameter {name} has shape {self.params[name].shape}, "
                                  f"expected {shape}")
        self.stats = stats if stats is not None else self.tower_shape.new_stats()

    # -- parameters

    def param_shapes(self) -> dict:
        cfg, v = self.cfg, self.vocab
        shapes = {"embedding": (v.dim, v.n_features)}
        if cfg.use_stael:
            widths = {f: v.field_width(f) for f in v.gated_fields}
            shapes.update(stael.gate_param_shapes(widths, cfg.d_context))
        if cfg.use_ststl:
            shapes.update(self.meta_shape.param_shapes())
        else:
            shapes.update(ststl.static_affine_shapes(self.meta_shape.d_in, self.meta_shape.d_out))
        shapes.update(self.tower_shape.param_shapes())
        return shapes

    def init_params(self) -> dict:
        cfg = self.cfg
        p = {}
        p["embedding"] = param_rng(cfg.seed, "embedding").normal(
            0.0, cfg.embed_scale, (self.vocab.dim, self.vocab.n_features))
        if cfg.use_stael:
            for name, shape in stael.gate_param_shapes(
                    {f: self.vocab.field_width(f) for f in self.vocab.gated_fields},
                    cfg.d_context).items():
                p[name] = np.zeros(shape)
        if cfg.use_ststl:
            p.update(self.meta_shape.init_params(param_rng(cfg.seed, "ststl")))
        else:
            p.update(ststl.static_affine_init(self.meta_shape.d_in, self.meta_shape.d_out))
        p.update(self.tower_shape.init_params(lambda n: param_rng(cfg.seed, n)))
        return p

    # -- forward

    def forward(self, graph: nc.Graph, leaves: dict, batch: ImpressionSet, mode: str,
                update_stats: bool = True, stats=None) -> ForwardResult:
        cfg, v = self.cfg, self.vocab
        stats = self.stats if stats is None else stats
        table = leaves["embedding"]
        xs, x_c = embed_fields(batch, table, v)
        h_c = x_c
        h_ui = filter_behaviors(batch, table, v, cfg.geohash_prefix)
        gate_params = leaves if cfg.use_stael else None
        _, alphas, h_hat = stael.apply_gates(xs, x_c, gate_params, v.fields)
        if cfg.use_ststl:
            dyn = ststl.meta_generate(h_c, h_ui, leaves, self.meta_shape)
            h_star = ststl.transform(h_hat, dyn)
        else:
            h_star = ststl.static_transform(h_hat, leaves)
        tower_out = stabt.tower_forward(h_star, h_c, leaves, self.tower_shape, stats, mode,
                                        cfg.leaky_slope, update_stats=update_stats)
        logit = stabt.head_logit(tower_out, leaves)
        prob = nc.sigmoid(logit)
        return ForwardResult(logit, prob, alphas, h_hat, h_star, tower_out, h_c, h_ui)

    def run(self, batch: ImpressionSet, mode: str = "eval", grad: bool = False,
            update_stats: bool = False, stats=None):
        """Build a graph over the current parameters and run the forward pass."""
        graph = nc.Graph(grad_enabled=grad)
        leaves = {name: graph.parameter(name, value) for name, value in self.params.items()}
        return graph, self.forward(graph, leaves, batch, mode, update_stats, stats)

    def predict_proba(self, batch: ImpressionSet, chunk: int = 8192) -> np.ndarray:
        out = []
        for start in range(0, len(batch), chunk):
            part = batch.take(np.arange(start, min(start + chunk, len(batch))))
            _, res = self.run(part, mode="eval")
            out.append(res.prob.data[:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    def gate_log(self, batch: ImpressionSet, chunk: int = 8192) -> dict:
        """Per-impression gate weights, field -> (n,)."""
        logs = {f: [] for f in self.vocab.gated_fields}
        for start in range(0, len(batch), chunk):
            part = batch.take(np.arange(start, min(start + chunk, len(batch))))
            _, res = self.run(part, mode="eval")
            for f in logs:
                logs[f].append(res.alphas[f].data[:, 0])
        return {f: np.concatenate(v) for f, v in logs.items()}
