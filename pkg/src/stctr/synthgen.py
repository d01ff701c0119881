"""Synthetic spatiotemporal click logs with planted context effects.

The click probability of user ``u`` on item ``v`` in time period ``t`` and
city ``c`` is

    sigmoid(b[t, c] + A * sum_f phi[t, f] * s_f(u, v, t))

with four bounded affinities in [-1, 1], one per non-context field:

* user      ``s = pi[u]``                       (user click propensity)
* behavior  ``s = tanh(sqrt(d) * <tau[u, t], z[v]>)``  (period-specific taste)
* item      ``s = q[v]``                        (item quality)
* combine   ``s = M[profile[u], category[v]]``  (profile x category affinity)

``b`` is a per-(period, city) bias and ``phi`` (periods x 4) states how much
each field matters in each period. Behaviour sequences are each user's own
earlier clicks, so filtering them by period exposes ``tau[u, t]``.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import features as ft
from .errors import ConfigError, StorageError

PLANTED_FIELDS = (ft.USER, ft.BEHAVIOR, ft.ITEM, ft.COMBINE)
PERIOD_NAMES = ("breakfast", "lunch", "afternoon_tea", "dinner", "night")
PERIOD_HOURS = ((6, 7, 8, 9), (10, 11, 12, 13), (14, 15, 16), (17, 18, 19, 20),
                (21, 22, 23, 0, 1, 2, 3, 4, 5))
BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"

# rows: periods; columns: user, behavior, item, combine
DEFAULT_PHI = (
    (0.2, 0.4, 1.0, 0.6),
    (1.0, 0.7, 0.1, 0.4),
    (0.3, 0.1, 0.6, 1.0),
    (0.6, 1.0, 0.1, 0.4),
    (0.1, 0.4, 1.0, 0.7),
)


@dataclass(frozen=True)
class GenConfig:
    n_time_periods: int = 5
    n_cities: int = 8
    n_users: int = 2000
    n_items: int = 500
    n_categories: int = 20
    n_brands: int = 40
    n_profiles: int = 8
    latent_dim: int = 8
    bias_amp: float = 1.0
    field_importance: Optional[tuple] = None
    affinity_scale: float = 1.5
    impressions_per_request: int = 10
    n_requests: int = 100_000
    max_behaviors: int = 20
    taste_shift: float = 1.0
    city_zipf: float = 1.2
    meal_peak: float = 3.0
    tea_weight: float = 1.5
    home_prob: float = 0.9
    geohash_buckets: int = 64
    embedding_dim: int = 8
    seed: int = 2023

    def __post_init__(self):
        if self.n_time_periods < 2 or self.n_cities < 2:
            raise ConfigError("need at least two time periods and two cities")
        for name in ("n_users", "n_items", "n_categories", "n_brands", "n_profiles",
                     "latent_dim", "impressions_per_request", "n_requests"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.impressions_per_request > self.n_items:
            raise ConfigError("cannot show more distinct items per request than exist")
        if self.bias_amp < 0 or self.affinity_scale < 0:
            raise ConfigError("amplitudes must be non-negative")
        if not 0.0 <= self.home_prob <= 1.0:
            raise ConfigError("home_prob must lie in [0, 1]")
        phi = self.phi_matrix()
        object.__setattr__(self, "field_importance", tuple(tuple(float(x) for x in row)
                                                           for row in phi))

    def phi_matrix(self) -> np.ndarray:
        if self.field_importance is None:
            if self.n_time_periods != len(DEFAULT_PHI):
                raise ConfigError("no default field importance for this many periods")
            phi = np.array(DEFAULT_PHI, dtype=float)
        else:
            phi = np.array(self.field_importance, dtype=float)
        if phi.shape != (self.n_time_periods, len(PLANTED_FIELDS)):
            raise ConfigError(f"field importance must be {self.n_time_periods} x "
                              f"{len(PLANTED_FIELDS)}, got {phi.shape}")
        if (phi < 0).any():
            raise ConfigError("field importance must be non-negative")
        peak = phi.max(axis=1, keepdims=True)
        return np.where(peak > 0, phi / np.where(peak > 0, peak, 1.0), 0.0)

    def period_weights(self) -> np.ndarray:
        if self.n_time_periods == len(PERIOD_NAMES):
            w = np.array([1.0, self.meal_peak, self.tea_weight, self.meal_peak, 1.0])
        else:
            w = np.ones(self.n_time_periods)
        return w / w.sum()

    def city_weights(self) -> np.ndarray:
        w = 1.0 / np.arange(1, self.n_cities + 1) ** self.city_zipf
        return w / w.sum()

    def period_hours(self, t: int) -> tuple:
        if self.n_time_periods == len(PERIOD_NAMES):
            return PERIOD_HOURS[t]
        edges = np.linspace(0, 24, self.n_time_periods + 1).astype(int)
        return tuple(range(edges[t], edges[t + 1])) or (edges[t] % 24,)

    def vocabulary(self) -> ft.Vocabulary:
        return ft.standard_vocabulary(
            self.n_users, self.n_profiles, self.n_items, self.n_categories, self.n_brands,
            self.n_time_periods, self.n_cities, dim=self.embedding_dim,
            geohash_buckets=self.geohash_buckets)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field_importance"] = [list(r) for r in self.field_importance]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator keys {sorted(unknown)}")
        d = dict(d)
        if d.get("field_importance") is not None:
            d["field_importance"] = tuple(tuple(r) for r in d["field_importance"])
        return cls(**d)


@dataclass
class GroundTruth:
    bias: np.ndarray            # (T, C)
    phi: np.ndarray             # (T, 4)
    propensity: np.ndarray      # (U,)
    taste: np.ndarray           # (U, T, d), unit rows
    user_profile: np.ndarray    # (U,)
    user_city: np.ndarray       # (U,)
    user_home: np.ndarray       # (U,) geohash strings
    item_latent: np.ndarray     # (I, d), unit rows
    item_quality: np.ndarray    # (I,)
    item_category: np.ndarray   # (I,)
    item_brand: np.ndarray      # (I,)
    combine: np.ndarray         # (P, n_categories)
    affinity_scale: float

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        kw = {}
        for k, v in d.items():
            if k == "affinity_scale":
                kw[k] = float(v)
            elif k == "user_home":
                kw[k] = np.array(v, dtype=f"U{ft.GEOHASH_WIDTH}")
            else:
                kw[k] = np.array(v)
        return cls(**kw)


def make_truth(cfg: GenConfig) -> GroundTruth:
    rng = np.random.default_rng([cfg.seed, 0])
    T, C, U, I, d = cfg.n_time_periods, cfg.n_cities, cfg.n_users, cfg.n_items, cfg.latent_dim

    def unit(x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    bias = rng.uniform(-cfg.bias_amp, cfg.bias_amp, (T, C))
    propensity = rng.uniform(-1.0, 1.0, U)
    base = rng.normal(size=(U, 1, d))
    taste = unit(base + cfg.taste_shift * rng.normal(size=(U, T, d)))
    user_profile = rng.integers(0, cfg.n_profiles, U)
    user_city = rng.choice(C, U, p=cfg.city_weights())
    user_city[:min(C, U)] = np.arange(min(C, U))
    prefixes = []
    while len(prefixes) < C:
        p = "".join(rng.choice(list(BASE32), 3))
        if p not in prefixes:
            prefixes.append(p)
    user_home = np.array([prefixes[c] + "".join(rng.choice(list(BASE32), 3))
                          for c in user_city], dtype=f"U{ft.GEOHASH_WIDTH}")
    item_latent = unit(rng.normal(size=(I, d)))
    item_quality = rng.uniform(-1.0, 1.0, I)
    item_category = rng.integers(0, cfg.n_categories, I)
    item_brand = rng.integers(0, cfg.n_brands, I)
    combine = rng.uniform(-1.0, 1.0, (cfg.n_profiles, cfg.n_categories))
    return GroundTruth(bias, cfg.phi_matrix(), propensity, taste, user_profile, user_city,
                       user_home, item_latent, item_quality, item_category, item_brand,
                       combine, cfg.affinity_scale)


def field_affinities(u, v, t, truth: GroundTruth) -> np.ndarray:
    """Bounded per-field scores s_f, shape (..., 4) in field order user/behavior/item/combine."""
    u, v, t = np.broadcast_arrays(np.asarray(u), np.asarray(v), np.asarray(t))
    d = truth.item_latent.shape[1]
    dot = np.sum(truth.taste[u, t] * truth.item_latent[v], axis=-1)
    return np.stack([
        truth.propensity[u],
        np.tanh(np.sqrt(d) * dot),
        truth.item_quality[v],
        truth.combine[truth.user_profile[u], truth.item_category[v]],
    ], axis=-1)


def field_contributions(u, v, t, truth: GroundTruth, phi_row=None) -> np.ndarray:
    """Per-field logit contributions ``A * phi[t, f] * s_f``; ``phi_row`` overrides phi[t]."""
    s = field_affinities(u, v, t, truth)
    phi = truth.phi[np.asarray(t)] if phi_row is None else np.asarray(phi_row)
    return truth.affinity_scale * phi * s


def planted_ctr(u, v, t, c, truth: GroundTruth) -> np.ndarray:
    logit = truth.bias[t, c] + field_contributions(u, v, t, truth).sum(axis=-1)
    e = np.exp(-np.abs(logit))
    return np.where(logit >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class SyntheticData:
    data: ft.ImpressionSet
    truth: GroundTruth
    vocab: ft.Vocabulary
    planted_p: np.ndarray  # per-impression click probability
    user: np.ndarray
    item: np.ndarray


def generate(cfg: GenConfig) -> SyntheticData:
    """Sample the whole log in memory; deterministic in ``cfg``."""
    truth = make_truth(cfg)
    vocab = cfg.vocabulary()
    R, k, L = cfg.n_requests, cfg.impressions_per_request, cfg.max_behaviors
    rng = np.random.default_rng([cfg.seed, 1])

    city = rng.choice(cfg.n_cities, R, p=cfg.city_weights())
    period = rng.choice(cfg.n_time_periods, R, p=cfg.period_weights())
    city_users = [np.flatnonzero(truth.user_city == c) for c in range(cfg.n_cities)]
    pick = rng.random(R)
    user = np.array([city_users[c][int(x * len(city_users[c]))] for c, x in zip(city, pick)])
    hour_pick = rng.random(R)
    hour = np.array([cfg.period_hours(t)[int(x * len(cfg.period_hours(t)))]
                     for t, x in zip(period, hour_pick)])
    at_home = rng.random(R) < cfg.home_prob
    tails = rng.integers(0, len(BASE32), (R, 3))
    geohash = np.empty(R, dtype=f"U{ft.GEOHASH_WIDTH}")
    for r in range(R):
        home = truth.user_home[user[r]]
        if at_home[r]:
            geohash[r] = home[:5] + BASE32[tails[r, 0]]
        else:
            geohash[r] = home[:3] + "".join(BASE32[x] for x in tails[r])

    n = R * k
    items = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    probs = np.empty(n)
    bt = ft.BehaviorTable.empty(R, L, 2)
    history = [deque(maxlen=max(L, 1)) for _ in range(cfg.n_users)]
    for r in range(R):
        # counter-based stream per request: draws do not depend on other requests
        req_rng = np.random.default_rng([cfg.seed, 2, r])
        cand = req_rng.choice(cfg.n_items, k, replace=False)
        u, t, c = user[r], period[r], city[r]
        p = planted_ctr(u, cand, t, c, truth)
        y = (req_rng.random(k) < p).astype(np.int64)
        sl = slice(r * k, (r + 1) * k)
        items[sl], labels[sl], probs[sl] = cand, y, p
        hist = history[u]
        m = len(hist) if L > 0 else 0
        if m:
            ev = np.array(hist, dtype=object)
            bt.ids[r, :m, 0] = ev[:, 0].astype(np.int64)
            bt.ids[r, :m, 1] = ev[:, 1].astype(np.int64)
            bt.time_period[r, :m] = ev[:, 2].astype(np.int64)
            bt.hour[r, :m] = ev[:, 3].astype(np.int64)
            bt.city[r, :m] = ev[:, 4].astype(np.int64)
            bt.geohash[r, :m] = ev[:, 5].astype(str)
            bt.length[r] = m
        for v in cand[y == 1]:
            hist.append((v + 1, truth.item_category[v] + 1, t, hour[r], c, geohash[r]))

    req_of = np.repeat(np.arange(R), k)
    u_imp = user[req_of]
    prof = truth.user_profile[u_imp]
    cat = truth.item_category[items]
    data = ft.ImpressionSet(
        request_id=req_of.copy(),
        ids={ft.USER: np.stack([u_imp + 1, prof + 1], axis=1),
             ft.ITEM: np.stack([items + 1, cat + 1, truth.item_brand[items] + 1], axis=1),
             ft.COMBINE: (prof * cfg.n_categories + cat + 1)[:, None]},
        time_period=period[req_of], hour=hour[req_of], city=city[req_of],
        geohash=geohash[req_of], beh_row=req_of.copy(), behaviors=bt, label=labels)
    return SyntheticData(data, truth, vocab, probs, u_imp, items)


def ctr_table(synth: SyntheticData) -> list:
    """Per-(period, city) exposure and CTR: empirical, planted mean and sigmoid(bias)."""
    d, truth = synth.data, synth.truth
    T, C = truth.bias.shape
    cell = d.time_period * C + d.city
    count = np.bincount(cell, minlength=T * C)
    clicks = np.bincount(cell, weights=d.label, minlength=T * C)
    psum = np.bincount(cell, weights=synth.planted_p, minlength=T * C)
    rows = []
    for t in range(T):
        for c in range(C):
            i = t * C + c
            n = int(count[i])
            rows.append({"time_period": t, "city": c, "impressions": n,
                         "clicks": int(clicks[i]),
                         "empirical_ctr": float(clicks[i] / n) if n else float("nan"),
                         "planted_mean_ctr": float(psum[i] / n) if n else float("nan"),
                         "bias_ctr": float(1.0 / (1.0 + np.exp(-truth.bias[t, c])))})
    return rows


def write_outputs(synth: SyntheticData, cfg: GenConfig, out_dir) -> dict:
    """Write dataset.jsonl, truth.json, stats.csv and vocab.json into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"dataset": out / "dataset.jsonl", "truth": out / "truth.json",
                 "stats": out / "stats.csv", "vocab": out / "vocab.json"}
        ft.write_jsonl(paths["dataset"], synth.data, synth.vocab)
        truth = synth.truth.to_dict()
        truth["generator"] = cfg.to_dict()
        paths["truth"].write_text(json.dumps(truth, sort_keys=True) + "\n")
        synth.vocab.save(paths["vocab"])
        rows = ctr_table(synth)
        with open(paths["stats"], "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    except OSError as exc:
        raise StorageError(f"cannot write generator output to {out}: {exc}") from exc
    return paths


def load_truth(path) -> GroundTruth:
    d = json.loads(Path(path).read_text())
    d.pop("generator", None)
    return GroundTruth.from_dict(d)
