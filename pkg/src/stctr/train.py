"""Training loop: seeded shuffling, Adagrad with linear warm-up, periodic evaluation."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import metrics
from . import numcore as nc
from .errors import ConfigError, NumericError
from .features import ImpressionSet
from .model import CTRModel, ModelConfig
from .stabt import bce_loss

logger = logging.getLogger(__name__)

OPT_EPS = 1e-8
CURVE_COLUMNS = ("step", "lr", "train_loss", "eval_auc", "eval_tauc", "eval_cauc",
                 "eval_logloss")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    lr_start: float = 0.001
    lr_peak: float = 0.012
    warmup_steps: int = 2000
    total_steps: int = 20000
    acc_init: float = 0.1
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 (batch norm)")
        if not 0 < self.lr_start <= self.lr_peak:
            raise ConfigError("need 0 < lr_start <= lr_peak")
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps cannot exceed total_steps")
        if self.acc_init < 0 or self.eval_every < 0:
            raise ConfigError("acc_init and eval_every must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, tcfg: TrainConfig) -> float:
    """Linear ramp from lr_start to lr_peak over the warm-up, then flat."""
    if step >= tcfg.warmup_steps:
        return tcfg.lr_peak
    return tcfg.lr_start + (tcfg.lr_peak - tcfg.lr_start) * (step / tcfg.warmup_steps)


def init_accumulators(params: dict, acc_init: float) -> dict:
    return {k: np.full(v.shape, float(acc_init)) for k, v in params.items()}


def adagrad_step(params: dict, grads: dict, acc: dict, lr: float,
                 eps: float = OPT_EPS) -> bool:
    """Update ``params`` and ``acc`` (rebinding dict entries). Returns False and
    leaves both untouched when any gradient is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            logger.warning("non-finite gradient for %s; step skipped", name)
            return False
    for name, g in grads.items():
        a = acc[name] + g * g
        acc[name] = a
        params[name] = params[name] - lr * g / np.sqrt(a + eps)
    return True


def split_by_request(data: ImpressionSet, test_fraction: float = 0.2, seed: int = 0):
    """Deterministic train/test split that keeps every request on one side."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    req = np.unique(data.request_id)
    rng = np.random.default_rng([seed, zlib.crc32(b"split")])
    test_req = rng.random(req.size) < test_fraction
    is_test = np.isin(data.request_id, req[test_req])
    return data.take(np.flatnonzero(~is_test)), data.take(np.flatnonzero(is_test))


def score_records(model: CTRModel, data: ImpressionSet) -> metrics.ScoredRecords:
    return metrics.ScoredRecords(
        score=model.predict_proba(data), label=data.label, time_period=data.time_period,
        city=data.city, request_id=data.request_id, item_id=data.item_key)


def evaluate(model: CTRModel, data: ImpressionSet) -> metrics.MetricReport:
    return metrics.evaluate_records(score_records(model, data))


@dataclass
class TrainState:
    model: CTRModel
    acc: dict
    step: int = 0
    curve: list = field(default_factory=list)
    skipped_steps: int = 0


def batches(n: int, tcfg: TrainConfig):
    """Endless stream of index batches, reshuffled each epoch from (seed, epoch)."""
    epoch = 0
    while True:
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            if idx.size >= 2:
                yield np.sort(idx)
        epoch += 1


def train(model_cfg: ModelConfig, tcfg: TrainConfig, data: ImpressionSet,
          eval_data: Optional[ImpressionSet] = None, state: Optional[TrainState] = None,
          curve_path=None) -> TrainState:
    """Run ``tcfg.total_steps`` optimiser steps (continuing from ``state``)."""
    if len(data) < 2:
        raise ConfigError("training needs at least two impressions")
    if state is None:
        model = CTRModel(model_cfg)
        state = TrainState(model, init_accumulators(model.params, tcfg.acc_init))
    model = state.model
    stream = batches(len(data), tcfg)
    for _ in range(state.step):
        next(stream)  # resume at the same position in the shuffle
    losses = []
    while state.step < tcfg.total_steps:
        idx = next(stream)
        batch = data.take(idx)
        lr = lr_at(state.step, tcfg)
        try:
            graph, res = model.run(batch, mode="train", grad=True, update_stats=True)
            loss = bce_loss(res.prob, batch.label)
            grads = nc.backward(graph, loss)
            applied = adagrad_step(model.params, grads, state.acc, lr)
        except NumericError as exc:
            logger.warning("step %d aborted: %s", state.step, exc)
            applied = False
        if applied:
            losses.append(float(loss.data))
        else:
            state.skipped_steps += 1
        state.step += 1
        if tcfg.eval_every and state.step % tcfg.eval_every == 0 \
                and state.step < tcfg.total_steps:
            state.curve.append(_curve_row(state, tcfg, losses, eval_data))
            losses = []
    state.curve.append(_curve_row(state, tcfg, losses, eval_data))
    if curve_path is not None:
        write_curve(curve_path, state.curve)
    return state


def _curve_row(state: TrainState, tcfg: TrainConfig, losses: list, eval_data) -> dict:
    row = {"step": state.step, "lr": lr_at(max(state.step - 1, 0), tcfg),
           "train_loss": float(np.mean(losses)) if losses else None}
    rep = evaluate(state.model, eval_data) if eval_data is not None else None
    for key in ("auc", "tauc", "cauc", "logloss"):
        row[f"eval_{key}"] = getattr(rep, key) if rep is not None else None
    return row


def write_curve(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float)
                        else row[c] for c in CURVE_COLUMNS])
