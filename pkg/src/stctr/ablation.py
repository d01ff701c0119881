"""Ablation runner and gate-weight heatmap export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import stael
from .checkpoint import Checkpoint
from .errors import UsageError
from .features import ImpressionSet
from .model import VARIANTS, ModelConfig
from .train import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ("variant", "AUC", "TAUC", "CAUC", "Logloss", "repeats")
TABLE_ORDER = ("full", "no_stael", "no_ststl", "no_stabt", "static")


@dataclass
class AblationResult:
    # variant -> list of per-repeat dicts with auc/tauc/cauc/logloss
    runs: dict = field(default_factory=dict)
    # variant -> list of trained models, filled only when requested
    models: dict = field(default_factory=dict)

    def mean(self, variant: str, metric: str) -> float:
        vals = [r[metric] for r in self.runs[variant] if r[metric] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list:
        out = []
        for v in self.runs:
            out.append({"variant": v, "AUC": self.mean(v, "auc"), "TAUC": self.mean(v, "tauc"),
                        "CAUC": self.mean(v, "cauc"), "Logloss": self.mean(v, "logloss"),
                        "repeats": len(self.runs[v])})
        return out


def ablate(train_data: ImpressionSet, eval_data: ImpressionSet, base: ModelConfig,
           tcfg: TrainConfig, repeats: int = 5, variants=TABLE_ORDER,
           keep_models: bool = False) -> AblationResult:
    """Train every variant ``repeats`` times; repeat ``r`` uses seed ``base.seed + r``
    for both initialisation and shuffling, shared across variants."""
    if repeats < 1:
        raise UsageError("repeats must be at least 1")
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise UsageError(f"unknown variants {sorted(unknown)}")
    result = AblationResult({v: [] for v in variants})
    for r in range(repeats):
        seed = base.seed + r
        for v in variants:
            cfg = replace(base.variant(v), seed=seed)
            state = train(cfg, replace(tcfg, seed=seed), train_data)
            rep = evaluate(state.model, eval_data)
            logger.info("variant %s repeat %d: auc=%s", v, r, rep.auc)
            result.runs[v].append({"auc": rep.auc, "tauc": rep.tauc, "cauc": rep.cauc,
                                   "logloss": rep.logloss})
            if keep_models:
                result.models.setdefault(v, []).append(state.model)
    return result


def write_ablation_csv(path, result: AblationResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for row in result.rows():
            w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c])
                        for c in ABLATION_COLUMNS])


def export_gate_heatmap(ckpt: Checkpoint, data: ImpressionSet, path=None) -> dict:
    """Mean gate weight per (time period, field) and per (city, field)."""
    if not ckpt.model_config.use_stael:
        raise UsageError("checkpoint has the gate layer ablated; there are no gates to export")
    model = ckpt.to_model()
    log = model.gate_log(data)
    tables = {"time_period": stael.gate_heatmap(log, data.time_period),
              "city": stael.gate_heatmap(log, data.city)}
    if path is not None:
        stael.write_heatmap_csv(path, tables)
    return tables
