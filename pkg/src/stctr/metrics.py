"""Ranking and classification metrics for click predictions.

``grouped_auc`` is the impression-weighted mean of per-group AUCs; grouping
by time period gives TAUC and grouping by city gives CAUC. Groups holding a
single class have no AUC; they are dropped from both numerator and
denominator and listed in the report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, StorageError, UndefinedMetricError

PROB_CLAMP = 1e-7


@dataclass
class ScoredRecords:
    """Column-oriented scored impressions."""

    score: np.ndarray
    label: np.ndarray
    time_period: np.ndarray
    city: np.ndarray
    request_id: np.ndarray
    item_id: Optional[np.ndarray] = None

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=float)
        lab = np.asarray(self.label)
        if not np.all((lab == 0) | (lab == 1)):
            raise DataError("labels must be 0 or 1")
        self.label = lab.astype(np.int64)
        n = self.score.shape[0]
        self.time_period = np.asarray(self.time_period, dtype=np.int64)
        self.city = np.asarray(self.city, dtype=np.int64)
        self.request_id = np.asarray(self.request_id, dtype=np.int64)
        if self.item_id is not None:
            self.item_id = np.asarray(self.item_id, dtype=np.int64)
        for name in ("label", "time_period", "city", "request_id"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"records column {name!r} has the wrong length")
        if (self.time_period < 0).any() or (self.city < 0).any() or (self.request_id < 0).any():
            raise DataError("record ids must be non-negative")

    def __len__(self):
        return int(self.score.shape[0])

    def take(self, index) -> "ScoredRecords":
        return ScoredRecords(self.score[index], self.label[index], self.time_period[index],
                             self.city[index], self.request_id[index],
                             None if self.item_id is None else self.item_id[index])


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class GroupTable:
    key: str
    rows: list = field(default_factory=list)  # dicts: key, impressions, positives, auc
    value: Optional[float] = None
    skipped: list = field(default_factory=list)


def grouped_auc(records: ScoredRecords, key: str) -> GroupTable:
    """Impression-weighted average of per-group AUC over ``key`` ("time_period" or "city")."""
    keys = getattr(records, key)
    table = GroupTable(key)
    valid = []
    for g in np.unique(keys):
        sel = keys == g
        n = int(sel.sum())
        positives = int(records.label[sel].sum())
        try:
            a = auc(records.score[sel], records.label[sel])
        except UndefinedMetricError:
            a = None
            table.skipped.append(int(g))
        else:
            valid.append((n, a))
        table.rows.append({"key": int(g), "impressions": n, "positives": positives, "auc": a})
    if not valid:
        raise UndefinedMetricError(f"no {key} group contains both classes")
    total = float(sum(n for n, _ in valid))
    # normalised weights keep a lone group's AUC bit-exact
    table.value = float(sum((n / total) * a for n, a in valid))
    return table


def tauc(records: ScoredRecords) -> float:
    return grouped_auc(records, "time_period").value


def cauc(records: ScoredRecords) -> float:
    return grouped_auc(records, "city").value


def ndcg_at_k(records: ScoredRecords, k: int) -> float:
    """Mean NDCG@k over requests with at least one click.

    Items are ranked by descending score; ties are ordered by item id when
    available, otherwise by input position.
    """
    if len(records) == 0:
        raise UndefinedMetricError("NDCG of an empty record set")
    tie = records.item_id if records.item_id is not None else np.arange(len(records))
    # lexsort: last key is primary -> request, then score desc, then tie key
    order = np.lexsort((tie, -records.score, records.request_id))
    req = records.request_id[order]
    lab = records.label[order].astype(float)
    starts = np.flatnonzero(np.r_[True, req[1:] != req[:-1]])
    ends = np.r_[starts[1:], len(req)]
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    total, count = 0.0, 0
    for s, e in zip(starts, ends):
        gains = lab[s:e]
        n_pos = int(gains.sum())
        if n_pos == 0:
            continue
        top = gains[:k]
        dcg = float(np.dot(top, discounts[:top.size]))
        idcg = float(discounts[:min(n_pos, k)].sum())
        total += dcg / idcg
        count += 1
    if count == 0:
        raise UndefinedMetricError("no request contains a click")
    return total / count


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=float)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


@dataclass
class MetricReport:
    auc: Optional[float]
    tauc: Optional[float]
    cauc: Optional[float]
    ndcg3: Optional[float]
    ndcg10: Optional[float]
    logloss: float
    n_records: int
    groups: dict
    undefined: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _safe(fn, name, undefined):
    try:
        return fn()
    except UndefinedMetricError:
        undefined.append(name)
        return None


def evaluate_records(records: ScoredRecords) -> MetricReport:
    undefined = []
    groups = {}
    value = {}
    for name, key in (("tauc", "time_period"), ("cauc", "city")):
        table = _safe(lambda key=key: grouped_auc(records, key), name, undefined)
        value[name] = None if table is None else table.value
        if table is not None:
            groups[key] = {"rows": table.rows, "skipped": table.skipped}
    return MetricReport(
        auc=_safe(lambda: auc(records.score, records.label), "auc", undefined),
        tauc=value["tauc"], cauc=value["cauc"],
        ndcg3=_safe(lambda: ndcg_at_k(records, 3), "ndcg3", undefined),
        ndcg10=_safe(lambda: ndcg_at_k(records, 10), "ndcg10", undefined),
        logloss=logloss(records.score, records.label),
        n_records=len(records), groups=groups, undefined=undefined)


# ------------------------------------------------------------------ files

PREDICTION_COLUMNS = ("request_id", "time_period_id", "city_id", "label", "score")


def write_predictions(path, records: ScoredRecords) -> None:
    cols = list(PREDICTION_COLUMNS) + (["item_id"] if records.item_id is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(records)):
            row = [int(records.request_id[i]), int(records.time_period[i]), int(records.city[i]),
                   int(records.label[i]), repr(float(records.score[i]))]
            if records.item_id is not None:
                row.append(int(records.item_id[i]))
            w.writerow(row)


def read_predictions(path) -> ScoredRecords:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(PREDICTION_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"predictions file lacks columns {sorted(missing)}")
            rows = list(reader)
    except OSError as exc:
        raise StorageError(f"cannot read predictions {path}: {exc}") from exc
    try:
        cols = {c: [r[c] for r in rows] for c in reader.fieldnames}
        return ScoredRecords(
            score=np.array(cols["score"], dtype=float),
            label=np.array(cols["label"], dtype=float),
            time_period=np.array(cols["time_period_id"], dtype=np.int64),
            city=np.array(cols["city_id"], dtype=np.int64),
            request_id=np.array(cols["request_id"], dtype=np.int64),
            item_id=np.array(cols["item_id"], dtype=np.int64) if "item_id" in cols else None)
    except ValueError as exc:
        raise DataError(f"malformed predictions file {path}: {exc}") from exc


def write_group_csv(path, report: MetricReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_type", "key", "impressions", "positives", "auc", "valid"])
        for key in sorted(report.groups):
            for row in report.groups[key]["rows"]:
                a = row["auc"]
                w.writerow([key, row["key"], row["impressions"], row["positives"],
                            "" if a is None else repr(a), int(a is not None)])
