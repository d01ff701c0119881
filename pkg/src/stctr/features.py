"""Feature vocabulary, impression storage and embedding lookup.

Every categorical feature lives in a *slot* (user id, item category, ...) and
every slot belongs to one *field*. Local id 0 of every slot is reserved for
out-of-vocabulary values. All slots share one embedding matrix ``E`` of
shape (D, N); a slot owns a contiguous block of N, except for slots that
borrow another slot's block (behaviour events reuse the item tables).
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import numcore as nc
from .errors import DataError, StorageError

logger = logging.getLogger(__name__)

USER, BEHAVIOR, ITEM, CONTEXT, COMBINE = "user", "behavior", "item", "context", "combine"
DEFAULT_FIELDS = (USER, BEHAVIOR, ITEM, CONTEXT, COMBINE)
CONTEXT_KEYS = ("time_period", "hour", "city", "geohash")
GEOHASH_WIDTH = 12


@dataclass(frozen=True)
class Slot:
    name: str
    field: str
    size: int = 0
    table: Optional[str] = None  # borrow the embedding block of this slot


@dataclass
class Vocabulary:
    """Slot layout plus the embedding width ``dim``.

    Context slots are fixed: time_period, hour, city and a hashed geohash
    bucket; raw context values are shifted by one so that 0 stays OOV.
    """

    slots: tuple
    dim: int
    fields: tuple = DEFAULT_FIELDS
    geohash_precision: int = 5
    offsets: dict = field(init=False)
    sizes: dict = field(init=False)
    n_features: int = field(init=False)

    def __post_init__(self):
        self.slots = tuple(self.slots)
        names = [s.name for s in self.slots]
        if len(set(names)) != len(names):
            raise DataError("duplicate slot names in vocabulary")
        for s in self.slots:
            if s.field not in self.fields:
                raise DataError(f"slot {s.name!r} assigned to unknown field {s.field!r}")
        owners = {s.name: s for s in self.slots if s.table is None}
        self.offsets, self.sizes = {}, {}
        n = 0
        for s in self.slots:
            if s.table is None:
                if s.size < 2:
                    raise DataError(f"slot {s.name!r} needs size >= 2 (id 0 is OOV)")
                self.offsets[s.name] = n
                self.sizes[s.name] = s.size
                n += s.size
        for s in self.slots:
            if s.table is not None:
                if s.table not in owners:
                    raise DataError(f"slot {s.name!r} borrows unknown table {s.table!r}")
                self.offsets[s.name] = self.offsets[s.table]
                self.sizes[s.name] = self.sizes[s.table]
        self.n_features = n
        ctx = [s.name for s in self.field_slots(CONTEXT)]
        if tuple(ctx) != CONTEXT_KEYS:
            raise DataError(f"context field must hold slots {CONTEXT_KEYS}, got {tuple(ctx)}")

    def field_slots(self, name: str) -> list:
        return [s for s in self.slots if s.field == name]

    @property
    def gated_fields(self) -> tuple:
        return tuple(f for f in self.fields if f != CONTEXT)

    @property
    def plain_fields(self) -> tuple:
        return tuple(f for f in self.fields if f not in (CONTEXT, BEHAVIOR))

    def field_width(self, name: str) -> int:
        return len(self.field_slots(name)) * self.dim

    @property
    def behavior_width(self) -> int:
        return self.field_width(BEHAVIOR)

    @property
    def n_time_periods(self) -> int:
        return self.sizes["time_period"] - 1

    @property
    def n_cities(self) -> int:
        return self.sizes["city"] - 1

    def to_global(self, slot_names: Iterable[str], local_ids: np.ndarray) -> np.ndarray:
        """Map local ids (..., k) to global columns of E, sending OOV to the slot's id 0."""
        names = list(slot_names)
        ids = np.asarray(local_ids, dtype=np.int64)
        sizes = np.array([self.sizes[n] for n in names])
        offs = np.array([self.offsets[n] for n in names])
        bad = (ids < 0) | (ids >= sizes)
        if bad.any():
            logger.info("mapped %d out-of-vocabulary ids to OOV", int(bad.sum()))
            ids = np.where(bad, 0, ids)
        return ids + offs

    def geohash_bucket(self, geohash: np.ndarray) -> np.ndarray:
        n = self.sizes["geohash"] - 1
        prefixes = np.asarray(geohash).astype(f"U{self.geohash_precision}")
        uniq, inv = np.unique(prefixes, return_inverse=True)
        codes = np.array([zlib.crc32(u.encode()) % n + 1 for u in uniq], dtype=np.int64)
        return codes[inv].reshape(prefixes.shape)

    def context_ids(self, batch: "ImpressionSet") -> np.ndarray:
        local = np.stack([batch.time_period + 1, batch.hour + 1, batch.city + 1,
                          self.geohash_bucket(batch.geohash)], axis=1)
        return self.to_global(CONTEXT_KEYS, local)

    # -- persistence

    def to_dict(self) -> dict:
        fields_ = []
        for f in self.fields:
            slots = []
            for s in self.field_slots(f):
                slots.append({"name": s.name, "size": s.size} if s.table is None
                             else {"name": s.name, "table": s.table})
            own = sum(s.size for s in self.field_slots(f) if s.table is None)
            fields_.append({"name": f, "feature_count": own, "slots": slots})
        return {"dim": self.dim, "geohash_precision": self.geohash_precision,
                "fields": fields_}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        try:
            slots = [Slot(e["name"], f["name"], size=int(e.get("size", 0)), table=e.get("table"))
                     for f in d["fields"] for e in f["slots"]]
            return cls(tuple(slots), int(d["dim"]), fields=tuple(f["name"] for f in d["fields"]),
                       geohash_precision=int(d.get("geohash_precision", 5)))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed vocabulary: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"cannot read vocabulary {path}: {exc}") from exc


def standard_vocabulary(n_users, n_profiles, n_items, n_categories, n_brands,
                        n_time_periods, n_cities, dim=8, geohash_buckets=64,
                        geohash_precision=5) -> Vocabulary:
    """The five-field layout produced by the synthetic generator."""
    slots = (
        Slot("user_id", USER, n_users + 1),
        Slot("profile", USER, n_profiles + 1),
        Slot("item", BEHAVIOR, table="item_id"),
        Slot("category", BEHAVIOR, table="item_category"),
        Slot("item_id", ITEM, n_items + 1),
        Slot("item_category", ITEM, n_categories + 1),
        Slot("brand", ITEM, n_brands + 1),
        Slot("time_period", CONTEXT, n_time_periods + 1),
        Slot("hour", CONTEXT, 25),
        Slot("city", CONTEXT, n_cities + 1),
        Slot("geohash", CONTEXT, geohash_buckets + 1),
        Slot("profile_x_category", COMBINE, n_profiles * n_categories + 1),
    )
    return Vocabulary(slots, dim, geohash_precision=geohash_precision)


@dataclass
class BehaviorTable:
    """Padded behaviour sequences, one row per distinct sequence.

    ``ids`` is (R, L, k_behavior) local slot ids; padding has length-masked
    entries (id 0, time period -1, empty geohash).
    """

    ids: np.ndarray
    time_period: np.ndarray
    hour: np.ndarray
    city: np.ndarray
    geohash: np.ndarray
    length: np.ndarray

    @classmethod
    def empty(cls, rows: int, max_len: int, k: int) -> "BehaviorTable":
        L = max(1, max_len)
        return cls(ids=np.zeros((rows, L, k), dtype=np.int64),
                   time_period=np.full((rows, L), -1, dtype=np.int64),
                   hour=np.full((rows, L), -1, dtype=np.int64),
                   city=np.full((rows, L), -1, dtype=np.int64),
                   geohash=np.zeros((rows, L), dtype=f"U{GEOHASH_WIDTH}"),
                   length=np.zeros(rows, dtype=np.int64))

    @property
    def max_len(self) -> int:
        return int(self.ids.shape[1])


@dataclass
class ImpressionSet:
    """Columnar storage for n impressions.

    ``ids[field]`` holds local slot ids (n, k) for every field other than
    context and behaviour. Impression ``i`` owns behaviour row
    ``beh_row[i]`` of ``behaviors``; impressions of one request share a row.
    """

    request_id: np.ndarray
    ids: dict
    time_period: np.ndarray
    hour: np.ndarray
    city: np.ndarray
    geohash: np.ndarray
    beh_row: np.ndarray
    behaviors: BehaviorTable
    label: np.ndarray

    def __len__(self):
        return int(self.label.shape[0])

    def take(self, index) -> "ImpressionSet":
        index = np.asarray(index)
        return ImpressionSet(
            request_id=self.request_id[index],
            ids={k: v[index] for k, v in self.ids.items()},
            time_period=self.time_period[index], hour=self.hour[index],
            city=self.city[index], geohash=self.geohash[index],
            beh_row=self.beh_row[index], behaviors=self.behaviors, label=self.label[index])

    @property
    def item_key(self) -> np.ndarray:
        return self.ids[ITEM][:, 0]

    def event_mask(self) -> np.ndarray:
        bt = self.behaviors
        return np.arange(bt.max_len)[None, :] < bt.length[self.beh_row][:, None]


def _as_int(value, what, lineno):
    if isinstance(value, bool) or not isinstance(value, int):
        raise DataError(f"line {lineno}: {what} must be an integer, got {value!r}")
    return value


def build_impression_set(records: list, vocab: Vocabulary, max_behaviors: int = 50,
                         first_line: int = 1) -> ImpressionSet:
    """Validate parsed impression dicts and pack them into columns.

    Sequences longer than ``max_behaviors`` keep their most recent events.
    """
    n = len(records)
    plain = vocab.plain_fields
    beh_slots = [s.name for s in vocab.field_slots(BEHAVIOR)]
    ids = {f: np.zeros((n, len(vocab.field_slots(f))), dtype=np.int64) for f in plain}
    longest = max((len(r.get("behaviors", [])) for r in records if isinstance(r, dict)), default=0)
    L = max(1, min(max_behaviors, longest))
    bt = BehaviorTable.empty(n, L, len(beh_slots))
    out = dict(
        request_id=np.zeros(n, dtype=np.int64), time_period=np.zeros(n, dtype=np.int64),
        hour=np.zeros(n, dtype=np.int64), city=np.zeros(n, dtype=np.int64),
        geohash=np.zeros(n, dtype=f"U{GEOHASH_WIDTH}"), label=np.zeros(n, dtype=np.int64))
    for i, rec in enumerate(records):
        lineno = first_line + i
        if not isinstance(rec, dict):
            raise DataError(f"line {lineno}: impression must be a JSON object")
        try:
            out["request_id"][i] = _as_int(rec["request_id"], "request_id", lineno)
            label = rec["label"]
            if isinstance(label, bool) or label not in (0, 1):
                raise DataError(f"line {lineno}: label must be 0 or 1, got {label!r}")
            out["label"][i] = label
            for f in plain:
                vals = rec[f]
                if not isinstance(vals, list) or len(vals) != ids[f].shape[1]:
                    raise DataError(f"line {lineno}: field {f!r} needs "
                                    f"{ids[f].shape[1]} ids, got {vals!r}")
                ids[f][i] = [_as_int(v, f, lineno) for v in vals]
            ctx = rec["context"]
            for key in ("time_period", "hour", "city"):
                v = _as_int(ctx[key], f"context.{key}", lineno)
                if v < 0:
                    raise DataError(f"line {lineno}: context.{key} is negative")
                out[key][i] = v
            if not 0 <= out["hour"][i] < 24:
                raise DataError(f"line {lineno}: context.hour must be in [0, 24)")
            out["geohash"][i] = str(ctx["geohash"])
            events = rec.get("behaviors", [])
            if not isinstance(events, list):
                raise DataError(f"line {lineno}: behaviors must be a list")
            events = events[len(events) - L:] if len(events) > L else events
            bt.length[i] = len(events)
            for j, ev in enumerate(events):
                bt.ids[i, j] = [_as_int(ev[s], f"behavior.{s}", lineno) for s in beh_slots]
                bt.time_period[i, j] = _as_int(ev["time_period"], "behavior.time_period", lineno)
                bt.hour[i, j] = _as_int(ev["hour"], "behavior.hour", lineno)
                bt.city[i, j] = _as_int(ev["city"], "behavior.city", lineno)
                bt.geohash[i, j] = str(ev["geohash"])
        except KeyError as exc:
            raise DataError(f"line {lineno}: missing key {exc}") from exc
        except TypeError as exc:
            raise DataError(f"line {lineno}: malformed record ({exc})") from exc
    return ImpressionSet(ids=ids, beh_row=np.arange(n), behaviors=bt, **out)


def load_jsonl(path, vocab: Vocabulary, max_behaviors: int = 50) -> ImpressionSet:
    records = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    if not records:
        raise DataError(f"dataset {path} is empty")
    return build_impression_set(records, vocab, max_behaviors)


def impression_records(data: ImpressionSet, vocab: Vocabulary):
    """Yield one JSON-ready dict per impression (inverse of build_impression_set)."""
    beh_slots = [s.name for s in vocab.field_slots(BEHAVIOR)]
    bt = data.behaviors
    for i in range(len(data)):
        r = int(data.beh_row[i])
        events = []
        for j in range(int(bt.length[r])):
            ev = {s: int(bt.ids[r, j, q]) for q, s in enumerate(beh_slots)}
            ev.update(time_period=int(bt.time_period[r, j]), hour=int(bt.hour[r, j]),
                      city=int(bt.city[r, j]), geohash=str(bt.geohash[r, j]))
            events.append(ev)
        rec = {"request_id": int(data.request_id[i])}
        for f in vocab.plain_fields:
            rec[f] = [int(v) for v in data.ids[f][i]]
        rec["context"] = {"time_period": int(data.time_period[i]), "hour": int(data.hour[i]),
                          "city": int(data.city[i]), "geohash": str(data.geohash[i])}
        rec["behaviors"] = events
        rec["label"] = int(data.label[i])
        yield rec


def write_jsonl(path, data: ImpressionSet, vocab: Vocabulary) -> None:
    try:
        with open(path, "w") as fh:
            for rec in impression_records(data, vocab):
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write dataset {path}: {exc}") from exc


# ------------------------------------------------------------ embeddings

def behavior_weights(data: ImpressionSet, prefix_len: Optional[int] = None) -> np.ndarray:
    """Mean-pooling weights over behaviour events, shape (n, L).

    With ``prefix_len`` set, only events in the request's time period whose
    geohash shares the first ``prefix_len`` characters with the request's
    geohash are kept; rows where nothing matches fall back to all events.
    Rows with no events get all-zero weights.
    """
    mask = data.event_mask()
    if prefix_len is not None:
        bt, rows = data.behaviors, data.beh_row
        same_period = bt.time_period[rows] == data.time_period[:, None]
        p = f"U{int(prefix_len)}"
        near = bt.geohash[rows].astype(p) == data.geohash.astype(p)[:, None]
        keep = mask & same_period & near
        none_kept = ~keep.any(axis=1)
        mask = np.where(none_kept[:, None], mask, keep)
    counts = mask.sum(axis=1, keepdims=True)
    return mask / np.maximum(counts, 1)


def field_ids(data: ImpressionSet, vocab: Vocabulary, name: str) -> np.ndarray:
    return vocab.to_global([s.name for s in vocab.field_slots(name)], data.ids[name])


def behavior_ids(data: ImpressionSet, vocab: Vocabulary) -> np.ndarray:
    names = [s.name for s in vocab.field_slots(BEHAVIOR)]
    return vocab.to_global(names, data.behaviors.ids[data.beh_row])


def embed_fields(data: ImpressionSet, table: nc.Tensor, vocab: Vocabulary):
    """Per-field embeddings ``x_j`` (dict field -> (B, k_j*D)) and the context field ``x_c``.

    The behaviour field is the mean of its events' concatenated embeddings.
    """
    xs = {}
    for f in vocab.gated_fields:
        if f == BEHAVIOR:
            xs[f] = nc.pooled_lookup(table, behavior_ids(data, vocab), behavior_weights(data))
        else:
            xs[f] = nc.gather_columns(table, field_ids(data, vocab, f))
    x_c = nc.gather_columns(table, vocab.context_ids(data))
    return xs, x_c


def filter_behaviors(data: ImpressionSet, table: nc.Tensor, vocab: Vocabulary,
                     prefix_len: int = 4) -> nc.Tensor:
    """Spatiotemporally filtered, mean-pooled behaviour embedding ``h_ui`` (B, D_b)."""
    return nc.pooled_lookup(table, behavior_ids(data, vocab),
                            behavior_weights(data, prefix_len))
