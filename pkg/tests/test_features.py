import json

import numpy as np
import pytest

from stctr import features as ft
from stctr import numcore as nc
from stctr.errors import DataError, StorageError


@pytest.fixture
def vocab():
    return ft.standard_vocabulary(n_users=5, n_profiles=2, n_items=6, n_categories=3,
                                  n_brands=2, n_time_periods=5, n_cities=3, dim=3,
                                  geohash_buckets=8)


def event(item, cat, tp, geohash, hour=12, city=0):
    return {"item": item, "category": cat, "time_period": tp, "hour": hour, "city": city,
            "geohash": geohash}


def record(behaviors=(), tp=1, geohash="wx4g0b", label=1, request_id=0):
    return {"request_id": request_id, "user": [1, 2], "item": [3, 1, 2], "combine": [4],
            "context": {"time_period": tp, "hour": 12, "city": 1, "geohash": geohash},
            "behaviors": list(behaviors), "label": label}


def table_for(vocab, seed=0):
    rng = np.random.default_rng(seed)
    g = nc.Graph(grad_enabled=False)
    return g, g.constant(rng.normal(size=(vocab.dim, vocab.n_features)))


def test_vocabulary_layout(vocab):
    # every owned slot gets a disjoint block; behaviour slots borrow item tables
    assert vocab.n_features == sum(vocab.sizes[s.name] for s in vocab.slots if s.table is None)
    assert vocab.offsets["item"] == vocab.offsets["item_id"]
    assert vocab.offsets["category"] == vocab.offsets["item_category"]
    assert vocab.gated_fields == (ft.USER, ft.BEHAVIOR, ft.ITEM, ft.COMBINE)
    assert vocab.n_time_periods == 5 and vocab.n_cities == 3


def test_vocabulary_roundtrip(vocab, tmp_path):
    path = tmp_path / "vocab.json"
    vocab.save(path)
    again = ft.Vocabulary.load(path)
    assert again.to_dict() == vocab.to_dict()
    assert again.offsets == vocab.offsets
    on_disk = json.loads(path.read_text())
    assert [f["name"] for f in on_disk["fields"]] == list(ft.DEFAULT_FIELDS)
    assert on_disk["fields"][0]["feature_count"] == 6 + 3


def test_vocabulary_errors(tmp_path):
    with pytest.raises(DataError):
        ft.Vocabulary.from_dict({"dim": 2})
    with pytest.raises(StorageError):
        ft.Vocabulary.load(tmp_path / "missing.json")
    bad = (ft.Slot("a", ft.USER, 3), ft.Slot("a", ft.ITEM, 3))
    with pytest.raises(DataError):
        ft.Vocabulary(bad, 2)


def test_embed_layout_example():
    slots = (ft.Slot("a", ft.USER, 2), ft.Slot("b", ft.USER, 2),
             ft.Slot("time_period", ft.CONTEXT, 2), ft.Slot("hour", ft.CONTEXT, 25),
             ft.Slot("city", ft.CONTEXT, 2), ft.Slot("geohash", ft.CONTEXT, 2))
    v = ft.Vocabulary(slots, 3, fields=(ft.USER, ft.CONTEXT))
    E = np.zeros((3, v.n_features))
    E[:, v.offsets["a"] + 1] = 1.0
    E[:, v.offsets["b"] + 1] = 2.0
    g = nc.Graph(grad_enabled=False)
    x = nc.gather_columns(g.constant(E), v.to_global(["a", "b"], np.array([[1, 1]])))
    assert np.array_equal(x.data[0], [1, 1, 1, 2, 2, 2])


def test_embed_fields_zero_table_and_widths(vocab):
    data = ft.build_impression_set([record([event(2, 1, 1, "wx4g0b")])], vocab)
    g = nc.Graph(grad_enabled=False)
    xs, x_c = ft.embed_fields(data, g.constant(np.zeros((vocab.dim, vocab.n_features))), vocab)
    assert all(not x.data.any() for x in xs.values()) and not x_c.data.any()
    # width oracle: slots per field times dim, counted straight from the schema
    for f, x in xs.items():
        k = sum(1 for s in vocab.slots if s.field == f)
        assert x.shape == (1, k * vocab.dim)
    assert x_c.shape == (1, 4 * vocab.dim)


def test_embed_fields_is_pure(vocab):
    data = ft.build_impression_set([record([event(2, 1, 1, "wx4g0b")])], vocab)
    _, table = table_for(vocab)
    a = ft.embed_fields(data, table, vocab)
    b = ft.embed_fields(data, table, vocab)
    for f in a[0]:
        assert a[0][f].data.tobytes() == b[0][f].data.tobytes()


def test_oov_maps_to_zero_without_shape_change(vocab):
    rec = record()
    rec["item"] = [999, -5, 1]
    data = ft.build_impression_set([rec], vocab)
    ids = ft.field_ids(data, vocab, ft.ITEM)
    assert ids[0, 0] == vocab.offsets["item_id"]
    assert ids[0, 1] == vocab.offsets["item_category"]
    _, table = table_for(vocab)
    xs, _ = ft.embed_fields(data, table, vocab)
    assert xs[ft.ITEM].shape == (1, 3 * vocab.dim)


def _event_embedding(table, vocab, ev):
    E = table.data
    return np.concatenate([E[:, vocab.offsets["item_id"] + ev["item"]],
                           E[:, vocab.offsets["item_category"] + ev["category"]]])


def test_filter_all_match_is_plain_mean(vocab):
    evs = [event(1, 1, 1, "wx4g00"), event(2, 2, 1, "wx4gzz")]
    data = ft.build_impression_set([record(evs, tp=1, geohash="wx4g0b")], vocab)
    _, table = table_for(vocab)
    h = ft.filter_behaviors(data, table, vocab, prefix_len=4).data[0]
    oracle = np.mean([_event_embedding(table, vocab, e) for e in evs], axis=0)
    np.testing.assert_allclose(h, oracle, atol=1e-12)


def test_filter_no_match_falls_back(vocab):
    evs = [event(1, 1, 3, "wx4g00"), event(2, 2, 1, "zzzz00")]
    data = ft.build_impression_set([record(evs, tp=1, geohash="wx4g0b")], vocab)
    _, table = table_for(vocab)
    filtered = ft.filter_behaviors(data, table, vocab, prefix_len=4).data
    xs, _ = ft.embed_fields(data, table, vocab)
    assert filtered.tobytes() == xs[ft.BEHAVIOR].data.tobytes()


def test_filter_mixed_matches_brute_force(vocab):
    rng = np.random.default_rng(5)
    recs, all_events = [], []
    for r in range(30):
        evs = [event(int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(0, 3)),
                     "wx4" + "".join(rng.choice(list("gh"), 3)))
               for _ in range(int(rng.integers(0, 6)))]
        all_events.append(evs)
        recs.append(record(evs, tp=int(rng.integers(0, 3)),
                           geohash="wx4" + "".join(rng.choice(list("gh"), 3)), request_id=r))
    data = ft.build_impression_set(recs, vocab)
    _, table = table_for(vocab)
    h = ft.filter_behaviors(data, table, vocab, prefix_len=5).data
    for i, (rec, evs) in enumerate(zip(recs, all_events)):
        ctx = rec["context"]
        kept = [e for e in evs if e["time_period"] == ctx["time_period"]
                and e["geohash"][:5] == ctx["geohash"][:5]]
        chosen = kept or evs
        if not chosen:
            oracle = np.zeros(2 * vocab.dim)
        else:
            oracle = np.mean([_event_embedding(table, vocab, e) for e in chosen], axis=0)
        np.testing.assert_allclose(h[i], oracle, atol=1e-12)


def test_filter_empty_history_is_zero(vocab):
    data = ft.build_impression_set([record([])], vocab)
    _, table = table_for(vocab)
    h = ft.filter_behaviors(data, table, vocab)
    assert h.shape == (1, vocab.behavior_width) and not h.data.any()


def test_long_history_keeps_latest(vocab):
    evs = [event(i % 6 + 1, 1, 1, "wx4g00") for i in range(8)]
    data = ft.build_impression_set([record(evs)], vocab, max_behaviors=3)
    assert data.behaviors.length[0] == 3
    assert list(data.behaviors.ids[0, :, 0]) == [e["item"] for e in evs[-3:]]


def test_jsonl_roundtrip(vocab, tmp_path):
    recs = [record([event(2, 1, 1, "wx4g0b")], request_id=0),
            record([], label=0, request_id=1)]
    data = ft.build_impression_set(recs, vocab)
    path = tmp_path / "d.jsonl"
    ft.write_jsonl(path, data, vocab)
    lines = path.read_text().splitlines()
    assert [json.loads(x) for x in lines] == recs
    again = ft.load_jsonl(path, vocab)
    assert list(ft.impression_records(again, vocab)) == recs


@pytest.mark.parametrize("mutate,msg", [
    (lambda r: r.update(label=2), "label"),
    (lambda r: r.pop("user"), "user"),
    (lambda r: r["context"].update(hour=24), "hour"),
    (lambda r: r.update(item=[1, 2]), "item"),
    (lambda r: r["context"].update(city="x"), "city"),
])
def test_schema_errors_carry_line_numbers(vocab, tmp_path, mutate, msg):
    bad = record()
    mutate(bad)
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(record()) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DataError, match=r"line 2.*" + msg):
        ft.load_jsonl(path, vocab)


def test_invalid_json_line(vocab, tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(record()) + "\n{oops\n")
    with pytest.raises(DataError, match="line 2"):
        ft.load_jsonl(path, vocab)


def test_missing_dataset_is_storage_error(vocab, tmp_path):
    with pytest.raises(StorageError):
        ft.load_jsonl(tmp_path / "nope.jsonl", vocab)
