import csv

import numpy as np
import pytest

from stctr import ablation as ab
from stctr import checkpoint as ck
from stctr import train as tr
from stctr.errors import UsageError
from stctr.model import CTRModel


def test_zero_steps_gives_identical_rows(small_synth, small_cfg, tmp_path):
    trn, tst = tr.split_by_request(small_synth.data, 0.3)
    t = tr.TrainConfig(total_steps=0, warmup_steps=0)
    result = ab.ablate(trn, tst, small_cfg, t, repeats=1)
    rows = result.rows()
    assert [r["variant"] for r in rows] == list(ab.TABLE_ORDER)
    first = {k: v for k, v in rows[0].items() if k != "variant"}
    assert all({k: v for k, v in r.items() if k != "variant"} == first for r in rows)
    path = tmp_path / "a.csv"
    ab.write_ablation_csv(path, result)
    with open(path) as fh:
        assert set(list(csv.DictReader(fh))[0]) == set(ab.ABLATION_COLUMNS)


def test_ablate_rejects_bad_arguments(small_synth, small_cfg):
    t = tr.TrainConfig(total_steps=0, warmup_steps=0)
    with pytest.raises(UsageError):
        ab.ablate(small_synth.data, small_synth.data, small_cfg, t, repeats=0)
    with pytest.raises(UsageError):
        ab.ablate(small_synth.data, small_synth.data, small_cfg, t, variants=("bogus",))


def test_heatmap_export(small_synth, small_cfg, tmp_path):
    model = CTRModel(small_cfg)
    tables = ab.export_gate_heatmap(ck.Checkpoint.from_model(model), small_synth.data,
                                    tmp_path / "h.csv")
    fields = model.vocab.gated_fields
    assert len(tables["time_period"]) == 5 * len(fields)
    assert all(row[2] == 1.0 for row in tables["city"])  # untrained gates are exactly 1
    counts = {}
    for key, name, _, n in tables["time_period"]:
        counts[key] = n
    assert sum(counts.values()) == len(small_synth.data)
    with pytest.raises(UsageError):
        ab.export_gate_heatmap(ck.Checkpoint.from_model(CTRModel(small_cfg.variant("static"))),
                               small_synth.data)


def test_heatmap_of_trained_model_matches_raw_log(small_synth, small_cfg):
    t = tr.TrainConfig(batch_size=64, warmup_steps=5, total_steps=40, acc_init=1e-6)
    model = tr.train(small_cfg, t, small_synth.data).model
    data = small_synth.data
    tables = ab.export_gate_heatmap(ck.Checkpoint.from_model(model), data)
    log = model.gate_log(data)
    moved = False
    for key, name, mean, count in tables["city"]:
        sel = data.city == key
        assert count == sel.sum()
        assert abs(mean - log[name][sel].mean()) < 1e-13
        moved |= mean != 1.0
    assert moved
