from dataclasses import replace

import numpy as np
import pytest

from stctr import checkpoint as ck
from stctr import train as tr
from stctr.errors import ConfigError, DataError, StorageError


@pytest.fixture(scope="module")
def trained(small_synth, small_cfg):
    t = tr.TrainConfig(batch_size=32, warmup_steps=2, total_steps=6)
    return tr.train(small_cfg, t, small_synth.data), t


def test_roundtrip_is_exact(trained, small_synth, tmp_path):
    state, t = trained
    c = ck.Checkpoint.from_model(state.model, state.acc, state.step, t.to_dict())
    path = tmp_path / "c.bin"
    ck.save(path, c)
    again = ck.load(path, expected=state.model.cfg)
    assert ck.dumps(again) == path.read_bytes()
    assert again.step == 6 and again.train_config == t.to_dict()
    batch = small_synth.data.take(np.arange(40))
    assert again.to_model().predict_proba(batch).tobytes() == \
        state.model.predict_proba(batch).tobytes()


def test_config_mismatch(trained):
    state, _ = trained
    blob = ck.dumps(ck.Checkpoint.from_model(state.model))
    with pytest.raises(ConfigError):
        ck.loads(blob, expected=replace(state.model.cfg, tower_widths=(4,)))


def test_corrupt_files(trained, tmp_path):
    blob = ck.dumps(ck.Checkpoint.from_model(trained[0].model))
    with pytest.raises(DataError):
        ck.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(DataError):
        ck.loads(blob[:-8])
    with pytest.raises(DataError):
        ck.loads(blob + b"\0" * 8)
    with pytest.raises(StorageError):
        ck.load(tmp_path / "missing.bin")
