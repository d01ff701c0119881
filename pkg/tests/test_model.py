from dataclasses import replace

import numpy as np
import pytest

from stctr.errors import ConfigError
from stctr.model import VARIANTS, CTRModel, ModelConfig

from conftest import random_batch


@pytest.mark.parametrize("rank", [None, 3])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_zero_init_full_equals_static_bitwise(small_synth, small_cfg, rank, mode):
    cfg = replace(small_cfg, ststl_rank=rank)
    full, static = CTRModel(cfg.variant("full")), CTRModel(cfg.variant("static"))
    rng = np.random.default_rng(0)
    for _ in range(10):
        batch = random_batch(small_synth.data, rng, 16)
        _, a = full.run(batch, mode=mode)
        _, b = static.run(batch, mode=mode)
        assert a.prob.data.tobytes() == b.prob.data.tobytes()


def test_variants_share_trunk_parameters(small_cfg):
    models = {v: CTRModel(small_cfg.variant(v)) for v in VARIANTS}
    shared = set.intersection(*(set(m.params) for m in models.values()))
    assert "embedding" in shared and "head.w" in shared
    for name in shared:
        ref = models["full"].params[name]
        assert all(np.array_equal(m.params[name], ref) for m in models.values()), name


def test_every_variant_has_the_same_tensor_shapes(small_synth, small_cfg):
    batch = small_synth.data.take(np.arange(12))
    shapes = set()
    for v in VARIANTS:
        _, res = CTRModel(small_cfg.variant(v)).run(batch, mode="train")
        shapes.add((res.h_hat.shape, res.h_star.shape, res.tower_out.shape, res.prob.shape))
    assert len(shapes) == 1


def test_gates_present_only_with_gate_layer(small_synth, small_cfg):
    batch = small_synth.data.take(np.arange(6))
    _, res = CTRModel(small_cfg).run(batch)
    assert set(res.alphas) == set(CTRModel(small_cfg).vocab.gated_fields)
    assert all(np.all(a.data == 1.0) for a in res.alphas.values())
    _, res = CTRModel(small_cfg.variant("no_stael")).run(batch)
    assert res.alphas == {}


def test_predictions_are_probabilities_and_chunk_independent(small_synth, small_cfg):
    model = CTRModel(small_cfg)
    rng = np.random.default_rng(1)
    model.params = {k: v + rng.normal(0, 0.2, v.shape) for k, v in model.params.items()}
    data = small_synth.data.take(np.arange(200))
    p = model.predict_proba(data, chunk=64)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(p, model.predict_proba(data, chunk=200), rtol=0, atol=1e-14)


def test_eval_does_not_touch_running_stats(small_synth, small_cfg):
    model = CTRModel(small_cfg)
    before = [s.raw_mean.copy() for s in model.stats]
    model.predict_proba(small_synth.data.take(np.arange(50)))
    assert all(np.array_equal(a, s.raw_mean) for a, s in zip(before, model.stats))


def test_config_errors(small_cfg):
    with pytest.raises(ConfigError):
        small_cfg.variant("nope")
    with pytest.raises(ConfigError):
        replace(small_cfg, tower_widths=())
    with pytest.raises(ConfigError):
        replace(small_cfg, ststl_d_out=small_cfg.d_in + 1)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**small_cfg.to_dict(), "extra": 1})
    model = CTRModel(small_cfg)
    bad = dict(model.params)
    bad["head.b"] = np.zeros(3)
    with pytest.raises(ConfigError):
        CTRModel(small_cfg, bad)


def test_config_roundtrip(small_cfg):
    assert ModelConfig.from_dict(small_cfg.to_dict()) == small_cfg


def test_seed_changes_initialisation(small_cfg):
    a = CTRModel(small_cfg).params["embedding"]
    b = CTRModel(replace(small_cfg, seed=1)).params["embedding"]
    assert not np.array_equal(a, b)
