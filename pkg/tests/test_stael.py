import csv

import numpy as np
import pytest

from stctr import numcore as nc
from stctr import stael
from stctr.errors import DimensionError

FIELDS = ("user", "behavior", "item", "context", "combine")


def make_inputs(rng, B=4, widths=None, cw=3):
    widths = widths or {"user": 2, "behavior": 2, "item": 3, "combine": 1}
    g = nc.Graph()
    xs = {f: g.constant(rng.normal(size=(B, w))) for f, w in widths.items()}
    x_c = g.constant(rng.normal(size=(B, cw)))
    return g, xs, x_c, widths, cw


def test_zero_params_give_unit_gate():
    rng = np.random.default_rng(0)
    g, xs, x_c, widths, cw = make_inputs(rng)
    params = {k: g.constant(np.zeros(s)) for k, s in stael.gate_param_shapes(widths, cw).items()}
    _, alphas, h_hat = stael.apply_gates(xs, x_c, params, FIELDS)
    for a in alphas.values():
        assert np.all(a.data == 1.0)
    raw = np.concatenate([xs["user"].data, xs["behavior"].data, xs["item"].data, x_c.data,
                          xs["combine"].data], axis=1)
    assert h_hat.data.tobytes() == raw.tobytes()


def test_large_logit_saturates_near_two():
    g = nc.Graph()
    a = stael.gate_weight(g.constant([[0.0]]), g.constant([[0.0]]),
                          g.constant(np.zeros((2, 1))), g.constant([20.0]))
    assert abs(a.data[0, 0] - 2.0) < 1e-8 and a.data[0, 0] < 2.0


def test_gate_matches_scalar_formula():
    rng = np.random.default_rng(1)
    x, xc = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    w, b = rng.normal(size=(5, 1)), rng.normal(size=(1,))
    g = nc.Graph()
    a = stael.gate_weight(g.constant(x), g.constant(xc), g.constant(w), g.constant(b)).data
    for i in range(5):
        z = sum(v * w[j, 0] for j, v in enumerate(list(x[i]) + list(xc[i]))) + b[0]
        assert abs(a[i, 0] - 2.0 / (1.0 + np.exp(-z))) < 1e-12


def test_gate_shape_error():
    g = nc.Graph()
    with pytest.raises(DimensionError):
        stael.gate_weight(g.constant([[0.0, 1.0]]), g.constant([[0.0]]),
                          g.constant(np.zeros((2, 1))), g.constant([0.0]))


def test_ablated_gates_pass_fields_through():
    rng = np.random.default_rng(2)
    g, xs, x_c, _, _ = make_inputs(rng)
    h, alphas, _ = stael.apply_gates(xs, x_c, None, FIELDS)
    assert alphas == {}
    assert all(h[f] is xs[f] for f in xs)


def test_half_gate_halves_one_slice():
    rng = np.random.default_rng(3)
    g, xs, x_c, widths, cw = make_inputs(rng)
    params = {k: g.constant(np.zeros(s)) for k, s in stael.gate_param_shapes(widths, cw).items()}
    # 2 * sigmoid(-ln 3) = 0.5
    params["stael.item.b"] = g.constant([-np.log(3.0)])
    h, alphas, h_hat = stael.apply_gates(xs, x_c, params, FIELDS)
    np.testing.assert_allclose(alphas["item"].data, 0.5, rtol=1e-15)
    np.testing.assert_allclose(h["item"].data, 0.5 * xs["item"].data, rtol=1e-15)
    assert h["user"].data.tobytes() == xs["user"].data.tobytes()
    # item slice sits after user (2) and behavior (2)
    np.testing.assert_allclose(h_hat.data[:, 4:7], 0.5 * xs["item"].data, rtol=1e-15)


def test_gate_strictly_inside_and_monotone():
    g = nc.Graph()
    z = np.linspace(-30, 30, 121)
    a = [stael.gate_weight(g.constant([[1.0]]), g.constant([[0.0]]),
                           g.constant([[0.0], [0.0]]), g.constant([v])).data[0, 0] for v in z]
    a = np.array(a)
    assert np.all((a > 0) & (a < 2))
    assert np.all(np.diff(a) > 0)


def test_gate_gradients():
    rng = np.random.default_rng(4)
    x, xc = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    target = rng.normal(size=(6, 3))

    def build(g, p):
        a = stael.gate_weight(g.constant(x), g.constant(xc), p["w"], p["b"])
        out = nc.scale_rows(g.constant(x), a)
        return nc.sum_all(nc.hadamard(out, g.constant(target)))

    rep = nc.grad_check(build, {"w": rng.normal(size=(5, 1)), "b": rng.normal(size=(1,))},
                        eps=1e-6)
    assert rep.max_rel_error < 1e-4


def test_heatmap_matches_logged_means(tmp_path):
    rng = np.random.default_rng(5)
    log = {"user": rng.uniform(0, 2, 200), "item": rng.uniform(0, 2, 200)}
    keys = rng.integers(0, 4, 200)
    rows = stael.gate_heatmap(log, keys)
    for key, name, mean, count in rows:
        sel = keys == key
        assert count == sel.sum()
        np.testing.assert_allclose(mean, log[name][sel].mean(), rtol=1e-13)
    path = tmp_path / "h.csv"
    stael.write_heatmap_csv(path, {"time_period": rows})
    with open(path) as fh:
        got = list(csv.DictReader(fh))
    assert set(got[0]) == {"context_key", "field_name", "mean_alpha", "count"}
    assert got[0]["context_key"].startswith("time_period:")
    assert len(got) == 8


def test_heatmap_of_unit_gates_is_exactly_one():
    rows = stael.gate_heatmap({"user": np.ones(37)}, np.arange(37) % 5)
    assert all(mean == 1.0 for _, _, mean, _ in rows)
