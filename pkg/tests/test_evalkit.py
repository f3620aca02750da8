import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invdyg.datamodel import TemporalSplit, split_temporal
from invdyg.evalkit import (
    MetricsReport,
    aggregate_seeds,
    comparison_rows,
    feature_importance,
    group_metrics,
    mae,
    make_report,
    per_time_mae,
    rmse,
    target_groups,
    write_comparison_csv,
    write_importance_csv,
    write_per_time_csv,
    write_showcase_csv,
)
from invdyg.model import DisentangledDynamicGraphNet, ModelConfig, build_index
from invdyg.preprocess import build_dynamic_graph

from conftest import make_table


def test_metric_examples():
    assert rmse([1, 2], [1, 2]) == 0.0 and mae([1, 2], [1, 2]) == 0.0
    assert rmse([1, 2], [1, 4]) == pytest.approx(math.sqrt(2))
    assert mae([1, 2], [1, 4]) == 1.0
    assert mae([1, 2], [1, 4], mask=[True, False]) == 0.0
    with pytest.raises(ValueError):
        mae([1.0], [2.0], mask=[False])


def test_per_time_examples():
    assert per_time_mae([1, 2, 3], [1, 2, 3], [1, 1, 2]) == {1: 0.0, 2: 0.0}
    assert per_time_mae([5.0], [4.0], [3]) == {3: 1.0}
    assert per_time_mae([1, 3, 2], [0, 0, 0], [1, 1, 2]) == {1: 2.0, 2: 2.0}
    assert per_time_mae([1, 3, 2], [0, 0, 0], [1, 1, 2], mask=[True, True, False]) == {1: 2.0}


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 7, elements=st.floats(-1e3, 1e3)))
def test_rmse_at_least_mae(p, y):
    assert rmse(p, y) >= mae(p, y) - 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_group_decomposition(seed, n_groups):
    rng = np.random.default_rng(seed)
    p, y = rng.normal(size=30), rng.normal(size=30)
    groups = rng.integers(0, n_groups, size=30)
    g = group_metrics(p, y, groups)
    assert sum(c["count"] for c in g.values()) == 30
    weighted = sum(c["count"] * c["rmse"] ** 2 for c in g.values()) / 30
    assert weighted == pytest.approx(rmse(p, y) ** 2, rel=1e-12)


def _report(v, seed=None):
    return make_report("m", [v, v], [0.0, 0.0], [1, 2], ["a", "b"], seed=seed)


def test_aggregate_examples():
    single = aggregate_seeds([_report(2.0, 0)])
    assert single.mae == 2.0 and single.mae_std is None
    assert "mae_std" not in single.to_dict() and "mae_std" not in single.groups["a"]
    two = aggregate_seeds([_report(2.0, 0), _report(4.0, 1)])
    assert two.mae == 3.0 and two.mae_std == 1.0
    assert two.groups["a"]["mae"] == 3.0 and two.groups["a"]["mae_std"] == 1.0
    assert two.seeds == [0, 1]
    same = aggregate_seeds([_report(2.0), _report(2.0)])
    assert same.rmse_std == 0.0


def test_aggregate_mismatch():
    other = make_report("m", [1.0], [0.0], [1], ["c"])
    with pytest.raises(ValueError):
        aggregate_seeds([_report(1.0), other])
    with pytest.raises(ValueError):
        aggregate_seeds([])


def test_report_round_trip():
    r = aggregate_seeds([_report(1.0, 0), _report(3.0, 1)])
    back = MetricsReport.from_dict(r.to_dict())
    assert back == r


def test_comparison_table_format(tmp_path):
    full = aggregate_seeds([_report(1.0, s) for s in range(3)])
    ma = make_report("MA", [1.0, 1.0], [0.0, 0.0], [1, 2], ["a", "b"])
    header, rows = comparison_rows([full, ma])
    assert header == ["method", "a RMSE", "a MAE", "b RMSE", "b MAE", "Average RMSE", "Average MAE"]
    assert rows[0][1] == "1.0000±0.0000" and rows[1][1] == "1.0000"
    write_comparison_csv([full, ma], tmp_path / "c.csv")
    assert list(csv.reader(open(tmp_path / "c.csv")))[0] == header


def test_csv_writers(tmp_path):
    write_per_time_csv({2: 0.5, 1: 1.5}, tmp_path / "pt.csv")
    assert open(tmp_path / "pt.csv").read().splitlines() == ["day,mae", "1,1.5", "2,0.5"]
    write_showcase_csv([3, 2], [1.0, 2.0], [1.5, 2.5], tmp_path / "s.csv")
    assert open(tmp_path / "s.csv").read().splitlines()[1] == "2,2.0,2.5"


def _graph(env=None):
    t = make_table(5, 4, seed=2, env=env)
    g, _, _ = build_dynamic_graph(TemporalSplit(t, t, t, mode="by-patient"), 2)
    return t, g


def test_target_groups():
    t, g = _graph(env=["x", "y"])
    idx = build_index(g)
    groups = target_groups(g, idx, "env")
    assert groups == [t.env[t.row(p, d)] for p, d in zip(idx.target_node, idx.target_time)]
    cats = target_groups(g, idx, "c")
    assert cats[0] == f"c={t.categorical[t.row(idx.target_node[0], idx.target_time[0]), 0]}"
    _, g2 = _graph()
    with pytest.raises(ValueError):
        target_groups(g2, build_index(g2), "env")


def test_importance_shape_and_sign(tmp_path):
    _, g = _graph()
    model = DisentangledDynamicGraphNet(g.schema, ModelConfig())
    imp = feature_importance(model, g)
    assert imp.features == ["a", "b", "y", "c", "d"] and imp.days == [2, 3, 4]
    assert imp.values.shape == (5, 3) and np.all(imp.values >= 0)
    write_importance_csv(imp, tmp_path / "imp.csv")
    assert len(open(tmp_path / "imp.csv").read().splitlines()) == 1 + 5 * 3


def test_importance_matches_per_target_oracle():
    _, g = _graph()
    model = DisentangledDynamicGraphNet(g.schema, ModelConfig(seed=5))
    idx = build_index(g)
    imp = feature_importance(model, g)
    day = imp.days[1]
    grads = []
    for i in np.flatnonzero(idx.target_time == day):
        x = model.embed(idx.x).detach().requires_grad_(True)
        pred = model.predict_invariant(model(idx, embedded=x).final_inv[idx.target_prev])
        ((pred[i] - idx.y[i]) ** 2).backward()
        grads.append(x.grad[idx.target_prev[i]].abs())
    mean = torch.stack(grads).mean(0)
    np.testing.assert_allclose(imp.values[:3, 1], mean[:3].numpy(), rtol=1e-10)
    np.testing.assert_allclose(imp.values[3, 1], mean[3:5].mean().item(), rtol=1e-10)


def test_disconnected_feature_has_zero_importance():
    _, g = _graph()
    model = DisentangledDynamicGraphNet(g.schema, ModelConfig())
    with torch.no_grad():
        model.input_proj.weight[:, 1] = 0.0
    imp = feature_importance(model, g)
    assert np.all(imp.values[1] == 0.0)


def test_importance_patient_filter():
    _, g = _graph()
    model = DisentangledDynamicGraphNet(g.schema, ModelConfig())
    one = feature_importance(model, g, patient="p3")
    assert one.days == [2, 3, 4]
    with pytest.raises(ValueError):
        feature_importance(model, g, patient="nobody")
