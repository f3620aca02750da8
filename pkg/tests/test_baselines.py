import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invdyg.baselines import (
    ablation_config,
    ar_fit,
    ar_forecast,
    ar_one_step,
    ma_forecast,
    one_step_forecasts,
)
from invdyg.datamodel import TemporalSplit, split_temporal
from invdyg.errors import ConfigError
from invdyg.model import DisentangledDynamicGraphNet, ModelConfig, build_index
from invdyg.preprocess import build_dynamic_graph
from invdyg.training import TrainConfig

from conftest import make_table
from oracles import ols_ar


def test_ma_examples():
    assert ma_forecast([1, 2, 3], 2) == 2.5
    assert ma_forecast([5, 5, 5], 7) == 5.0
    assert ma_forecast([4, 9, 1], 1) == 1.0
    with pytest.raises(ValueError):
        ma_forecast([], 3)
    with pytest.raises(ValueError):
        ma_forecast([1.0], 0)


def test_ar_recovers_noiseless_coefficient():
    y = [8.0 * 0.5**i for i in range(12)]
    c, phi = ar_fit(y, 1)
    assert abs(phi - 0.5) < 1e-9 and abs(c) < 1e-9


def test_ar_constant_series_predicts_constant():
    y = [3.0] * 8
    assert ar_forecast(y, ar_fit(y, 2)) == pytest.approx(3.0, abs=1e-9)


def test_ar_length_contract():
    ar_fit([1.0, 2.0, 4.0, 3.0, 5.0], 3)
    with pytest.raises(ValueError):
        ar_fit([1.0, 2.0, 4.0, 3.0], 3)
    with pytest.raises(ValueError):
        ar_fit([1.0, 2.0, 3.0], 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(12, 40))
def test_ar_matches_lstsq_oracle(seed, p, n):
    y = np.random.default_rng(seed).normal(size=n).cumsum()
    np.testing.assert_allclose(ar_fit(y, p), ols_ar(y, p), rtol=1e-6, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100), st.integers(2, 20))
def test_translation_equivariance(seed, shift, n):
    y = np.random.default_rng(seed).normal(size=n)
    assert ma_forecast(y + shift, 3) == pytest.approx(ma_forecast(y, 3) + shift, abs=1e-9)
    assert ar_one_step(y + shift, 3) == pytest.approx(ar_one_step(y, 3) + shift, abs=1e-6)


def test_ar_one_step_clamps_order():
    assert ar_one_step([2.0]) == 2.0
    assert ar_one_step([1.0, 2.0, 3.0]) == 3.0
    y = [1.0, 2.0, 4.0, 3.0]
    assert ar_one_step(y, 3) == pytest.approx(ar_forecast(y, ar_fit(y, 1)))


def test_one_step_forecasts_align_with_targets():
    t = make_table(3, 6)
    split = split_temporal(t, "by-time", (0.5, 0.25, 0.25))
    _, _, te = build_dynamic_graph(split, 2)
    pred, label = one_step_forecasts(te, "ma", w=2)
    idx = build_index(te)
    np.testing.assert_array_equal(label, idx.y_raw)
    for i, (pid, day) in enumerate(zip(idx.target_node, idx.target_time)):
        hist = [t.target[t.row(pid, d)] for d in (day - 2, day - 1)]
        assert pred[i] == pytest.approx(np.mean(hist))
    with pytest.raises(ConfigError):
        one_step_forecasts(te, "arima")


def test_ablation_configs():
    mc, tc = ModelConfig(hidden_dim=4, n_heads=1), TrainConfig(lam=3.0)
    m, t = ablation_config("erm", mc, tc)
    assert m == mc and t.lam == 0.0 and t.n_variant_samples == tc.n_variant_samples
    m, t = ablation_config("entangled", mc, tc)
    assert m.entangled and m.hidden_dim == 4
    tb = make_table()
    g, _, _ = build_dynamic_graph(TemporalSplit(tb, tb, tb, mode="by-patient"), 2)
    assert DisentangledDynamicGraphNet(g.schema, m).variant_parameter_count() == 0
    with pytest.raises(ConfigError):
        ablation_config("dysat", mc, tc)
