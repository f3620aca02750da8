"""Statistical one-step forecasters and the two model ablations."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, build_index
from .preprocess import DynamicGraph
from .training import TrainConfig

DEFAULT_WINDOW = 3
DEFAULT_ORDER = 3
ABLATIONS = ("erm", "entangled")


def _series(series: Sequence[float]) -> np.ndarray:
    y = np.asarray(series, dtype=np.float64).reshape(-1)
    if not np.isfinite(y).all():
        raise ValueError("series contains non-finite values")
    return y


def ma_forecast(series: Sequence[float], w: int = DEFAULT_WINDOW) -> float:
    """Mean of the last ``min(w, len(series))`` values."""
    y = _series(series)
    if len(y) == 0:
        raise ValueError("cannot forecast from an empty series")
    if w < 1:
        raise ValueError("window must be >= 1")
    return float(y[-w:].mean())


def _lagged(y: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(y)
    cols = [np.ones(n - p)] + [y[p - i : n - i] for i in range(1, p + 1)]
    return np.column_stack(cols), y[p:]


def ar_fit(series: Sequence[float], p: int = DEFAULT_ORDER) -> np.ndarray:
    """Least-squares ``(c, phi_1, ..., phi_p)`` for ``y_t = c + sum_i phi_i y_{t-i}``.

    Solves the normal equations; rank-deficient systems fall back to the
    pseudo-inverse (minimum-norm) solution.
    """
    y = _series(series)
    if p < 1:
        raise ValueError("order must be >= 1")
    if len(y) < p + 2:
        raise ValueError(f"AR({p}) needs at least {p + 2} values, got {len(y)}")
    X, target = _lagged(y, p)
    gram = X.T @ X
    rhs = X.T @ target
    if np.linalg.matrix_rank(gram) == gram.shape[0] and np.linalg.cond(gram) < 1e12:
        return np.linalg.solve(gram, rhs)
    return np.linalg.pinv(X) @ target


def ar_forecast(series: Sequence[float], coef: np.ndarray) -> float:
    y = _series(series)
    p = len(coef) - 1
    if len(y) < p:
        raise ValueError(f"need {p} past values, got {len(y)}")
    lags = y[::-1][:p]
    return float(coef[0] + lags @ coef[1:])


def ar_one_step(series: Sequence[float], p: int = DEFAULT_ORDER) -> float:
    """Fit on ``series`` and forecast the next value.

    The order is clamped so the regression keeps at least one more row than
    coefficients (``p <= (len - 2) // 2``); unclamped fits on a handful of
    points interpolate exactly and extrapolate wildly. Series too short for
    AR(1) fall back to the last value.
    """
    y = _series(series)
    if len(y) == 0:
        raise ValueError("cannot forecast from an empty series")
    order = min(p, (len(y) - 2) // 2)
    if order < 1:
        return float(y[-1])
    return ar_forecast(y, ar_fit(y, order))


def one_step_forecasts(
    graph: DynamicGraph, method: str, *, w: int = DEFAULT_WINDOW, p: int = DEFAULT_ORDER
) -> tuple[np.ndarray, np.ndarray]:
    """Forecast every scored target of ``graph`` from the patient's earlier labels.

    Targets follow the ordering of :func:`invdyg.model.build_index`, so the
    output lines up with model predictions. Returns ``(predictions, labels)``
    in original units.
    """
    if method not in ("ma", "ar"):
        raise ConfigError(f"unknown statistical baseline {method!r}")
    history: dict[str, dict[int, float]] = {}
    for snap in graph.snapshots:
        for nid, value in zip(snap.node_ids, snap.label):
            history.setdefault(nid, {})[snap.time] = float(value)
    index = build_index(graph)
    preds = np.empty(len(index.y_raw))
    for i, (nid, t) in enumerate(zip(index.target_node, index.target_time)):
        days = sorted(d for d in history[nid] if d < t)
        series = [history[nid][d] for d in days]
        preds[i] = ma_forecast(series, w) if method == "ma" else ar_one_step(series, p)
    return preds, index.y_raw.copy()


def ablation_config(
    kind: str, model_config: ModelConfig = ModelConfig(), train_config: TrainConfig = TrainConfig()
) -> tuple[ModelConfig, TrainConfig]:
    """``erm`` switches the invariance term off; ``entangled`` drops the variant branch."""
    if kind == "erm":
        return model_config, replace(train_config, lam=0.0)
    if kind == "entangled":
        # no variant branch, so there is no invariance term to weight
        return replace(model_config, entangled=True), replace(train_config, lam=0.0)
    raise ConfigError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
