"""Metrics, grouped and per-day breakdowns, seed aggregation and gradient importance."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import DisentangledDynamicGraphNet, GraphIndex, build_index
from .preprocess import DynamicGraph, category_of

OVERALL = "Average"


def _masked(pred, label, mask=None) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    label = np.asarray(label, dtype=np.float64).reshape(-1)
    if pred.shape != label.shape:
        raise ValueError(f"prediction and label shapes differ: {pred.shape} vs {label.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        pred, label = pred[mask], label[mask]
    if len(pred) == 0:
        raise ValueError("no labeled pairs to score")
    return pred, label


def rmse(pred, label, mask=None) -> float:
    p, y = _masked(pred, label, mask)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def mae(pred, label, mask=None) -> float:
    p, y = _masked(pred, label, mask)
    return float(np.mean(np.abs(p - y)))


def per_time_mae(pred, label, days, mask=None) -> dict[int, float]:
    """MAE restricted to each day; days without labels are left out."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    label = np.asarray(label, dtype=np.float64).reshape(-1)
    days = np.asarray(days).reshape(-1)
    keep = np.ones(len(pred), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    curve = {}
    for day in np.unique(days[keep]):
        sel = keep & (days == day)
        curve[int(day)] = float(np.mean(np.abs(pred[sel] - label[sel])))
    return curve


def group_metrics(pred, label, groups) -> dict[str, dict]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    label = np.asarray(label, dtype=np.float64).reshape(-1)
    groups = np.asarray([str(g) for g in groups])
    out = {}
    for g in sorted(set(groups.tolist())):
        sel = groups == g
        out[g] = {"rmse": rmse(pred[sel], label[sel]), "mae": mae(pred[sel], label[sel]), "count": int(sel.sum())}
    return out


@dataclass
class MetricsReport:
    """Scores of one method; aggregated reports carry ``*_std`` entries when built from >= 2 seeds."""

    method: str
    rmse: float
    mae: float
    count: int
    groups: dict = field(default_factory=dict)
    per_time: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    rmse_std: float | None = None
    mae_std: float | None = None

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "rmse": self.rmse,
            "mae": self.mae,
            "count": self.count,
            "groups": self.groups,
            "per_time": {str(k): v for k, v in self.per_time.items()},
            "seeds": list(self.seeds),
        }
        if self.rmse_std is not None:
            d["rmse_std"] = self.rmse_std
            d["mae_std"] = self.mae_std
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            method=d["method"],
            rmse=float(d["rmse"]),
            mae=float(d["mae"]),
            count=int(d["count"]),
            groups=d.get("groups", {}),
            per_time={int(k): float(v) for k, v in d.get("per_time", {}).items()},
            seeds=list(d.get("seeds", [])),
            rmse_std=d.get("rmse_std"),
            mae_std=d.get("mae_std"),
        )


def make_report(method: str, pred, label, days, groups=None, seed=None) -> MetricsReport:
    pred, label = _masked(pred, label)
    return MetricsReport(
        method=method,
        rmse=rmse(pred, label),
        mae=mae(pred, label),
        count=len(pred),
        groups=group_metrics(pred, label, groups) if groups is not None else {},
        per_time=per_time_mae(pred, label, days),
        seeds=[] if seed is None else [seed],
    )


def _mean_std(values: list[float], with_std: bool) -> tuple[float, float | None]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), (float(a.std(ddof=0)) if with_std else None)


def aggregate_seeds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-cell mean and population std; std entries only for >= 2 reports."""
    if not reports:
        raise ValueError("need at least one report")
    keys = set(reports[0].groups)
    days = set(reports[0].per_time)
    for r in reports[1:]:
        if set(r.groups) != keys or set(r.per_time) != days:
            raise ValueError("reports have mismatched groups or days")
    multi = len(reports) >= 2
    rmse_m, rmse_s = _mean_std([r.rmse for r in reports], multi)
    mae_m, mae_s = _mean_std([r.mae for r in reports], multi)
    groups = {}
    for g in sorted(keys):
        cell = {"count": int(reports[0].groups[g]["count"])}
        for metric in ("rmse", "mae"):
            m, s = _mean_std([r.groups[g][metric] for r in reports], multi)
            cell[metric] = m
            if s is not None:
                cell[f"{metric}_std"] = s
        groups[g] = cell
    per_time = {d: float(np.mean([r.per_time[d] for r in reports])) for d in sorted(days)}
    return MetricsReport(
        method=reports[0].method,
        rmse=rmse_m,
        mae=mae_m,
        count=reports[0].count,
        groups=groups,
        per_time=per_time,
        seeds=[s for r in reports for s in r.seeds],
        rmse_std=rmse_s,
        mae_std=mae_s,
    )


def target_groups(graph: DynamicGraph, index: GraphIndex, by: str = "env") -> list[str]:
    """Group key of every scored target: its environment or a categorical feature's category."""
    if by == "env":
        if any(e is None for e in index.target_env):
            raise ValueError("graph carries no environment tags")
        return [str(e) for e in index.target_env]
    cats = np.concatenate([category_of(graph, s, by) for s in graph.snapshots])
    return [f"{by}={int(c)}" for c in cats[index.target_event.numpy()]]


@dataclass
class ImportanceTable:
    """``values[f, j]``: mean |dL/dx_f| for the losses of day ``days[j]``."""

    features: list
    days: list
    values: np.ndarray

    def mean_importance(self) -> dict[str, float]:
        return {f: float(v) for f, v in zip(self.features, self.values.mean(axis=1))}

    def ranking(self, features: Sequence[str] | None = None) -> list[str]:
        scores = self.mean_importance()
        names = list(features) if features is not None else self.features
        return sorted(names, key=lambda f: -scores[f])

    def to_rows(self) -> list[tuple[str, int, float]]:
        return [(f, int(d), float(self.values[i, j])) for i, f in enumerate(self.features) for j, d in enumerate(self.days)]


def feature_importance(
    model: DisentangledDynamicGraphNet, graph: DynamicGraph, patient: str | None = None
) -> ImportanceTable:
    """Gradient saliency of each target's own squared error.

    For target ``(n, t)`` the loss ``L_{n,t}`` is differentiated with respect
    to the scaled inputs of event ``(n, t-1)``, which the prediction reads.
    Categorical features use the mean |gradient| over their embedding
    dimensions. Values are averaged over patients (or just ``patient``).
    """
    index = build_index(graph, model.config.history_window)
    schema = graph.schema
    n_cont, e_dim = model.n_cont, model.config.cat_embed_dim
    targets = np.arange(len(index.y))
    if patient is not None:
        targets = np.array([i for i in targets if index.target_node[i] == patient], dtype=np.int64)
        if len(targets) == 0:
            raise ValueError(f"patient {patient!r} has no scored targets")
    days = sorted(set(index.target_time[targets].tolist()))
    features = [*schema.continuous_names, *schema.categorical_names]
    sums = np.zeros((len(features), len(days)))
    counts = np.zeros(len(days))

    was_training = model.training
    model.eval()
    embedded = model.embed(index.x).detach().requires_grad_(True)
    state = model.forward(index, embedded=embedded)
    pred = model.predict_invariant(state.final_inv[index.target_prev])
    losses = (pred - index.y) ** 2
    for n, i in enumerate(targets):
        (grad,) = torch.autograd.grad(losses[i], embedded, retain_graph=n < len(targets) - 1)
        g = grad[int(index.target_prev[i])].abs().numpy()
        col = days.index(int(index.target_time[i]))
        sums[:n_cont, col] += g[:n_cont]
        sums[n_cont:, col] += g[n_cont:].reshape(-1, e_dim).mean(axis=1)
        counts[col] += 1
    model.train(was_training)
    return ImportanceTable(features=features, days=days, values=sums / counts)


def write_per_time_csv(curve: dict, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "mae"])
        for day in sorted(curve):
            w.writerow([day, repr(float(curve[day]))])


def write_importance_csv(table: ImportanceTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "day", "importance"])
        for f, d, v in table.to_rows():
            w.writerow([f, d, repr(v)])


def write_showcase_csv(days, labels, preds, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "label", "prediction"])
        for d, y, p in sorted(zip(days, labels, preds)):
            w.writerow([int(d), repr(float(y)), repr(float(p))])


def _cell(mean: float, std: float | None) -> str:
    return f"{mean:.4f}" if std is None else f"{mean:.4f}±{std:.4f}"


def comparison_rows(reports: Sequence[MetricsReport]) -> tuple[list[str], list[list[str]]]:
    """Methods x (per-group and overall RMSE / MAE) table cells, ``mean±std`` when available."""
    groups = sorted({g for r in reports for g in r.groups})
    header = ["method"]
    for g in [*groups, OVERALL]:
        header += [f"{g} RMSE", f"{g} MAE"]
    rows = []
    for r in reports:
        row = [r.method]
        for g in groups:
            cell = r.groups.get(g)
            if cell is None:
                row += ["", ""]
                continue
            row += [_cell(cell["rmse"], cell.get("rmse_std")), _cell(cell["mae"], cell.get("mae_std"))]
        row += [_cell(r.rmse, r.rmse_std), _cell(r.mae, r.mae_std)]
        rows.append(row)
    return header, rows


def write_comparison_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    header, rows = comparison_rows(reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def save_reports(reports: Sequence[MetricsReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n", encoding="utf-8")
