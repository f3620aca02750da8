"""Leak-free scaling, one-hot encoding, per-day KNN edges and dynamic graph assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import CohortTable, FeatureSchema, TemporalSplit
from .errors import DataValidationError

DEFAULT_K = 10
PAPER_K = 100  # value used on the full-size ICU cohort


@dataclass(frozen=True, eq=False)
class StandardScaler:
    """Per-feature ``(x - mean) / std`` with population std.

    Zero-variance features are stored with std 1 and flagged in ``constant``.
    """

    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray
    fitted_on: int

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardScaler":
        return cls(
            names=tuple(d["names"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            constant=np.asarray(d["constant"], dtype=bool),
            fitted_on=int(d["fitted_on"]),
        )


def fit_scaler(train: CohortTable) -> StandardScaler:
    if len(train) == 0:
        raise DataValidationError("cannot fit a scaler on an empty table")
    x = train.continuous
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=0)
    constant = std == 0
    std = np.where(constant, 1.0, std)
    for a in (mean, std, constant):
        a.flags.writeable = False
    return StandardScaler(
        names=train.schema.continuous_names, mean=mean, std=std, constant=constant, fitted_on=len(train)
    )


def encode(table: CohortTable, scaler: StandardScaler) -> np.ndarray:
    """Scaled continuous block followed by one one-hot block per categorical feature."""
    schema = table.schema
    if tuple(scaler.names) != schema.continuous_names:
        raise DataValidationError("scaler was fitted on a different continuous schema")
    blocks = [scaler.transform(table.continuous)]
    for j, (name, count) in enumerate(schema.categorical_features):
        idx = table.categorical[:, j]
        if ((idx < 0) | (idx >= count)).any():
            raise DataValidationError(f"unseen category for {name!r}")
        blocks.append(np.eye(count)[idx])
    return np.concatenate(blocks, axis=1) if blocks else np.zeros((len(table), 0))


def encoded_dim(schema: FeatureSchema) -> int:
    return len(schema.continuous_features) + sum(schema.cardinalities)


def l1_distances(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    out = np.empty((len(x), len(x)))
    step = max(1, 2_000_000 // max(1, x.size))
    for s in range(0, len(x), step):
        out[s : s + step] = np.abs(x[s : s + step, None, :] - x[None, :, :]).sum(axis=-1)
    return out


def knn_edges(features: np.ndarray, k: int) -> np.ndarray:
    """Directed edges from every node to its ``min(k, n-1)`` nearest others under L1.

    Ties go to the smaller node index. Returns an ``(E, 2)`` int array of
    ``(src, dst)`` rows, grouped by source and nearest-first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(features)
    kk = min(k, n - 1)
    if kk <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    dist = l1_distances(features)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :kk]
    src = np.repeat(np.arange(n), kk)
    return np.column_stack([src, nearest.reshape(-1)]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Snapshot:
    """One day of the dynamic graph.

    ``context`` snapshots supply history only: they are never scored or trained on.
    """

    time: int
    node_ids: tuple[str, ...]
    features: np.ndarray
    edges: np.ndarray
    label: np.ndarray
    label_mask: np.ndarray
    env: tuple | None = None
    context: bool = False

    def __post_init__(self):
        n = len(self.node_ids)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if (edges[:, 0] == edges[:, 1]).any():
                raise DataValidationError(f"day {self.time}: self-loop edge")
            if edges.min() < 0 or edges.max() >= n:
                raise DataValidationError(f"day {self.time}: edge endpoint out of range")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64).reshape(n, -1))
        object.__setattr__(self, "label", np.asarray(self.label, dtype=np.float64).reshape(n))
        object.__setattr__(self, "label_mask", np.asarray(self.label_mask, dtype=bool).reshape(n))

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def out_neighbors(self, local: int) -> np.ndarray:
        return self.edges[self.edges[:, 0] == local, 1]


@dataclass(frozen=True, eq=False)
class DynamicGraph:
    snapshots: tuple[Snapshot, ...]
    schema: FeatureSchema
    scaler: StandardScaler
    _lookup: dict = field(default=None, repr=False)

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        times = [s.time for s in snaps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataValidationError("snapshot times must be strictly increasing")
        object.__setattr__(self, "snapshots", snaps)
        lookup = {}
        for si, snap in enumerate(snaps):
            for li, nid in enumerate(snap.node_ids):
                lookup[(nid, snap.time)] = (si, li)
        object.__setattr__(self, "_lookup", lookup)

    @property
    def times(self) -> list[int]:
        return [s.time for s in self.snapshots]

    def locate(self, node_id: str, time: int) -> tuple[int, int] | None:
        """(snapshot index, local node index) of ``node_id`` on day ``time``."""
        return self._lookup.get((node_id, time))

    def node_ids(self) -> list[str]:
        return list(dict.fromkeys(n for s in self.snapshots for n in s.node_ids))


def _snapshots(
    table: CohortTable, encoded: np.ndarray, k: int, n_cont: int, *, context: bool = False
) -> list[Snapshot]:
    snaps = []
    target = table.target
    for day in table.unique_days():
        rows = np.flatnonzero(table.days == day)
        feats = encoded[rows]
        snaps.append(
            Snapshot(
                time=int(day),
                node_ids=tuple(table.patient_ids[rows].tolist()),
                features=feats,
                edges=knn_edges(feats[:, :n_cont], k),
                label=target[rows],
                label_mask=np.ones(len(rows), dtype=bool),
                env=None if table.env is None else tuple(table.env[rows].tolist()),
                context=context,
            )
        )
    return snaps


def graph_from_table(table: CohortTable, scaler: StandardScaler, k: int = DEFAULT_K, context_table: CohortTable | None = None) -> DynamicGraph:
    n_cont = len(table.schema.continuous_features)
    snaps = []
    if context_table is not None and len(context_table):
        snaps += _snapshots(context_table, encode(context_table, scaler), k, n_cont, context=True)
    snaps += _snapshots(table, encode(table, scaler), k, n_cont)
    return DynamicGraph(snapshots=tuple(snaps), schema=table.schema, scaler=scaler)


def build_dynamic_graph(
    split: TemporalSplit, k: int = DEFAULT_K, *, context: bool | None = None
) -> tuple[DynamicGraph, DynamicGraph, DynamicGraph]:
    """Fit the scaler on ``split.train`` and build one graph per part.

    In ``by-time`` splits the validation and test graphs are prefixed with the
    earlier parts as context snapshots, so their first labeled day still has
    history.
    """
    if context is None:
        context = split.mode == "by-time"
    scaler = fit_scaler(split.train)
    train = graph_from_table(split.train, scaler, k)
    if context:
        val_ctx = split.train
        test_ctx = _concat(split.train, split.val)
    else:
        val_ctx = test_ctx = None
    val = graph_from_table(split.val, scaler, k, context_table=val_ctx)
    test = graph_from_table(split.test, scaler, k, context_table=test_ctx)
    return train, val, test


def _concat(a: CohortTable, b: CohortTable) -> CohortTable:
    env = None
    if a.env is not None or b.env is not None:
        env = [*(a.env if a.env is not None else [None] * len(a)), *(b.env if b.env is not None else [None] * len(b))]
    return CohortTable(
        schema=a.schema,
        patient_ids=np.concatenate([a.patient_ids, b.patient_ids]),
        days=np.concatenate([a.days, b.days]),
        continuous=np.concatenate([a.continuous, b.continuous]),
        categorical=np.concatenate([a.categorical, b.categorical]),
        env=env,
    )


def save_graph_jsonl(graph: DynamicGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in graph.snapshots:
            rec = {
                "t": s.time,
                "nodes": list(s.node_ids),
                "x": s.features.tolist(),
                "edges": s.edges.tolist(),
                "y": s.label.tolist(),
                "mask": s.label_mask.tolist(),
            }
            if s.env is not None:
                rec["env"] = list(s.env)
            if s.context:
                rec["context"] = True
            fh.write(json.dumps(rec) + "\n")


def load_graph_jsonl(path: str | Path, schema: FeatureSchema, scaler: StandardScaler) -> DynamicGraph:
    snaps = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            snaps.append(
                Snapshot(
                    time=int(rec["t"]),
                    node_ids=tuple(rec["nodes"]),
                    features=np.asarray(rec["x"], dtype=np.float64),
                    edges=np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2),
                    label=np.asarray(rec["y"], dtype=np.float64),
                    label_mask=np.asarray(rec["mask"], dtype=bool),
                    env=tuple(rec["env"]) if "env" in rec else None,
                    context=bool(rec.get("context", False)),
                )
            )
    return DynamicGraph(snapshots=tuple(snaps), schema=schema, scaler=scaler)


def category_of(graph: DynamicGraph, snapshot: Snapshot, feature: str) -> np.ndarray:
    """Recover the category index of ``feature`` for every node of ``snapshot``."""
    schema = graph.schema
    offset = len(schema.continuous_features)
    for name, count in schema.categorical_features:
        if name == feature:
            return snapshot.features[:, offset : offset + count].argmax(axis=1)
        offset += count
    raise KeyError(feature)
