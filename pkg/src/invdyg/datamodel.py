"""Cohort tables: schema, validated ingestion, CSV round-trip, and splitting.

A cohort is a long-format table with one row per (patient, day). Rows carry
the continuous markers, the categorical attributes and an optional
environment tag. The regression target is one of the continuous columns; the
label for day ``t`` is that column's value on day ``t``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataValidationError, SchemaError, SplitError, UniquenessError

# (name, unit, mean, std) of the nine biochemical markers of the ICU albumin cohort.
ANIC_CONTINUOUS = (
    ("Albumin", "g/L", 36.9, 5.5),
    ("IndirectBilirubin", "umol/L", 12.6, 13.0),
    ("TotalBilirubin", "umol/L", 25.4, 49.2),
    ("DirectBilirubin", "umol/L", 12.7, 36.7),
    ("Hb", "g/L", 106.5, 23.2),
    ("ALT", "u/L", 85.4, 296.9),
    ("AST", "u/L", 102.0, 434.9),
    ("MCH", "pg/L", 30.0, 2.5),
    ("MCHC", "g/L", 324.4, 13.6),
)

ANIC_CATEGORICAL = (
    ("Age", 2),
    ("Sex", 2),
    ("Disease", 3),
    ("EN", 2),
    ("PN", 2),
    ("PN_EN", 2),
    ("ALB", 2),
    ("EN_ALB", 2),
    ("PN_ALB", 2),
    ("EN_PN_ALB", 2),
)

SPLIT_MODES = ("by-time", "by-patient", "by-env")


@dataclass(frozen=True)
class FeatureSchema:
    continuous_features: tuple[tuple[str, str], ...]
    categorical_features: tuple[tuple[str, int], ...]
    target_name: str

    def __post_init__(self):
        object.__setattr__(self, "continuous_features", tuple((str(n), str(u)) for n, u in self.continuous_features))
        object.__setattr__(self, "categorical_features", tuple((str(n), int(c)) for n, c in self.categorical_features))
        names = self.continuous_names + self.categorical_names
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"feature names must be unique, duplicated: {dupes}")
        if self.target_name not in self.continuous_names:
            raise SchemaError(f"target {self.target_name!r} is not a continuous feature")
        for name, count in self.categorical_features:
            if count < 2:
                raise SchemaError(f"categorical feature {name!r} needs at least 2 categories, got {count}")

    @property
    def continuous_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.continuous_features)

    @property
    def categorical_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.categorical_features)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.categorical_features)

    @property
    def target_index(self) -> int:
        return self.continuous_names.index(self.target_name)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.continuous_names + self.categorical_names

    @classmethod
    def anic_like(cls) -> "FeatureSchema":
        """The nine-marker / ten-attribute layout of the ICU albumin cohort."""
        return cls(
            continuous_features=tuple((n, u) for n, u, _, _ in ANIC_CONTINUOUS),
            categorical_features=ANIC_CATEGORICAL,
            target_name="Albumin",
        )

    def to_dict(self) -> dict:
        return {
            "continuous": [{"name": n, "unit": u} for n, u in self.continuous_features],
            "categorical": [{"name": n, "cardinality": c} for n, c in self.categorical_features],
            "target": self.target_name,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FeatureSchema":
        try:
            return cls(
                continuous_features=tuple((d["name"], d.get("unit", "")) for d in payload["continuous"]),
                categorical_features=tuple((d["name"], d["cardinality"]) for d in payload["categorical"]),
                target_name=payload["target"],
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema JSON: {exc!r}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class CohortRecord(NamedTuple):
    patient_id: str
    day: int
    continuous: tuple[float, ...]
    categorical: tuple[int, ...]
    target: float
    env: str | None = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CohortTable:
    """Column-oriented, read-only cohort.

    ``records`` yields :class:`CohortRecord` views; the arrays are the storage.
    """

    schema: FeatureSchema
    patient_ids: np.ndarray
    days: np.ndarray
    continuous: np.ndarray
    categorical: np.ndarray
    env: np.ndarray | None = None
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.patient_ids)
        pids = np.asarray([str(p) for p in self.patient_ids], dtype=object)
        days = np.asarray(self.days, dtype=np.int64).reshape(n)
        cont = np.asarray(self.continuous, dtype=np.float64).reshape(n, len(self.schema.continuous_features))
        cat = np.asarray(self.categorical, dtype=np.int64).reshape(n, len(self.schema.categorical_features))
        env = None
        if self.env is not None:
            env = np.asarray([None if e is None else str(e) for e in self.env], dtype=object)
            if len(env) != n:
                raise DataValidationError("env tags must align with records")
            if all(e is None for e in env):
                env = None
        object.__setattr__(self, "patient_ids", _frozen(pids))
        object.__setattr__(self, "days", _frozen(days))
        object.__setattr__(self, "continuous", _frozen(cont))
        object.__setattr__(self, "categorical", _frozen(cat))
        object.__setattr__(self, "env", None if env is None else _frozen(env))
        self._validate()

    def _validate(self):
        if np.any(self.days < 1):
            row = int(np.argmax(self.days < 1))
            raise DataValidationError(f"record {row}: day must be a positive integer")
        if not np.all(np.isfinite(self.continuous)):
            row = int(np.argwhere(~np.isfinite(self.continuous))[0, 0])
            raise DataValidationError(f"record {row}: continuous values must be finite")
        for j, (name, count) in enumerate(self.schema.categorical_features):
            bad = (self.categorical[:, j] < 0) | (self.categorical[:, j] >= count)
            if bad.any():
                row = int(np.argmax(bad))
                raise DataValidationError(
                    f"record {row}: {name}={self.categorical[row, j]} outside [0, {count})"
                )
        index: dict[tuple[str, int], int] = {}
        for i, key in enumerate(zip(self.patient_ids, self.days.tolist())):
            if key in index:
                raise UniquenessError(f"record {i}: duplicate (patient, day) {key}, first seen at record {index[key]}")
            index[key] = i
        object.__setattr__(self, "_index", index)
        for pid, pdays in self.days_by_patient().items():
            if pdays[-1] - pdays[0] + 1 != len(pdays):
                raise DataValidationError(f"patient {pid}: days are not contiguous ({pdays[0]}..{pdays[-1]})")

    def __len__(self) -> int:
        return len(self.patient_ids)

    @property
    def target(self) -> np.ndarray:
        return self.continuous[:, self.schema.target_index]

    @property
    def records(self) -> list[CohortRecord]:
        return list(self.iter_records())

    def iter_records(self) -> Iterator[CohortRecord]:
        t = self.schema.target_index
        for i in range(len(self)):
            yield CohortRecord(
                patient_id=self.patient_ids[i],
                day=int(self.days[i]),
                continuous=tuple(float(v) for v in self.continuous[i]),
                categorical=tuple(int(v) for v in self.categorical[i]),
                target=float(self.continuous[i, t]),
                env=None if self.env is None else self.env[i],
            )

    def row(self, patient_id: str, day: int) -> int:
        return self._index[(str(patient_id), int(day))]

    def days_by_patient(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for pid, day in zip(self.patient_ids, self.days.tolist()):
            out.setdefault(pid, []).append(day)
        for pdays in out.values():
            pdays.sort()
        return out

    def unique_patients(self) -> list[str]:
        return list(dict.fromkeys(self.patient_ids.tolist()))

    def unique_days(self) -> list[int]:
        return sorted(set(self.days.tolist()))

    def subset(self, mask: np.ndarray) -> "CohortTable":
        mask = np.asarray(mask, dtype=bool)
        return CohortTable(
            schema=self.schema,
            patient_ids=self.patient_ids[mask],
            days=self.days[mask],
            continuous=self.continuous[mask],
            categorical=self.categorical[mask],
            env=None if self.env is None else self.env[mask],
        )

    def replace(self, **columns) -> "CohortTable":
        fields = dict(
            schema=self.schema,
            patient_ids=self.patient_ids,
            days=self.days,
            continuous=self.continuous,
            categorical=self.categorical,
            env=self.env,
        )
        fields.update(columns)
        return CohortTable(**fields)

    def env_of_patient(self) -> dict[str, str | None]:
        if self.env is None:
            return {p: None for p in self.unique_patients()}
        return dict(zip(self.patient_ids.tolist(), self.env.tolist()))

    def equals(self, other: "CohortTable") -> bool:
        if self.schema != other.schema or len(self) != len(other):
            return False
        same_env = (self.env is None and other.env is None) or (
            self.env is not None and other.env is not None and list(self.env) == list(other.env)
        )
        return (
            same_env
            and list(self.patient_ids) == list(other.patient_ids)
            and np.array_equal(self.days, other.days)
            and np.array_equal(self.continuous, other.continuous)
            and np.array_equal(self.categorical, other.categorical)
        )

    @classmethod
    def from_records(cls, schema: FeatureSchema, records: Sequence[CohortRecord]) -> "CohortTable":
        t = schema.target_index
        for i, r in enumerate(records):
            if r.continuous[t] != r.target:
                raise DataValidationError(f"record {i}: target field disagrees with the {schema.target_name} column")
        envs = [r.env for r in records]
        return cls(
            schema=schema,
            patient_ids=np.array([r.patient_id for r in records], dtype=object),
            days=np.array([r.day for r in records], dtype=np.int64),
            continuous=np.array([r.continuous for r in records], dtype=np.float64).reshape(len(records), -1),
            categorical=np.array([r.categorical for r in records], dtype=np.int64).reshape(len(records), -1),
            env=None if all(e is None for e in envs) else envs,
        )


@dataclass(frozen=True)
class TemporalSplit:
    train: CohortTable
    val: CohortTable
    test: CohortTable
    mode: str = "by-time"


def load_cohort(path: str | Path, schema: FeatureSchema) -> CohortTable:
    """Read a cohort CSV and validate it against ``schema``.

    Non-numeric or missing continuous values are rejected, never imputed.
    Error messages quote the 1-based CSV line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"cohort file not found: {path}")
    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, encoding="utf-8"
    )
    required = ["patient_id", "day", *schema.continuous_names, *schema.categorical_names]
    for col in required:
        if col not in frame.columns:
            raise SchemaError(f"{path}: missing column {col!r}")

    def line(i: int) -> int:
        return i + 2  # header is line 1

    def numeric(col: str, integer: bool) -> np.ndarray:
        text = frame[col].str.strip().to_numpy(dtype=str)
        arr = np.empty(len(text))
        for i, v in enumerate(text):
            # float() parses with correct rounding, so written reprs reload bit-exactly
            try:
                arr[i] = float(v)
            except ValueError:
                arr[i] = np.nan
            if not np.isfinite(arr[i]):
                raise DataValidationError(f"{path}: line {line(i)}: column {col!r} value {frame[col].iloc[i]!r} is not numeric")
        if integer:
            frac = arr != np.round(arr)
            if frac.any():
                i = int(np.argmax(frac))
                raise DataValidationError(f"{path}: line {line(i)}: column {col!r} must be an integer")
            return arr.astype(np.int64)
        return arr

    days = numeric("day", integer=True)
    if (days < 1).any():
        i = int(np.argmax(days < 1))
        raise DataValidationError(f"{path}: line {line(i)}: day must be a positive integer")
    cont = np.column_stack([numeric(c, False) for c in schema.continuous_names]) if schema.continuous_names else np.zeros((len(frame), 0))
    cat = np.column_stack([numeric(c, True) for c in schema.categorical_names]) if schema.categorical_names else np.zeros((len(frame), 0), dtype=np.int64)
    for j, (name, count) in enumerate(schema.categorical_features):
        bad = (cat[:, j] < 0) | (cat[:, j] >= count)
        if bad.any():
            i = int(np.argmax(bad))
            raise DataValidationError(f"{path}: line {line(i)}: {name}={cat[i, j]} outside [0, {count})")
    pids = frame["patient_id"].to_numpy(dtype=object)
    seen: dict[tuple[str, int], int] = {}
    for i, key in enumerate(zip(pids.tolist(), days.tolist())):
        if key in seen:
            raise UniquenessError(
                f"{path}: line {line(i)}: duplicate (patient, day) {key}, first at line {line(seen[key])}"
            )
        seen[key] = i
    env = None
    if "env" in frame.columns:
        env = [e if e != "" else None for e in frame["env"].tolist()]
    return CohortTable(schema=schema, patient_ids=pids, days=days, continuous=cont, categorical=cat, env=env)


def write_cohort(table: CohortTable, path: str | Path) -> None:
    """Write ``table`` as a cohort CSV. Floats use ``repr`` so reloading is exact."""
    schema = table.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "day", "env", *schema.continuous_names, *schema.categorical_names])
        for i in range(len(table)):
            env = "" if table.env is None or table.env[i] is None else table.env[i]
            writer.writerow(
                [table.patient_ids[i], int(table.days[i]), env]
                + [repr(float(v)) for v in table.continuous[i]]
                + [int(v) for v in table.categorical[i]]
            )


def _cut_points(n: int, fractions: Sequence[float]) -> tuple[int, int]:
    c1 = math.floor(round(fractions[0] * n, 9))
    c2 = math.floor(round((fractions[0] + fractions[1]) * n, 9))
    return c1, c2


def _check_fractions(fractions: Sequence[float]) -> tuple[float, float, float]:
    if len(fractions) != 3:
        raise ConfigError(f"expected three split fractions, got {fractions!r}")
    fr = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fr}")
    return fr


def split_temporal(
    table: CohortTable,
    mode: str = "by-time",
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    *,
    seed: int | None = 0,
    test_envs: Sequence[str] | None = None,
) -> TemporalSplit:
    """Partition a cohort into train / validation / test.

    ``by-time`` cuts the sorted day axis. ``by-patient`` cuts the patient list
    (shuffled with ``seed``; ``seed=None`` keeps first-appearance order).
    ``by-env`` sends every patient of ``test_envs`` to test and splits the
    remaining patients into train/val in the ratio ``fractions[0]:fractions[1]``.
    """
    fr = _check_fractions(fractions)
    if mode == "by-time":
        days = table.unique_days()
        c1, c2 = _cut_points(len(days), fr)
        train_days, val_days, test_days = days[:c1], days[c1:c2], days[c2:]
        parts = [np.isin(table.days, d) for d in (train_days, val_days, test_days)]
    elif mode in ("by-patient", "by-env"):
        patients = table.unique_patients()
        test_mask = np.zeros(len(table), dtype=bool)
        if mode == "by-env":
            if not test_envs:
                raise ConfigError("by-env split needs at least one test environment")
            if table.env is None:
                raise DataValidationError("by-env split needs environment tags")
            penv = table.env_of_patient()
            unknown = set(test_envs) - set(penv.values())
            if unknown:
                raise SplitError(f"test environments not present in cohort: {sorted(unknown)}")
            test_patients = [p for p in patients if penv[p] in set(test_envs)]
            patients = [p for p in patients if penv[p] not in set(test_envs)]
            test_mask = np.isin(table.patient_ids, test_patients)
            ratio = fr[0] / (fr[0] + fr[1])
            fr = (ratio, 1.0 - ratio, 0.0)
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(patients))
            patients = [patients[i] for i in order]
        c1, c2 = _cut_points(len(patients), fr)
        if mode == "by-env":
            c2 = len(patients)
        groups = [patients[:c1], patients[c1:c2]]
        parts = [np.isin(table.patient_ids, g) for g in groups]
        parts.append(test_mask if mode == "by-env" else np.isin(table.patient_ids, patients[c2:]))
    else:
        raise ConfigError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    for name, mask in zip(("train", "val", "test"), parts):
        if not mask.any():
            raise SplitError(f"{mode} split with fractions {tuple(fractions)} leaves the {name} part empty")
    return TemporalSplit(*(table.subset(m) for m in parts), mode=mode)
