"""Synthetic cohorts with a planted invariant mechanism and a flipping spurious one.

All mechanisms are defined on standardized scores ``s = (x - mean) / std``
with ``(mean, std)`` taken from ``feature_ranges``. For every patient ``n``
in environment ``e``::

    y[n, t]  = w . xI[n, t-1] + gamma * mean_{m in peers(n, t-1)} (w . xI[m, t-1]) + sigma * eps
    xV[n, t] = beta_e * y[n, t] + variant_noise * eta

Peers are the ``k_peers`` L1-nearest patients on day ``t-1`` (all continuous
scores, same rule as :func:`invdyg.preprocess.knn_edges`). Invariant and
distractor markers are stationary per patient: a patient-level mean plus
daily fluctuation. The sign flip of ``beta`` across environments is this
generator's own construction of a distribution shift.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import ANIC_CONTINUOUS, CohortTable, FeatureSchema
from .errors import ConfigError, DataValidationError
from .preprocess import knn_edges

STATIC_CATEGORICALS = ("Age", "Sex", "Disease")
SHIFT_NOTE = "flip-sign beta schedule constructed by the synthetic generator"


def _anic_ranges() -> dict[str, tuple[float, float]]:
    return {name: (mean, std) for name, _, mean, std in ANIC_CONTINUOUS}


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 60
    n_days: int = 12
    environments: tuple[tuple[str, float], ...] = (("env_a", 2.0), ("env_b", -1.0), ("env_test", -2.0))
    invariant_features: tuple[str, ...] = ("IndirectBilirubin", "Hb", "MCH")
    invariant_coefficients: tuple[float, ...] = (-0.5, 0.6, 0.4)
    variant_features: tuple[str, ...] = ("MCHC", "ALT")
    neighbor_strength: float = 0.3
    noise_sigma: float = 1.0  # large enough that the lagged marker beats the invariant signal in training
    variant_noise: float = 0.1
    daily_share: float = 0.5
    k_peers: int = 5
    tied_categorical: str | None = None
    tie_strength: float = 0.5
    variant_lead: int = 1
    feature_ranges: dict = field(default_factory=_anic_ranges)
    schema: FeatureSchema = field(default_factory=FeatureSchema.anic_like)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "environments", tuple((str(n), float(b)) for n, b in self.environments))
        object.__setattr__(self, "invariant_features", tuple(self.invariant_features))
        object.__setattr__(self, "invariant_coefficients", tuple(float(w) for w in self.invariant_coefficients))
        object.__setattr__(self, "variant_features", tuple(self.variant_features))
        self.validate()

    def validate(self) -> None:
        if self.n_patients < 2 or self.n_days < 2:
            raise ConfigError("need at least 2 patients and 2 days")
        if len(self.environments) < 2:
            raise ConfigError("a distribution shift needs at least 2 environments")
        if len({n for n, _ in self.environments}) != len(self.environments):
            raise ConfigError("environment names must be unique")
        betas = [b for _, b in self.environments]
        if not (any(b > 0 for b in betas) and any(b < 0 for b in betas)):
            raise ConfigError("at least one pair of environments must have betas of opposite sign")
        if len(self.environments) > self.n_patients:
            raise ConfigError("more environments than patients")
        if self.noise_sigma < 0 or self.variant_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0.0 <= self.daily_share <= 1.0:
            raise ConfigError("daily_share must lie in [0, 1]")
        if not 1 <= self.k_peers < self.n_patients:
            raise ConfigError("k_peers must satisfy 1 <= k_peers < n_patients")
        if len(self.invariant_features) != len(self.invariant_coefficients):
            raise ConfigError("one invariant coefficient per invariant feature")
        cont = self.schema.continuous_names
        target = self.schema.target_name
        for name in (*self.invariant_features, *self.variant_features):
            if name not in cont:
                raise ConfigError(f"{name!r} is not a continuous feature of the schema")
            if name == target:
                raise ConfigError("the target cannot be an invariant or variant feature")
        if set(self.invariant_features) & set(self.variant_features):
            raise ConfigError("invariant and variant feature sets must be disjoint")
        if not self.variant_features or not self.invariant_features:
            raise ConfigError("need at least one invariant and one variant feature")
        if self.variant_lead not in (0, 1):
            raise ConfigError("variant_lead must be 0 or 1")
        if self.tied_categorical is not None and self.tied_categorical not in self.schema.categorical_names:
            raise ConfigError(f"tied categorical {self.tied_categorical!r} not in schema")

    def ranges(self) -> tuple[np.ndarray, np.ndarray]:
        means, stds = [], []
        for name in self.schema.continuous_names:
            mean, std = self.feature_ranges.get(name, (0.0, 1.0))
            means.append(float(mean))
            stds.append(float(std))
        return np.array(means), np.array(stds)


@dataclass(frozen=True)
class PlantedAnnotation:
    invariant_feature_names: tuple[str, ...]
    variant_feature_names: tuple[str, ...]
    betas: dict
    invariant_coefficients: tuple[float, ...] = ()
    neighbor_strength: float = 0.0
    k_peers: int = 1
    feature_ranges: dict = field(default_factory=dict)
    tied_categorical: str | None = None
    tie_strength: float = 0.0
    variant_lead: int = 0

    def __post_init__(self):
        if set(self.invariant_feature_names) & set(self.variant_feature_names):
            raise ConfigError("invariant and variant feature sets must be disjoint")

    def to_dict(self) -> dict:
        return {
            "invariant": list(self.invariant_feature_names),
            "variant": list(self.variant_feature_names),
            "beta": dict(self.betas),
            "weights": list(self.invariant_coefficients),
            "gamma": self.neighbor_strength,
            "k_peers": self.k_peers,
            "feature_ranges": {k: list(v) for k, v in self.feature_ranges.items()},
            "tied_categorical": self.tied_categorical,
            "tie_strength": self.tie_strength,
            "variant_lead": self.variant_lead,
            "note": SHIFT_NOTE,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedAnnotation":
        return cls(
            invariant_feature_names=tuple(d["invariant"]),
            variant_feature_names=tuple(d["variant"]),
            betas={k: float(v) for k, v in d["beta"].items()},
            invariant_coefficients=tuple(d.get("weights", ())),
            neighbor_strength=float(d.get("gamma", 0.0)),
            k_peers=int(d.get("k_peers", 1)),
            feature_ranges={k: tuple(v) for k, v in d.get("feature_ranges", {}).items()},
            tied_categorical=d.get("tied_categorical"),
            tie_strength=float(d.get("tie_strength", 0.0)),
            variant_lead=int(d.get("variant_lead", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PlantedAnnotation":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def environment_of(n_patients: int, n_envs: int) -> np.ndarray:
    """Contiguous, near-equal blocks of patients per environment."""
    return (np.arange(n_patients) * n_envs) // n_patients


def generate_cohort(config: GeneratorConfig) -> tuple[CohortTable, PlantedAnnotation]:
    config.validate()
    schema = config.schema
    rng = np.random.default_rng(config.seed)
    n, T = config.n_patients, config.n_days
    names = schema.continuous_names
    c = len(names)
    tgt = schema.target_index
    inv_idx = np.array([names.index(f) for f in config.invariant_features])
    var_idx = np.array([names.index(f) for f in config.variant_features])
    w = np.array(config.invariant_coefficients)
    stationary = [j for j in range(c) if j != tgt and j not in set(var_idx.tolist())]

    env_idx = environment_of(n, len(config.environments))
    betas = np.array([b for _, b in config.environments])[env_idx]
    env_names = [config.environments[e][0] for e in env_idx]

    share = config.daily_share
    patient_level = rng.normal(0.0, np.sqrt(1.0 - share), size=(n, c))

    cards = schema.cardinalities
    cat_names = schema.categorical_names
    static_cat = rng.integers(0, np.array(cards)[None, :], size=(n, len(cards))) if cards else np.zeros((n, 0), int)

    def draw_day() -> np.ndarray:
        s = np.zeros((n, c))
        s[:, stationary] = patient_level[:, stationary] + rng.normal(0.0, np.sqrt(share), size=(n, len(stationary)))
        return s

    def draw_categorical() -> np.ndarray:
        daily = rng.integers(0, np.array(cards)[None, :], size=(n, len(cards))) if cards else np.zeros((n, 0), int)
        for j, name in enumerate(cat_names):
            if name in STATIC_CATEGORICALS:
                daily[:, j] = static_cat[:, j]
        return daily

    tie_col = cat_names.index(config.tied_categorical) if config.tied_categorical else None

    lead = config.variant_lead
    n_draw = T + 1 + lead  # day 0 (and day T+1 when the variant leads) stay hidden
    scores = np.zeros((n_draw, n, c))
    cats = np.zeros((n_draw, n, len(cards)), dtype=np.int64)
    for d in range(n_draw):
        scores[d], cats[d] = draw_day(), draw_categorical()
    knn_cols = knn_columns(schema, config.variant_features, lead)
    for d in range(1, n_draw):
        prev = scores[d - 1]
        signal = prev[:, inv_idx] @ w
        y = signal.copy()
        if d > 1 and config.neighbor_strength != 0.0:
            y = y + config.neighbor_strength * peer_mean(prev[:, knn_cols], signal, config.k_peers)
        if tie_col is not None:
            y = y + config.tie_strength * (cats[d - 1][:, tie_col] == 1)
        y = y + config.noise_sigma * rng.standard_normal(n)
        scores[d, :, tgt] = y
        noise = config.variant_noise * rng.standard_normal((n, len(var_idx)))
        scores[d - lead][:, var_idx] = betas[:, None] * y[:, None] + noise
    scores, cats = scores[1 : T + 1], cats[1 : T + 1]

    means, stds = config.ranges()
    raw = means + stds * scores
    width = len(str(n))
    pids = np.array([f"p{i + 1:0{width}d}" for i in range(n)], dtype=object)
    table = CohortTable(
        schema=schema,
        patient_ids=np.repeat(pids, T),
        days=np.tile(np.arange(1, T + 1), n),
        continuous=raw.transpose(1, 0, 2).reshape(n * T, c),
        categorical=cats.transpose(1, 0, 2).reshape(n * T, len(cards)),
        env=np.repeat(np.array(env_names, dtype=object), T),
    )
    annotation = PlantedAnnotation(
        invariant_feature_names=config.invariant_features,
        variant_feature_names=config.variant_features,
        betas={name: beta for name, beta in config.environments},
        invariant_coefficients=config.invariant_coefficients,
        neighbor_strength=config.neighbor_strength,
        k_peers=config.k_peers,
        feature_ranges={k: tuple(config.feature_ranges.get(k, (0.0, 1.0))) for k in names},
        tied_categorical=config.tied_categorical,
        tie_strength=config.tie_strength if config.tied_categorical else 0.0,
        variant_lead=config.variant_lead,
    )
    return table, annotation


def knn_columns(schema: FeatureSchema, variant_features, lead: int) -> list[int]:
    """Columns that define peers. A leading variant marker is not known yet on day t-1."""
    skip = set(variant_features) if lead else set()
    return [j for j, name in enumerate(schema.continuous_names) if name not in skip]


def peer_mean(day_scores: np.ndarray, signal: np.ndarray, k: int) -> np.ndarray:
    """Mean of ``signal`` over each row's L1-nearest ``k`` other rows of ``day_scores``."""
    edges = knn_edges(day_scores, k)
    sums = np.zeros(len(day_scores))
    np.add.at(sums, edges[:, 0], signal[edges[:, 1]])
    counts = np.bincount(edges[:, 0], minlength=len(day_scores))
    return sums / np.maximum(counts, 1)


@dataclass
class PlantingReport:
    variant_correlation: dict  # env -> feature -> Pearson r of (variant, target)
    invariant_r2: float
    flags: list = field(default_factory=list)
    note: str = SHIFT_NOTE

    @property
    def ok(self) -> bool:
        return not self.flags

    def to_dict(self) -> dict:
        return asdict(self)


def _r2(design: np.ndarray, y: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        return 1.0 if np.allclose(resid, 0) else 0.0
    return float(1.0 - np.sum(resid**2) / ss_tot)


def verify_planting(table: CohortTable, annotation: PlantedAnnotation, r2_min: float = 0.2) -> PlantingReport:
    """Re-derive the planted mechanisms from a generated table.

    Reports per-environment correlations of each variant feature with the
    target and the R^2 of the invariant mechanism (lagged invariant features
    plus the lagged peer mean). Flags sign disagreements with ``beta`` and an
    R^2 below ``r2_min``.
    """
    schema = table.schema
    names = schema.continuous_names
    missing = [f for f in (*annotation.invariant_feature_names, *annotation.variant_feature_names) if f not in names]
    if missing:
        raise DataValidationError(f"annotation names not in table schema: {missing}")
    if table.env is None:
        raise DataValidationError("table carries no environment tags")
    unknown = set(table.env.tolist()) - set(annotation.betas)
    if unknown:
        raise DataValidationError(f"environments missing from annotation: {sorted(unknown)}")

    means = np.array([annotation.feature_ranges.get(f, (0.0, 1.0))[0] for f in names], dtype=float)
    stds = np.array([annotation.feature_ranges.get(f, (0.0, 1.0))[1] for f in names], dtype=float)
    scores = (table.continuous - means) / stds
    y = (table.target - means[schema.target_index]) / stds[schema.target_index]

    flags: list[str] = []
    corr: dict[str, dict[str, float]] = {}
    lead = annotation.variant_lead
    key = {(p, int(d)): i for i, (p, d) in enumerate(zip(table.patient_ids, table.days))}
    # marker row on day t - lead paired with the target on day t
    pairs = [
        (key[(p, int(d) - lead)], i)
        for i, (p, d) in enumerate(zip(table.patient_ids, table.days))
        if (p, int(d) - lead) in key
    ]
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    for env, beta in annotation.betas.items():
        sel = pairs[table.env[pairs[:, 1]] == env] if len(pairs) else pairs
        if not len(sel):
            continue
        corr[env] = {}
        yy = y[sel[:, 1]]
        for f in annotation.variant_feature_names:
            x = scores[sel[:, 0], names.index(f)]
            r = float(np.corrcoef(x, yy)[0, 1]) if x.std() > 0 and yy.std() > 0 else 0.0
            corr[env][f] = r
            if np.sign(r) != np.sign(beta):
                flags.append(f"{env}/{f}: correlation sign {r:+.3f} disagrees with beta {beta:+g}")

    inv_idx = [names.index(f) for f in annotation.invariant_feature_names]
    w = np.array(annotation.invariant_coefficients if annotation.invariant_coefficients else [1.0] * len(inv_idx))
    tie_col = schema.categorical_names.index(annotation.tied_categorical) if annotation.tied_categorical else None
    rows_x, rows_y = [], []
    for day in table.unique_days()[1:]:
        prev = np.flatnonzero(table.days == day - 1)
        signal = scores[prev][:, inv_idx] @ w
        knn_cols = knn_columns(schema, annotation.variant_feature_names, lead)
        peers = peer_mean(scores[prev][:, knn_cols], signal, annotation.k_peers)
        by_pid = {p: i for i, p in enumerate(table.patient_ids[prev])}
        for r in np.flatnonzero(table.days == day):
            i = by_pid.get(table.patient_ids[r])
            if i is None:
                continue
            feats = [1.0, *scores[prev[i], inv_idx], peers[i]]
            if tie_col is not None:
                feats.append(float(table.categorical[prev[i], tie_col] == 1))
            rows_x.append(feats)
            rows_y.append(y[r])
    r2 = _r2(np.array(rows_x), np.array(rows_y)) if rows_x else 0.0
    if r2 < r2_min:
        flags.append(f"invariant-mechanism R^2 {r2:.3f} below {r2_min}")
    return PlantingReport(variant_correlation=corr, invariant_r2=r2, flags=flags)
