import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invdyg.datamodel import (
    ANIC_CATEGORICAL,
    ANIC_CONTINUOUS,
    CohortRecord,
    CohortTable,
    FeatureSchema,
    load_cohort,
    split_temporal,
    write_cohort,
)
from invdyg.errors import ConfigError, DataValidationError, SchemaError, SplitError, UniquenessError

from conftest import make_table, small_schema


def test_anic_schema_layout():
    s = FeatureSchema.anic_like()
    assert len(s.continuous_features) == 9
    assert len(s.categorical_features) == 10
    assert s.target_name == "Albumin"
    assert s.cardinalities == (2, 2, 3, 2, 2, 2, 2, 2, 2, 2)
    assert [n for n, *_ in ANIC_CONTINUOUS] == list(s.continuous_names)
    assert tuple(ANIC_CATEGORICAL) == s.categorical_features


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(continuous_features=(("a", ""), ("a", "")), categorical_features=(), target_name="a"),
        dict(continuous_features=(("a", ""),), categorical_features=(("c", 2),), target_name="c"),
        dict(continuous_features=(("a", ""),), categorical_features=(("c", 1),), target_name="a"),
        dict(continuous_features=(("a", ""),), categorical_features=(("a", 2),), target_name="a"),
    ],
)
def test_schema_invariants(kwargs):
    with pytest.raises(SchemaError):
        FeatureSchema(**kwargs)


def test_schema_json_round_trip(tmp_path, schema):
    path = tmp_path / "schema.json"
    schema.save(path)
    assert json.loads(path.read_text())["target"] == "y"
    assert FeatureSchema.load(path) == schema


def test_malformed_schema_json():
    with pytest.raises(SchemaError):
        FeatureSchema.from_dict({"continuous": [{"unit": "x"}], "categorical": [], "target": "a"})


def _write_rows(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")


def _anic_rows(n_patients, n_days):
    s = FeatureSchema.anic_like()
    header = ["patient_id", "day", "env", *s.continuous_names, *s.categorical_names]
    rows = []
    for p in range(n_patients):
        for d in range(1, n_days + 1):
            rows.append([f"p{p + 1}", d, "", *[float(10 * p + d + j) for j in range(9)], *[0] * 10])
    return s, header, rows


def test_load_two_patients_three_days(tmp_path):
    s, header, rows = _anic_rows(2, 3)
    _write_rows(tmp_path / "c.csv", header, rows)
    t = load_cohort(tmp_path / "c.csv", s)
    assert len(t) == 6
    assert t.env is None
    rec = t.records[4]
    assert rec.patient_id == "p2" and rec.day == 2
    assert rec.target == rec.continuous[s.target_index]


def test_load_duplicate_row_names_line(tmp_path):
    s, header, rows = _anic_rows(1, 3)
    rows.append(list(rows[1]))
    _write_rows(tmp_path / "c.csv", header, rows)
    with pytest.raises(UniquenessError, match="line 5"):
        load_cohort(tmp_path / "c.csv", s)


def test_load_category_out_of_range(tmp_path):
    s, header, rows = _anic_rows(1, 3)
    rows[2][header.index("Disease")] = 5
    _write_rows(tmp_path / "c.csv", header, rows)
    with pytest.raises(DataValidationError, match="line 4.*Disease=5"):
        load_cohort(tmp_path / "c.csv", s)


def test_load_missing_column(tmp_path):
    s, header, rows = _anic_rows(1, 2)
    i = header.index("MCH")
    _write_rows(tmp_path / "c.csv", header[:i] + header[i + 1 :], [r[:i] + r[i + 1 :] for r in rows])
    with pytest.raises(SchemaError, match="MCH"):
        load_cohort(tmp_path / "c.csv", s)


@pytest.mark.parametrize("value", ["", "NA", "abc"])
def test_load_rejects_non_numeric(tmp_path, value):
    s, header, rows = _anic_rows(1, 2)
    rows[1][header.index("Hb")] = value
    _write_rows(tmp_path / "c.csv", header, rows)
    with pytest.raises(DataValidationError, match="line 3"):
        load_cohort(tmp_path / "c.csv", s)


def test_load_missing_file(tmp_path, schema):
    with pytest.raises(DataValidationError):
        load_cohort(tmp_path / "nope.csv", schema)


def test_non_contiguous_days_rejected(schema):
    with pytest.raises(DataValidationError, match="contiguous"):
        CohortTable(schema=schema, patient_ids=["p", "p"], days=[1, 3], continuous=np.zeros((2, 3)), categorical=np.zeros((2, 2)))


def test_table_is_read_only(table):
    with pytest.raises(ValueError):
        table.continuous[0, 0] = 1.0


def test_from_records_checks_target(schema):
    rec = CohortRecord("p", 1, (0.0, 0.0, 1.0), (0, 0), 2.0)
    with pytest.raises(DataValidationError):
        CohortTable.from_records(schema, [rec])
    ok = CohortTable.from_records(schema, [rec._replace(target=1.0)])
    assert ok.target[0] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000), st.booleans())
def test_csv_round_trip(tmp_path_factory, n_patients, n_days, seed, with_env):
    t = make_table(n_patients, n_days, seed, env=["e0", "e1"] if with_env else None)
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    write_cohort(t, path)
    back = load_cohort(path, t.schema)
    assert back.equals(t)
    write_cohort(back, path.with_name("again.csv"))
    assert path.read_bytes() == path.with_name("again.csv").read_bytes()


def test_by_time_split_example():
    t = make_table(2, 12)
    sp = split_temporal(t, "by-time", (0.5, 0.25, 0.25))
    assert sp.train.unique_days() == list(range(1, 7))
    assert sp.val.unique_days() == [7, 8, 9]
    assert sp.test.unique_days() == [10, 11, 12]


def test_by_patient_split_example():
    t = make_table(10, 2)
    sp = split_temporal(t, "by-patient", (0.8, 0.1, 0.1), seed=3)
    counts = [len(p.unique_patients()) for p in (sp.train, sp.val, sp.test)]
    assert counts == [8, 1, 1]


def test_split_empty_part():
    with pytest.raises(SplitError, match="val"):
        split_temporal(make_table(2, 4), "by-time", (0.9, 0.05, 0.05))


@pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.5, 0.6, -0.1), (0.3, 0.3, 0.3)])
def test_split_bad_fractions(fractions):
    with pytest.raises(ConfigError):
        split_temporal(make_table(), "by-time", fractions)


def test_split_unknown_mode():
    with pytest.raises(ConfigError):
        split_temporal(make_table(), "by-year", (0.6, 0.2, 0.2))


def test_by_env_split():
    t = make_table(9, 2, env=["a", "b", "z"])
    sp = split_temporal(t, "by-env", (0.6, 0.2, 0.2), test_envs=["z"])
    assert set(sp.test.env.tolist()) == {"z"}
    assert "z" not in set(sp.train.env.tolist()) | set(sp.val.env.tolist())
    assert len(sp.train.unique_patients()) == 4 and len(sp.val.unique_patients()) == 2
    with pytest.raises(SplitError):
        split_temporal(t, "by-env", (0.6, 0.2, 0.2), test_envs=["q"])


def _keys(t):
    return {(p, int(d)) for p, d in zip(t.patient_ids, t.days)}


@settings(max_examples=40, deadline=None)
@given(
    st.integers(3, 8),
    st.integers(3, 8),
    st.sampled_from(["by-time", "by-patient"]),
    st.integers(0, 1000),
)
def test_split_is_a_partition(n_patients, n_days, mode, seed):
    t = make_table(n_patients, n_days, seed)
    try:
        sp = split_temporal(t, mode, (0.5, 0.25, 0.25), seed=seed)
    except SplitError:
        return
    parts = [_keys(p) for p in (sp.train, sp.val, sp.test)]
    assert set().union(*parts) == _keys(t)
    assert sum(len(p) for p in parts) == len(t)
    if mode == "by-time":
        assert max(sp.train.days) < min(sp.val.days) and max(sp.val.days) < min(sp.test.days)
    else:
        sets = [set(p.unique_patients()) for p in (sp.train, sp.val, sp.test)]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
