import numpy as np
import pytest
import torch

from invdyg.datamodel import CohortTable, FeatureSchema

torch.set_num_threads(1)


def small_schema() -> FeatureSchema:
    return FeatureSchema(
        continuous_features=(("a", "u"), ("b", "u"), ("y", "g/L")),
        categorical_features=(("c", 3), ("d", 2)),
        target_name="y",
    )


def make_table(n_patients=4, n_days=3, seed=0, schema=None, env=None, first_day=1) -> CohortTable:
    schema = schema or small_schema()
    rng = np.random.default_rng(seed)
    pids, days = [], []
    for p in range(n_patients):
        for d in range(first_day, first_day + n_days):
            pids.append(f"p{p}")
            days.append(d)
    n = len(pids)
    cont = rng.normal(size=(n, len(schema.continuous_features)))
    cat = np.column_stack([rng.integers(0, c, size=n) for c in schema.cardinalities])
    envs = None
    if env is not None:
        envs = [env[int(p[1:]) % len(env)] for p in pids]
    return CohortTable(schema=schema, patient_ids=pids, days=days, continuous=cont, categorical=cat, env=envs)


@pytest.fixture
def schema():
    return small_schema()


@pytest.fixture
def table():
    return make_table()


ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Remember one acceptance outcome; every line is echoed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
