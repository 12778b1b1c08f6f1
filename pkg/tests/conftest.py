import numpy as np
import pytest

from dpsynth.data import AttributeSpec, DiscreteTable, Schema

CRITERIA = {
    1: "privacy accounting over the epsilon grid",
    2: "mechanism calibration",
    3: "synthesizer fidelity oracle",
    4: "linkage attack planted matches",
    5: "membership inference robustness",
    6: "ROC / Mann-Whitney equivalence",
    7: "mixed-model regression replication",
    8: "utility trend epsilon=1 vs epsilon=100",
    9: "artifact determinism",
    10: "brute-force oracles",
}
_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one acceptance outcome; the terminal summary prints every line."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _results[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for k, name in CRITERIA.items():
        ok, detail = _results.get(k, (False, "not run or errored before recording"))
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:>2}. {name}: {detail}")


def binary_schema(names=("A", "B", "C")) -> Schema:
    return Schema(tuple(AttributeSpec(n, "categorical", domain_size=2) for n in names))


@pytest.fixture
def planted_abc():
    """5000 rows, A uniform, B = A, C independent uniform."""
    rng = np.random.default_rng(12345)
    a = rng.integers(0, 2, 5000)
    c = rng.integers(0, 2, 5000)
    return DiscreteTable(binary_schema(), np.column_stack([a, a, c]))


def random_table(rng, n, domain):
    schema = Schema(tuple(AttributeSpec(f"x{j}", "categorical", domain_size=int(k))
                          for j, k in enumerate(domain)))
    rows = np.column_stack([rng.integers(0, k, n) for k in domain]) if n else np.empty((0, len(domain)))
    return DiscreteTable(schema, rows)


def planted_linkage_tables(seed: int = 0):
    """Target and auxiliary tables over (week, PSS, TST) with exactly four true links.

    Returns (target RawTable, aux RawTable, set of (target_row, aux_row) planted pairs).
    Decoys share (week, PSS) with a target row but sleep at least 1.5h away, so
    their similarity is at most 1/3.
    """
    from dpsynth.data import RawTable

    rng = np.random.default_rng(seed)
    combos = rng.permutation([(w, p) for w in range(16) for p in range(41)])
    target_keys = [tuple(map(int, c)) for c in combos[:40]]
    spare_keys = [tuple(map(int, c)) for c in combos[40:]]
    target = [(w, p, round(float(rng.uniform(5.0, 9.0)), 2)) for w, p in target_keys]

    aux, planted = [], set()
    planted_rows = rng.choice(len(target), 4, replace=False)
    for i in planted_rows:
        w, p, tst = target[i]
        aux.append((w, p, round(tst + float(rng.uniform(-0.5, 0.5)), 2)))
        planted.add((int(i), len(aux) - 1))
    for i in rng.choice(np.setdiff1d(np.arange(len(target)), planted_rows), 10, replace=False):
        w, p, tst = target[i]
        shift = float(rng.uniform(1.5, 3.0)) * (1 if tst < 7 else -1)
        aux.append((w, p, round(tst + shift, 2)))
    for w, p in spare_keys[:60]:
        aux.append((w, p, round(float(rng.uniform(5.0, 9.0)), 2)))
    order = rng.permutation(len(aux))
    inverse = np.argsort(order)
    aux = [aux[k] for k in order]
    planted = {(t, int(inverse[a])) for t, a in planted}
    header = ("week", "PSS", "TST")
    return RawTable(header, tuple(target)), RawTable(header, tuple(aux)), planted


def panel_frame(seed: int, n_participants: int = 100, n_weeks: int = 8):
    """Raw wellbeing panel as a DataFrame with within-participant sleep deviation added."""
    import pandas as pd

    from dpsynth.fixtures import wellbeing_panel

    raw, _ = wellbeing_panel(n_participants, n_weeks, seed=seed)
    frame = pd.DataFrame(list(raw.cells), columns=list(raw.header))
    frame["tst_dev"] = frame["TST"] - frame.groupby("id")["TST"].transform("mean")
    return frame


def panel_spec():
    from dpsynth.lmm import RegressionSpec

    return RegressionSpec("PSS", ("week", "tst_dev", "gender"), "id", random_slope="week",
                          categorical=("gender",))
