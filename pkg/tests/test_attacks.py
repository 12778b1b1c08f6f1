import numpy as np
import pytest
from conftest import planted_linkage_tables, random_table
from hypothesis import given, settings, strategies as st
from oracles import brute_auc, brute_nearest

from dpsynth.aim import SynthConfig, synthesize
from dpsynth.attacks import (LinkageConfig, LinkageConfigError, MiaConfig, linear_similarity,
                             linkage_attack, nearest_record_distance, roc_curve, run_mia)
from dpsynth.data import AttributeSpec, DiscreteTable, RawTable, Schema, decode, encode

LINK = LinkageConfig(("week", "PSS"), "TST")


def test_similarity_worked_examples():
    assert linear_similarity(7.0, 7.4) == 1.0
    assert round(linear_similarity(7.0, 8.0), 3) == 0.667
    assert linear_similarity(7.0, 9.0) == 0.0
    assert linear_similarity(8.0, 7.0, 0.5, 1.5) == linear_similarity(7.0, 8.0, 0.5, 1.5)


def test_linkage_config_invariants():
    with pytest.raises(LinkageConfigError):
        LinkageConfig((), "TST")
    with pytest.raises(LinkageConfigError):
        LinkageConfig(("TST",), "TST")
    with pytest.raises(LinkageConfigError):
        LinkageConfig(("week",), "TST", sim_threshold=0.0)
    assert LinkageConfig(("week",), "TST", origin=7.0).origin == 7.0


def test_no_shared_keys():
    a = RawTable(("week", "PSS", "TST"), ((1, 10, 7.0),))
    b = RawTable(("week", "PSS", "TST"), ((2, 10, 7.0),))
    assert len(linkage_attack(a, b, LINK)) == 0


def test_missing_column():
    a = RawTable(("week", "TST"), ((1, 7.0),))
    with pytest.raises(LinkageConfigError):
        linkage_attack(a, a, LINK)


def test_planted_matches():
    target, aux, planted = planted_linkage_tables()
    result = linkage_attack(target, aux, LINK)
    assert {(t, a) for t, a, _ in result.pairs} == planted
    sims = [s for _, _, s in result.pairs]
    assert sims == sorted(sims, reverse=True) and min(sims) >= 0.8


def test_linkage_uses_row_ids_and_is_permutation_invariant():
    target, aux, planted = planted_linkage_tables(seed=4)
    schema = Schema((AttributeSpec("week", "ordinal", domain_size=16),
                     AttributeSpec("PSS", "ordinal", domain_size=41),
                     AttributeSpec("TST", "continuous", bin_edges=(6.0, 7.0, 8.0))))
    base = {(t, a) for t, a, _ in linkage_attack(target, aux, LINK).pairs}
    perm = np.random.default_rng(0).permutation(len(aux))
    shuffled = RawTable(aux.header, tuple(aux.cells[k] for k in perm))
    moved = {(t, int(perm[a])) for t, a, _ in linkage_attack(target, shuffled, LINK).pairs}
    assert moved == base == planted
    enc, _ = encode(RawTable(("id",) + target.header, tuple((f"p{i}",) + r for i, r in
                                                           enumerate(target.cells))),
                    schema, id_column="id")
    ids = linkage_attack(enc, aux, LINK)
    assert all(isinstance(t, str) for t, _, _ in ids.pairs)


def test_dp_aux_breaks_planted_links():
    target, aux, planted = planted_linkage_tables()
    schema = Schema((AttributeSpec("week", "ordinal", domain_size=16),
                     AttributeSpec("PSS", "ordinal", domain_size=41),
                     AttributeSpec("TST", "continuous", bin_edges=tuple(np.arange(4.5, 10, 0.25)),
                                   lower=4.0, upper=10.0)))
    aux_table, _ = encode(aux, schema)
    synth, _ = synthesize(aux_table, None, SynthConfig(5.0, seed=0))
    result = linkage_attack(target, decode(synth), LINK)
    planted_targets = {t for t, _ in planted}
    true_hits = {t for t, _, _ in result.pairs if t in planted_targets}
    false_hits = [p for p in result.pairs if p[0] not in planted_targets]
    assert len(true_hits) < 4, (true_hits, len(false_hits))


def test_nearest_record_basics():
    rows = np.array([[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]])
    rec = rows[0].copy()
    assert nearest_record_distance(rec, rows, "hamming") == 0
    assert nearest_record_distance(rec, rows, "euclidean") == 0
    rec[[1, 4, 7]] += 1
    assert nearest_record_distance(rec, rows, "hamming") == 3
    with pytest.raises(ValueError):
        nearest_record_distance(rec, np.empty((0, 10), dtype=int))
    with pytest.raises(ValueError):
        nearest_record_distance(rec[:3], rows)


def test_nearest_record_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = random_table(rng, 20, (3, 5, 2, 4))
        rec = np.array([rng.integers(0, k) for k in (3, 5, 2, 4)])
        for metric in ("hamming", "euclidean"):
            want = brute_nearest(rec.tolist(), t.rows.tolist(), metric)
            assert nearest_record_distance(rec, t, metric) == pytest.approx(want, abs=1e-12)


def test_roc_edge_cases():
    assert roc_curve([0, 0, 0], [1, 1]).auc == 1.0
    assert roc_curve([1, 2, 3], [3, 2, 1]).auc == 0.5
    roc = roc_curve([0.5], [0.5])
    assert roc.points[0][:2] == (0.0, 0.0) and roc.points[-1][:2] == (1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=25),
       st.lists(st.integers(0, 6), min_size=1, max_size=25))
def test_roc_matches_mann_whitney(a, b):
    roc = roc_curve(a, b)
    assert roc.auc == pytest.approx(brute_auc(a, b), abs=1e-12)
    fpr = [p[0] for p in roc.points]
    tpr = [p[1] for p in roc.points]
    assert fpr == sorted(fpr) and tpr == sorted(tpr)
    assert roc.points[0][:2] == (0.0, 0.0) and roc.points[-1][:2] == (1.0, 1.0)


def test_youden_ties_go_to_lower_threshold():
    roc = roc_curve([1, 4], [2, 3])
    # thresholds 1 and 3 both give J = 0.5
    assert roc.youden()[2] == 1.0


def _uniform_generator(train, n_out, seed):
    rng = np.random.default_rng(seed)
    rows = np.column_stack([rng.integers(0, k, n_out) for k in train.domain])
    return DiscreteTable(train.schema, rows)


def _copy_generator(train, n_out, seed):
    return train


@pytest.fixture
def mia_table():
    rng = np.random.default_rng(21)
    t = random_table(rng, 200, (4, 4, 3, 5, 3))
    target = np.array([3, 3, 2, 4, 2])
    keep = ~(t.rows == target).all(axis=1)
    rows = np.vstack([t.rows[keep], target])
    return DiscreteTable(t.schema, rows), target


def test_mia_config_validation():
    with pytest.raises(ValueError):
        MiaConfig(n_draws=3)
    with pytest.raises(ValueError):
        MiaConfig(metric="cosine")
    with pytest.raises(ValueError):
        MiaConfig(calib_fraction=1.0)


def test_mia_data_blind_generator(mia_table):
    table, target = mia_table
    res = run_mia(target, table, MiaConfig(n_draws=200, seed=0), generator=_uniform_generator)
    assert abs(res.roc.auc - 0.5) <= 0.05
    assert len(res.scores_in) == len(res.scores_out) == 100


def test_mia_leaky_generator(mia_table):
    table, target = mia_table
    res = run_mia(target, table, MiaConfig(n_draws=40, seed=1), generator=_copy_generator)
    assert set(res.scores_in) == {0.0}
    assert res.roc.auc >= 0.99
    assert res.decision == "in"
    out = run_mia(target, table, MiaConfig(n_draws=40, seed=1), generator=_copy_generator,
                  include_target_in_final=False)
    assert out.decision == "out"


def test_mia_calibration_excludes_target(mia_table):
    table, target = mia_table
    seen = []

    def spy(train, n_out, seed):
        seen.append(int((train.rows == target).all(axis=1).sum()))
        return _uniform_generator(train, n_out, seed)

    run_mia(target, table, MiaConfig(n_draws=6, seed=2), generator=spy)
    assert seen == [1, 1, 1, 0, 0, 0, 1]


def test_mia_is_deterministic(mia_table):
    table, target = mia_table
    cfg = MiaConfig(n_draws=10, seed=3, metric="euclidean")
    a = run_mia(target, table, cfg, synth_cfg=SynthConfig(10.0))
    b = run_mia(target, table, cfg, synth_cfg=SynthConfig(10.0))
    assert a.roc.points == b.roc.points and a.roc.auc == b.roc.auc
    assert a.summary() == b.summary()
