import warnings

import numpy as np
import pytest

from evolve_ehr import trajectory as tr
from evolve_ehr.model import CODE_OFFSET, InputSequence
from oracles import set_rate_of_change


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def make_map(pid, first_age, vectors):
    return tr.AgeEmbeddingMap(pid, first_age, np.array([unit(v) for v in vectors]))


def random_world(rng, pool, dim=3, ages=(20, 21), duplicates=True):
    refs = []
    for pid in range(1, pool + 1):
        refs.append(make_map(pid, ages[0], rng.normal(size=(len(ages), dim))))
    if duplicates and pool >= 2:
        # exact ties between two references exercise the id tie-break
        refs[1] = tr.AgeEmbeddingMap(refs[1].person_id, ages[0], refs[0].vectors.copy())
    target = make_map(0, ages[0], rng.normal(size=(len(ages), dim)))
    return target, refs


def oracle_sims(target, refs, age):
    z = target.at(age)
    return {r.person_id: float(np.dot(z, r.at(age)) / (np.linalg.norm(z) * np.linalg.norm(r.at(age)))) for r in refs}


def test_pwm_pool_weights_latest_most():
    out = tr.pwm_pool(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(out, unit([1.0, 2.0]))
    with pytest.raises(tr.AnalysisError):
        tr.pwm_pool(np.zeros((2, 2)))
    with pytest.raises(tr.AnalysisError):
        tr.pwm_pool(np.empty((0, 2)))


def test_age_map_gap_fill_and_pooling():
    hidden = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    m = tr.age_embeddings_from_positions(7, np.array([30, 30, 33]), hidden)
    assert m.first_age == 30 and m.last_age == 33
    np.testing.assert_allclose(m.at(31), m.at(30))
    np.testing.assert_allclose(m.at(32), m.at(30))
    np.testing.assert_allclose(m.at(33), unit([1, 1]))
    np.testing.assert_allclose(np.linalg.norm(m.vectors, axis=1), 1.0)
    with pytest.raises(KeyError):
        m.at(34)


def test_neighbors_sorted_and_excludes_target():
    rng = np.random.default_rng(0)
    target, refs = random_world(rng, 10)
    idx = tr.ReferenceIndex(refs + [target])
    ns = tr.neighbors(target, 20, idx, 4)
    assert 0 not in ns.members
    assert np.all(np.diff(ns.cosines) <= 0)
    sims = oracle_sims(target, refs, 20)
    assert list(ns.members) == sorted(sims, key=lambda i: (-sims[i], i))[:4]


def test_rate_of_change_identical_ages_is_zero():
    v = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    refs = [make_map(i, 20, [[1, i, 0], [1, i, 0]]) for i in range(1, 6)]
    assert tr.rate_of_change(make_map(0, 20, v), 21, 3, refs) == 0.0


def test_rate_of_change_full_turnover():
    refs = [make_map(1, 20, [[1, 0], [0, 1]]), make_map(2, 20, [[0, 1], [1, 0]])]
    target = make_map(0, 20, [[1, 0], [1, 0]])
    assert tr.rate_of_change(target, 21, 1, refs) == 1.0


@pytest.mark.parametrize("seed", range(500))
def test_rate_of_change_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    pool = int(rng.integers(1, 31))
    k = int(rng.integers(1, min(5, pool) + 1))
    target, refs = random_world(rng, pool, duplicates=seed % 3 == 0)
    expected = set_rate_of_change(oracle_sims(target, refs, 20), oracle_sims(target, refs, 21), k)
    assert tr.rate_of_change(target, 21, k, refs) == expected


def test_rate_of_change_clamps_k_with_warning():
    rng = np.random.default_rng(1)
    target, refs = random_world(rng, 3)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        r = tr.rate_of_change(target, 21, 50, refs)
    assert any("clamped" in str(x.message) for x in w)
    assert r == 0.0  # the whole pool is the neighbourhood at both ages


def test_rate_of_change_missing_age():
    target = make_map(0, 20, [[1.0, 0.0]])
    with pytest.raises(tr.AnalysisError):
        tr.rate_of_change(target, 21, 1, [make_map(1, 20, [[1, 0], [0, 1]])])


def test_change_curve_and_group_curve():
    rng = np.random.default_rng(2)
    refs = [make_map(i, 20, rng.normal(size=(4, 3))) for i in range(1, 12)]
    target = make_map(0, 20, rng.normal(size=(4, 3)))
    curve = tr.change_curve(target, 3, refs)
    assert sorted(curve) == [21, 22, 23]
    pts = tr.cohort_change_curve([target], 3, refs)
    assert [p.age for p in pts] == [21, 22, 23] and all(p.n == 1 for p in pts)
    rel = tr.cohort_change_curve([target], 3, refs, anchors={0: 22})
    assert [p.age for p in rel] == [-1, 0, 1]


def test_calibrate_and_detect_jumps():
    s1 = np.array([[0.1, 0.2], [0.5, 0.2], [0.6, 0.1]])
    s2 = np.array([[0.2, 0.1], [0.3, 0.4]])
    labels = np.array([[1, 0], [1, 1]])
    th = tr.calibrate_jumps([s1, s2], labels)
    np.testing.assert_allclose(th.mean, [(0.4 + 0.1) / 2, 0.3])
    seqs = [
        InputSequence(np.array([5, 6, 7]) + CODE_OFFSET, [40, 41, 42], [3, 2, 1]),
        InputSequence(np.array([8, 9]) + CODE_OFFSET, [50, 50], [1, 0]),
    ]
    events, rows = tr.detect_jumps([s1, s2], seqs, [10, 11], th)
    got = {(e.person_id, e.cls, e.code) for e in events}
    assert got == {(10, 0, 6), (11, 1, 9)}
    assert {(r.cls, r.code, r.count) for r in rows} == {(0, 6, 1), (1, 9, 1)}
    e = next(e for e in events if e.person_id == 10)
    assert (e.age, e.t2f) == (41, 2) and e.magnitude == pytest.approx(0.4)


def test_jump_threshold_undefined_without_positives():
    th = tr.calibrate_jumps([np.array([[0.1, 0.1], [0.9, 0.9]])], np.array([[1, 0]]))
    assert th.undefined == [1]
    assert tr.detect_series_jumps(np.array([[0.0, 0.0], [1.0, 1.0]]), th.mean) == [(1, 0)]


def test_jump_table_percentages_and_order():
    ev = [tr.JumpEvent(1, 0, code, 0.1, 0.5, 40, 2) for code in (3, 3, 4, 5, 5, 5)]
    rows = tr.jump_table(ev)
    assert [r.code for r in rows] == [5, 3, 4]
    assert sum(r.percent for r in rows) == pytest.approx(100.0)
    assert tr.top_codes(rows, 0, 2) == [5, 3]


def test_class_representative_similarity():
    refs = [make_map(1, 20, [[1, 0]]), make_map(2, 20, [[0, 1]]), make_map(3, 20, [[1, 1]])]
    labels = {1: np.array([1, 0, 0]), 2: np.array([0, 1, 0]), 3: np.array([1, 0, 0])}
    target = make_map(0, 20, [[1, 0]])
    res = tr.class_representative_similarity(target, refs, labels, k=1, n_classes=3)
    np.testing.assert_allclose(res.similarity[0, :2], [1.0, 0.0], atol=1e-12)
    assert np.isnan(res.similarity[0, 2]) and res.omitted == [2]
    res2 = tr.class_representative_similarity(target, refs, labels, k=2, n_classes=3)
    # mean of (1,0) and (1,1)/sqrt2, re-normalised
    centre = unit(unit([1, 0]) + unit([1, 1]))
    assert res2.similarity[0, 0] == pytest.approx(centre[0])
    assert (20, 1, 1) in res2.short


def test_series_by_age_keeps_last_row():
    ages, rows = tr.series_by_age(np.array([[0.1], [0.2], [0.3]]), np.array([30, 30, 31]))
    assert ages.tolist() == [30, 31] and rows[:, 0].tolist() == [0.2, 0.3]


def test_csv_writers(tmp_path):
    tr.write_jump_csv(tmp_path / "j.csv", [tr.JumpRow(0, 3, 50.0, 40.0, 2.0, 1)])
    tr.write_curve_csv(tmp_path / "c.csv", [tr.CurvePoint(21, 0.5, 3)])
    tr.write_trajectory_csv(tmp_path / "t.csv", [30], np.array([[0.25, np.nan]]), ["a", "b"])
    assert (tmp_path / "j.csv").read_text().splitlines()[0] == "class,code,percent,mean_age,mean_t2f,count"
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "21,0.500000,3"
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == "30,0.250000,"
