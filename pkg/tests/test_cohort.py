import hashlib
import json

import numpy as np
import pytest

from evolve_ehr import cohort as co


@pytest.fixture(scope="module")
def small():
    cfg = co.CohortConfig(n_persons=400, seed=11)
    return cfg, co.generate(cfg)


def test_generation_is_seed_deterministic(small):
    cfg, persons = small
    assert co.generate(cfg) == persons
    assert co.generate(cfg, seed=12) != persons


def test_person_invariants(small):
    cfg, persons = small
    for p in persons:
        co.check_person(p, cfg)
        ages = [a for _, a in p.events]
        assert ages == sorted(ages)
        assert all(0 <= c < cfg.vocab_size for c, _ in p.events)
    prevalence = co.label_matrix(persons, cfg.n_classes)[:, cfg.none_class].mean()
    assert 0.6 < prevalence < 0.95


def test_input_sequence_streams(small):
    cfg, persons = small
    p = persons[0]
    seq = co.to_input_sequence(p, cfg.forecast_start, cfg.buffer_years)
    assert len(seq) == len(p.events)
    assert np.all(np.diff(seq.ages) >= 0) and np.all(np.diff(seq.t2f) <= 0)
    assert seq.codes.min() >= 2
    assert len(co.to_input_sequence(p, cfg.forecast_start, max_len=1)) == 1


def test_event_in_buffer_rejected():
    p = co.PersonRecord(0, 2000.0, [(3, 15.99)], [9])
    with pytest.raises(co.DataError, match="buffer"):
        co.to_input_sequence(p, 2016.0, 0.05)


def test_split_sizes_and_disjointness():
    s = co.split(list(range(1000)), seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (700, 100, 200)
    assert set(s.train) | set(s.valid) | set(s.test) == set(range(1000))
    assert not set(s.train) & set(s.test)
    assert co.split(list(range(1000)), seed=0) == s
    with pytest.raises(ValueError):
        co.split([1, 2, 3], 0)


@pytest.mark.parametrize(
    "d,field",
    [
        ({}, "cohort.vocab"),
        ({"vocab": co.DEFAULT_VOCAB, "n_persons": 0}, "cohort.n_persons"),
        ({"vocab": co.DEFAULT_VOCAB, "n_classes": 2}, "cohort.n_classes"),
        ({"vocab": co.DEFAULT_VOCAB, "colour": 1}, "cohort.colour"),
        ({"vocab": co.DEFAULT_VOCAB, "trigger_prob": 1.5}, "cohort.trigger_prob"),
        ({"vocab": co.DEFAULT_VOCAB, "trigger_map": {"0": {"codes": [10_000], "multiplier": 8}}}, "cohort.trigger_map"),
        ({"vocab": {**co.DEFAULT_VOCAB, "endpoints": 3}}, "cohort.vocab.endpoints"),
    ],
)
def test_config_errors_name_the_field(d, field):
    with pytest.raises(co.CohortConfigError, match=field.replace(".", r"\.")):
        co.CohortConfig.from_dict(d)


def test_config_round_trip():
    cfg = co.CohortConfig(n_persons=50, seed=4)
    again = co.CohortConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_jsonl_round_trip_is_lossless(small, tmp_path):
    _, persons = small
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    co.save_jsonl(persons, a)
    loaded = co.load_jsonl(a)
    assert loaded == persons
    co.save_jsonl(loaded, b)
    assert hashlib.sha256(a.read_bytes()).hexdigest() == hashlib.sha256(b.read_bytes()).hexdigest()


@pytest.mark.parametrize(
    "line,msg",
    [
        ("{not json", "malformed"),
        ("[1, 2]", "object"),
        ('{"person_id": 1, "birth_year": 1980, "labels": [9]}', "missing"),
        ('{"person_id": 1, "birth_year": 1980, "events": [], "labels": [9]}', "no events"),
        ('{"person_id": 1, "birth_year": 1980, "events": [[1]], "labels": [9]}', "pairs"),
    ],
)
def test_malformed_jsonl_reports_line(tmp_path, line, msg):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"person_id": 0, "birth_year": 1980, "events": [[1, 2.0]], "labels": [9]}\n' + line + "\n")
    with pytest.raises(co.DataError, match=f":2: .*{msg}"):
        co.load_jsonl(path)


def test_unknown_jsonl_field_warns(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text('{"person_id": 0, "birth_year": 1980, "events": [[1, 2.0]], "labels": [9], "note": "x"}\n')
    with pytest.warns(UserWarning, match="note"):
        assert len(co.load_jsonl(path)) == 1


def trigger_ratio_and_z(cfg, persons, c):
    y = co.label_matrix(persons, cfg.n_classes)[:, c]
    has = np.array([c in co.trigger_info(p, cfg) for p in persons])
    p1, p0 = y[has].mean(), y[~has].mean()
    pooled = y.mean()
    se = np.sqrt(pooled * (1 - pooled) * (1 / has.sum() + 1 / (~has).sum()))
    return p1 / p0, (p1 - p0) / se


@pytest.mark.slow
def test_planted_trigger_raises_class_rate():
    cfg = co.CohortConfig(n_persons=20_000, seed=3)
    persons = co.generate(cfg)
    for c in range(cfg.n_diagnoses):
        ratio, _ = trigger_ratio_and_z(cfg, persons, c)
        assert 4 <= ratio <= 12, (c, ratio)


@pytest.mark.slow
def test_neutral_trigger_leaves_base_rate():
    cfg = co.CohortConfig(n_persons=20_000, seed=3, trigger_multiplier=1.0)
    persons = co.generate(cfg)
    for c in range(cfg.n_diagnoses):
        _, z = trigger_ratio_and_z(cfg, persons, c)
        assert abs(z) < 3, (c, z)
