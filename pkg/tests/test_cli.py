import json
from pathlib import Path

import pytest

from evolve_ehr.cli import main
from evolve_ehr.cohort import DEFAULT_VOCAB, load_jsonl, shock_age
from evolve_ehr.pipeline import load_dataset

TINY = {
    "seed": 3,
    "cohort": {"vocab": DEFAULT_VOCAB, "n_persons": 150, "event_rate": 0.15, "shock_prob": 0.3},
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "max_seq_len": 48},
    "train": {"max_epochs": 2, "batch_size": 16},
}


def run_pipeline(root):
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    d, m, b, r = root / "data", root / "model", root / "baseline", root / "reports"
    assert main(["generate", "--config", str(cfg), "--out", str(d / "cohort.jsonl")]) == 0
    data = str(d / "cohort.jsonl")
    assert main(["train", "--data", data, "--config", str(cfg), "--out", str(m / "evolve.ckpt")]) == 0
    assert main(["train", "--data", data, "--mode", "logreg", "--out", str(b / "logreg.json")]) == 0
    for path in (m / "evolve.ckpt", b / "logreg.json"):
        out = r / f"{path.stem}.csv"
        assert main(["evaluate", "--ckpt", str(path), "--data", data, "--bootstrap", "20", "--out", str(out)]) == 0
    ckpt = str(m / "evolve.ckpt")
    pid = load_dataset(data).split.test[0]
    assert main(["analyze", "jumps", "--ckpt", ckpt, "--data", data, "--out", str(r / "jumps.csv")]) == 0
    assert main(["analyze", "change-curve", "--ckpt", ckpt, "--data", data, "--k", "5", "--out", str(r / "curve.csv")]) == 0
    assert main(["analyze", "trajectory", "--ckpt", ckpt, "--data", data, "--person-id", str(pid), "--out", str(r / "traj.csv")]) == 0
    assert main(["analyze", "class-sim", "--ckpt", ckpt, "--data", data, "--person-id", str(pid), "--k", "3", "--out", str(r / "sim.csv")]) == 0
    return data, ckpt, r


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def test_outputs_written(pipeline):
    data, ckpt, reports = pipeline
    names = {p.name for p in reports.iterdir()}
    assert {"evolve.csv", "evolve.per_class.csv", "logreg.csv", "jumps.csv", "curve.csv", "traj.csv", "sim.csv", "run_config.json"} <= names
    header = (reports / "evolve.csv").read_text().splitlines()[0]
    assert header.startswith("model,")
    assert "_std" in header
    traj = (reports / "traj.csv").read_text().splitlines()
    assert traj[0].split(",")[-2:] == ["death", "none"]


def test_run_config_records_resolved_settings(pipeline):
    data, ckpt, _ = pipeline
    cfg = json.loads((Path(ckpt).parent / "run_config.json").read_text())
    assert cfg["version"] and cfg["seed"] == 3
    assert cfg["train"]["max_epochs"] == 2 and cfg["train"]["learning_rate"] == 2e-3


def test_reruns_are_byte_identical(pipeline, tmp_path):
    _, _, first = pipeline
    _, _, second = run_pipeline(tmp_path)
    for name in ("evolve.csv", "evolve.per_class.csv", "logreg.csv", "jumps.csv", "curve.csv", "traj.csv", "sim.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "d.jsonl"
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--n-persons", "30", "--seed", "9"]) == 0
    assert len(load_jsonl(out)) == 30
    assert json.loads((tmp_path / "run_config.json").read_text())["seed"] == 9


def test_relative_change_curve(pipeline, tmp_path):
    data, ckpt, _ = pipeline
    ds = load_dataset(data)
    shocked = [p.person_id for p in ds.part("test") if shock_age(p, ds.cohort) is not None][:3]
    out = tmp_path / "rel.csv"
    args = ["analyze", "change-curve", "--ckpt", ckpt, "--data", data, "--k", "5", "--relative", "--person-ids", ",".join(map(str, shocked))]
    assert main(args + ["--out", str(out)]) == 0
    assert out.read_text().splitlines()[0].startswith("offset,")


def test_missing_vocab_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "cohort": {"n_persons": 10}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "vocab" in capsys.readouterr().err


def test_malformed_config_json(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{oops")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_unknown_person_is_validation_error(pipeline, tmp_path, capsys):
    data, ckpt, _ = pipeline
    code = main(["analyze", "trajectory", "--ckpt", ckpt, "--data", data, "--person-id", "999999", "--out", str(tmp_path / "t.csv")])
    assert code == 2
    assert "999999" in capsys.readouterr().err


def test_trajectory_needs_person_id(pipeline, tmp_path):
    data, ckpt, _ = pipeline
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "trajectory", "--ckpt", ckpt, "--data", data, "--out", str(tmp_path / "t.csv")])
    assert exc.value.code == 2


def test_logreg_checkpoint_rejected_for_analysis(pipeline, tmp_path, capsys):
    data, ckpt, _ = pipeline
    logreg = str(Path(ckpt).parent.parent / "baseline" / "logreg.json")
    assert main(["analyze", "jumps", "--ckpt", logreg, "--data", data, "--out", str(tmp_path / "j.csv")]) == 2
    assert "transformer" in capsys.readouterr().err


def test_missing_data_file(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "m.ckpt")]) == 2


def test_resume_from_state(pipeline, tmp_path):
    data, _, _ = pipeline
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(["train", "--data", data, "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["train", "--data", data, "--config", str(cfg), "--out", str(b), "--stop-after", "1"]) == 0
    assert main(["train", "--data", data, "--config", str(cfg), "--out", str(b), "--resume", str(tmp_path / "b.state.npz")]) == 0
    assert (tmp_path / "a.history.csv").read_text() == (tmp_path / "b.history.csv").read_text()


def test_numeric_failure_exit_code(pipeline, tmp_path, monkeypatch, capsys):
    from evolve_ehr import cli
    from evolve_ehr.training import TrainingDivergence

    def boom(*a, **k):
        raise TrainingDivergence("non-finite training loss")

    monkeypatch.setattr(cli, "train_transformer", boom)
    data, _, _ = pipeline
    assert main(["train", "--data", data, "--out", str(tmp_path / "m.ckpt")]) == 3
    assert "numeric failure" in capsys.readouterr().err
