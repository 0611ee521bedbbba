"""Command-line entry point: generate, train, evaluate, analyze."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .cohort import CohortConfig, CohortConfigError, DataError, generate, save_jsonl, save_split, shock_age, split
from .logreg import OneVsRestLogReg
from .metrics import SUMMARY_COLUMNS, per_class_rows, summary_row, write_csv
from .model import EvolveModel, load_checkpoint, save_checkpoint
from .pipeline import (
    DESK_TRAIN,
    AnalysisConfig,
    RunConfig,
    check_compatible,
    class_names,
    encode,
    final_scores,
    load_dataset,
    sibling,
    train_logreg,
    train_transformer,
    write_run_config,
)
from .training import TrainConfig, TrainingDivergence, TrainState, write_history
from .trajectory import (
    AnalysisError,
    ReferenceIndex,
    build_age_embedding_maps,
    calibrate_jumps,
    class_representative_similarity,
    cohort_change_curve,
    detect_jumps,
    sigmoid_trajectory,
    write_curve_csv,
    write_jump_csv,
    write_trajectory_csv,
)

logger = logging.getLogger("evolve_ehr")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class NotFound(LookupError):
    pass


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CohortConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def _run_config(args, require_vocab: bool) -> RunConfig:
    """Merge defaults, the config file and command-line flags (flags win)."""
    raw = _read_config(args.config)
    raw.setdefault("seed", 0)
    if args.seed is not None:
        raw["seed"] = args.seed
    return RunConfig.from_dict(raw, require_vocab=require_vocab)


# ----------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.config is None:
        raise CohortConfigError("generate needs --config with a cohort section (cohort.vocab is required)")
    raw = _read_config(args.config)
    raw.setdefault("seed", 0)
    cohort_d = dict(raw.get("cohort", {}))
    if args.seed is not None:
        raw["seed"] = args.seed
    cohort_d["seed"] = raw["seed"]
    if args.n_persons is not None:
        cohort_d["n_persons"] = args.n_persons
    raw["cohort"] = cohort_d
    rc = RunConfig.from_dict(raw, require_vocab=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    persons = generate(rc.cohort)
    save_jsonl(persons, out)
    save_split(split(persons, rc.seed), sibling(out, ".split.json"))
    sibling(out, ".cohort.json").write_text(json.dumps(rc.cohort.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_run_config(out.parent, {"command": "generate", **rc.to_dict()})
    logger.info("wrote %d persons to %s", len(persons), out)
    return EXIT_OK


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    rc = _run_config(args, require_vocab=False)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved = {"command": "train", "mode": args.mode, "data": str(args.data), **rc.to_dict()}
    resolved["cohort"] = data.cohort.to_dict()
    if args.mode == "logreg":
        C = args.C if args.C is not None else 0.1
        model = train_logreg(data, C=C)
        model.save(out)
        resolved["logreg"] = {"C": C}
        write_run_config(out.parent, resolved)
        return EXIT_OK

    train_d = {**DESK_TRAIN, **rc.train, "seed": rc.seed}
    for flag, key in (("lr", "learning_rate"), ("epochs", "max_epochs"), ("batch_size", "batch_size"), ("patience", "early_stop_patience")):
        value = getattr(args, flag)
        if value is not None:
            train_d[key] = value
    train_cfg = TrainConfig.from_dict(train_d)
    resolved["train"] = train_cfg.to_dict()
    resume = TrainState.load(args.resume) if args.resume else None
    model, result = train_transformer(
        data, args.mode, rc.model, train_cfg, seed=rc.seed, resume=resume, stop_after_epochs=args.stop_after
    )
    save_checkpoint(model, out, extra={"mode": args.mode, "best_epoch": result.best_epoch})
    write_history(result.history, sibling(out, ".history.csv"))
    result.state.save(sibling(out, ".state.npz"))
    write_run_config(out.parent, resolved)
    logger.info("best epoch %d, validation loss %.5f", result.best_epoch, result.best_valid)
    return EXIT_OK


def _load_model(path: str):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"EVLV":
        return load_checkpoint(path)
    try:
        return OneVsRestLogReg.load(path)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ValueError(f"{path}: neither an Evolve checkpoint nor a logistic-regression model") from None


def cmd_evaluate(args) -> int:
    data = load_dataset(args.data)
    model = _load_model(args.ckpt)
    if isinstance(model, EvolveModel):
        check_compatible(model, data.cohort)
        name = model.config.mode
    else:
        if model.featurizer is None or model.featurizer.vocab_size != data.cohort.vocab_size:
            raise ValueError("logistic-regression model does not match the data vocabulary")
        if model.coef_.shape[0] != data.cohort.n_classes:
            raise ValueError("logistic-regression model does not match the number of classes")
        name = "logreg"
    scores, labels = final_scores(model, data, args.split)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv([summary_row(name, scores, labels, iters=args.bootstrap, seed=seed)], out, SUMMARY_COLUMNS)
    write_csv(per_class_rows(scores, labels, class_names(data.cohort)), sibling(out, ".per_class.csv"))
    write_run_config(
        out.parent,
        {"command": "evaluate", "ckpt": str(args.ckpt), "data": str(args.data), "split": args.split, "bootstrap": args.bootstrap, "seed": seed},
    )
    return EXIT_OK


def _evolve_model(path: str, data) -> EvolveModel:
    model = _load_model(path)
    if not isinstance(model, EvolveModel):
        raise ValueError("trajectory analyses need a transformer checkpoint")
    check_compatible(model, data.cohort)
    return model


def _person(data, pid: int):
    try:
        return data.get(pid)
    except KeyError as exc:
        raise NotFound(str(exc.args[0])) from None


def _reference_maps(model, data, part: str):
    persons = data.part(part)
    enc = encode(persons, data.cohort, model.config)
    maps = build_age_embedding_maps(enc.seqs, [p.person_id for p in persons], model)
    return maps, {p.person_id: y for p, y in zip(persons, enc.labels)}


def cmd_analyze(args) -> int:
    data = load_dataset(args.data)
    model = _evolve_model(args.ckpt, data)
    an = AnalysisConfig()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved = {"command": f"analyze {args.analysis}", "ckpt": str(args.ckpt), "data": str(args.data)}

    if args.analysis == "jumps":
        valid = encode(data.part("valid"), data.cohort, model.config)
        thresholds = calibrate_jumps(model.predict_series(valid.seqs), valid.labels)
        test_p = data.part("test")
        test = encode(test_p, data.cohort, model.config)
        _, rows = detect_jumps(model.predict_series(test.seqs), test.seqs, [p.person_id for p in test_p], thresholds)
        write_jump_csv(out, rows)

    elif args.analysis == "change-curve":
        k = args.k if args.k is not None else an.k_change
        refs, _ = _reference_maps(model, data, args.reference_split)
        index = ReferenceIndex(refs)
        if args.person_ids:
            group_p = [_person(data, int(i)) for i in args.person_ids.split(",")]
        else:
            group_p = [p for p in data.part("test") if shock_age(p, data.cohort) is not None]
            if not group_p:
                raise NotFound("no shocked persons in the test split")
        enc = encode(group_p, data.cohort, model.config)
        group = build_age_embedding_maps(enc.seqs, [p.person_id for p in group_p], model)
        anchors = None
        if args.relative:
            anchors = {p.person_id: shock_age(p, data.cohort) for p in group_p}
            if any(v is None for v in anchors.values()):
                raise AnalysisError("--relative needs every group member to carry a shock")
        points = cohort_change_curve(group, k, index, anchors=anchors)
        write_curve_csv(out, points, key="offset" if anchors else "age")
        resolved.update(k=k, reference_split=args.reference_split)

    elif args.analysis == "trajectory":
        if model.config.mode != "evolve":
            raise AnalysisError("trajectories need an evolve-mode checkpoint")
        p = _person(data, args.person_id)
        seq = encode([p], data.cohort, model.config).seqs[0]
        ages, matrix = sigmoid_trajectory(seq, model)
        write_trajectory_csv(out, ages, matrix, class_names(data.cohort))
        resolved["person_id"] = args.person_id

    elif args.analysis == "class-sim":
        k = args.k if args.k is not None else an.k_class
        p = _person(data, args.person_id)
        refs, ref_labels = _reference_maps(model, data, args.reference_split)
        seq = encode([p], data.cohort, model.config).seqs[0]
        target = build_age_embedding_maps([seq], [p.person_id], model)[0]
        res = class_representative_similarity(target, ReferenceIndex(refs), ref_labels, k, data.cohort.n_classes)
        write_trajectory_csv(out, res.ages, res.similarity, class_names(data.cohort))
        resolved.update(person_id=args.person_id, k=k, reference_split=args.reference_split)

    write_run_config(out.parent, resolved)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evolve-ehr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic cohort")
    g.add_argument("--config", help="JSON run config with a cohort section")
    g.add_argument("--out", required=True, help="dataset JSONL path")
    g.add_argument("--n-persons", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a transformer or the logistic baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=["evolve", "cls", "logreg"], default="evolve")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--C", type=float, help="inverse L1 strength for the logistic baseline")
    t.add_argument("--resume", help="training state (.state.npz) to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many epochs in this invocation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a model on a data split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bootstrap", type=int, default=1000)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=["train", "valid", "test"], default="test")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="trajectory analyses on an evolve checkpoint")
    a.add_argument("analysis", choices=["jumps", "change-curve", "trajectory", "class-sim"])
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--person-id", type=int)
    a.add_argument("--person-ids", help="comma-separated group for change-curve (default: shocked test persons)")
    a.add_argument("--k", type=int)
    a.add_argument("--reference-split", choices=["train", "valid", "test"], default="train")
    a.add_argument("--relative", action="store_true", help="index the change curve by years since the shock")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "analysis", None) in ("trajectory", "class-sim") and args.person_id is None:
        parser.error(f"analyze {args.analysis} needs --person-id")
    threads = os.environ.get("EVOLVE_THREADS")
    limit = threadpool_limits(limits=int(threads)) if threads else nullcontext()
    try:
        with limit:
            return args.func(args)
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CohortConfigError, DataError, AnalysisError, NotFound, ValueError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, NotFound) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
