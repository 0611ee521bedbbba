"""Glue between cohort data, models and analyses, shared by the CLI and tests."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .cohort import (
    CohortConfig,
    CohortConfigError,
    DatasetSplit,
    PersonRecord,
    label_matrix,
    load_jsonl,
    load_split,
    to_input_sequence,
)
from .logreg import Featurizer, OneVsRestLogReg
from .model import ClipCounter, EvolveModel, ModelConfig, prepare_sequence
from .training import EncodedData, FitResult, TrainConfig, TrainState, fit

logger = logging.getLogger(__name__)

# desk-scale architecture used for the synthetic runs; the ModelConfig
# defaults keep the full-size registry setting
DESK_MODEL = {"d_model": 64, "n_heads": 4, "n_layers": 2, "max_seq_len": 128, "dropout": 0.1}
DESK_TRAIN = {"learning_rate": 2e-3, "batch_size": 32, "max_epochs": 20, "early_stop_patience": 4}


@dataclass
class AnalysisConfig:
    k_change: int = 1000
    k_class: int = 100
    bootstrap: int = 1000
    jump_top: int = 3


@dataclass
class RunConfig:
    seed: int
    cohort: CohortConfig
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))
    train: dict = field(default_factory=lambda: dict(DESK_TRAIN))
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "seed": self.seed,
            "cohort": self.cohort.to_dict(),
            "model": dict(self.model),
            "train": dict(self.train),
            "analysis": asdict(self.analysis),
        }

    @classmethod
    def from_dict(cls, d: dict, require_vocab: bool = True) -> "RunConfig":
        if not isinstance(d, dict):
            raise CohortConfigError("config: expected a JSON object")
        allowed = {"version", "seed", "cohort", "model", "train", "analysis"}
        unknown = set(d) - allowed
        if unknown:
            raise CohortConfigError(f"config: unknown sections {sorted(unknown)}")
        if "seed" not in d:
            raise CohortConfigError("seed: required field missing")
        cohort_d = d.get("cohort", {})
        if not require_vocab and "vocab" not in cohort_d:
            cohort_d = {**cohort_d, "vocab": CohortConfig().vocab}
        cohort = CohortConfig.from_dict(cohort_d, path="cohort")
        model = {**DESK_MODEL, **d.get("model", {})}
        known_model = {f.name for f in fields(ModelConfig)} - {"vocab_size", "n_classes", "mode"}
        bad = set(model) - known_model
        if bad:
            raise CohortConfigError(f"model.{sorted(bad)[0]}: unknown field")
        train = {**DESK_TRAIN, **d.get("train", {})}
        bad = set(train) - {f.name for f in fields(TrainConfig)}
        if bad:
            raise CohortConfigError(f"train.{sorted(bad)[0]}: unknown field")
        analysis_d = d.get("analysis", {})
        bad = set(analysis_d) - {f.name for f in fields(AnalysisConfig)}
        if bad:
            raise CohortConfigError(f"analysis.{sorted(bad)[0]}: unknown field")
        return cls(int(d["seed"]), cohort, model, train, AnalysisConfig(**analysis_d))


def model_config_for(cohort: CohortConfig, mode: str, overrides: dict | None = None) -> ModelConfig:
    """Size the embedding tables from the cohort layout."""
    opts = {**DESK_MODEL, **(overrides or {})}
    opts.setdefault("n_t2f", int(math.ceil(cohort.history_years)) + 2)
    return ModelConfig(vocab_size=cohort.vocab_size + 2, n_classes=cohort.n_classes, mode=mode, **opts)


def class_names(cohort: CohortConfig) -> list[str]:
    return [f"dx{c}" for c in range(cohort.n_diagnoses)] + ["death", "none"]


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    persons: list
    split: DatasetSplit
    cohort: CohortConfig

    def __post_init__(self):
        self.by_id = {p.person_id: p for p in self.persons}

    def part(self, name: str) -> list[PersonRecord]:
        ids = getattr(self.split, name)
        return [self.by_id[i] for i in ids]

    def get(self, person_id: int) -> PersonRecord:
        try:
            return self.by_id[person_id]
        except KeyError:
            raise KeyError(f"person {person_id} not found in dataset") from None


def sibling(path: str | Path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def load_dataset(path: str | Path) -> Dataset:
    """Read a JSONL dataset plus the split manifest and cohort config written beside it."""
    persons = load_jsonl(path)
    split_path = sibling(path, ".split.json")
    cohort_path = sibling(path, ".cohort.json")
    if not split_path.exists() or not cohort_path.exists():
        raise FileNotFoundError(f"expected {split_path.name} and {cohort_path.name} next to {path}")
    cohort = CohortConfig.from_dict(json.loads(cohort_path.read_text(encoding="utf-8")))
    return Dataset(persons, load_split(split_path), cohort)


def encode(persons: Sequence[PersonRecord], cohort: CohortConfig, mc: ModelConfig, clips: ClipCounter | None = None) -> EncodedData:
    seqs = [
        prepare_sequence(to_input_sequence(p, cohort.forecast_start, cohort.buffer_years), mc, clips) for p in persons
    ]
    return EncodedData(seqs, label_matrix(persons, cohort.n_classes))


# ----------------------------------------------------------------------------
# training


def train_transformer(
    data: Dataset,
    mode: str,
    model_overrides: dict | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    resume: TrainState | None = None,
    stop_after_epochs: int | None = None,
) -> tuple[EvolveModel, FitResult]:
    mc = model_config_for(data.cohort, mode, model_overrides)
    train_cfg = train_cfg or TrainConfig(**DESK_TRAIN, seed=seed)
    clips = ClipCounter()
    tr = encode(data.part("train"), data.cohort, mc, clips)
    va = encode(data.part("valid"), data.cohort, mc, clips)
    if clips.ages or clips.t2f:
        logger.warning("clipped %d ages and %d t2f values into table range", clips.ages, clips.t2f)
    model = EvolveModel(mc, seed=seed)
    result = fit(model, tr, va, train_cfg, resume=resume, stop_after_epochs=stop_after_epochs)
    return model, result


def train_logreg(data: Dataset, C: float = 0.1, max_events: int | None = None) -> OneVsRestLogReg:
    train = data.part("train")
    feat = Featurizer(data.cohort.vocab_size, data.cohort.forecast_start, max_events).fit(train)
    model = OneVsRestLogReg(C=C).fit(feat.transform(train), label_matrix(train, data.cohort.n_classes))
    model.featurizer = feat
    return model


def final_scores(model, data: Dataset, part: str = "test") -> tuple[np.ndarray, np.ndarray]:
    """Scores given each person's full history, and the matching labels."""
    persons = data.part(part)
    y = label_matrix(persons, data.cohort.n_classes)
    if isinstance(model, OneVsRestLogReg):
        return model.predict_proba(model.featurizer.transform(persons)), y
    enc = encode(persons, data.cohort, model.config)
    return model.predict_final(enc.seqs), y


def check_compatible(model: EvolveModel, cohort: CohortConfig) -> None:
    cfg = model.config
    if cfg.vocab_size != cohort.vocab_size + 2 or cfg.n_classes != cohort.n_classes:
        raise ValueError(
            f"checkpoint expects vocab {cfg.vocab_size - 2} / {cfg.n_classes} classes, "
            f"data has vocab {cohort.vocab_size} / {cohort.n_classes} classes"
        )


def write_run_config(out_dir: str | Path, config: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"version": __version__, **config}
    (out / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
