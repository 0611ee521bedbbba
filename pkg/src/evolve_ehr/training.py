"""Training loop for the Evolve and CLS models.

Loss per person is the mean over positions of the class-averaged binary
cross-entropy against the person's fixed label vector (a single position in
CLS mode). Optimisation uses AdamW, linear warmup into cosine decay, global
norm clipping, random downsampling of none-only persons and early stopping on
validation loss.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .model import EvolveModel, InputSequence, pad_sequences

logger = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    """Raised when the loss or gradients become non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 160
    max_epochs: int = 50
    early_stop_patience: int = 10
    none_downsample_rate: float = 0.25
    class_weights: list | None = None
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_fraction: float = 0.05
    min_lr_fraction: float = 0.1
    none_class: int = -1
    # early stopping watches a validation subset downsampled like the training epochs
    downsample_valid: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not 0.0 < self.none_downsample_rate <= 1.0:
            raise ValueError("none_downsample_rate must lie in (0, 1]")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class_weights must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"train: unknown fields {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# losses on plain arrays (reference route)


def _bce(y: np.ndarray, y_hat: np.ndarray, from_logits: bool) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    v = np.asarray(y_hat, dtype=np.float64)
    if np.isnan(v).any() or np.isnan(y).any():
        raise FloatingPointError("NaN in loss inputs")
    if from_logits:
        return np.maximum(v, 0) - v * y + np.log1p(np.exp(-np.abs(v)))
    if np.any((v <= 0) | (v >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return -(y * np.log(v) + (1 - y) * np.log1p(-v))


def position_loss(y, y_hat, weights=None, from_logits: bool = False) -> float:
    """Class-averaged (optionally weighted) BCE for one prediction row."""
    terms = _bce(y, y_hat, from_logits)
    if weights is not None:
        terms = terms * np.asarray(weights, dtype=np.float64)
    return float(terms.sum() / terms.shape[-1])


def person_loss(y, series, weights=None, from_logits: bool = False) -> float:
    """Mean of ``position_loss`` over the rows of a prediction series."""
    series = np.atleast_2d(np.asarray(series))
    if series.shape[0] == 0:
        raise ValueError("person_loss needs at least one position")
    return float(np.mean([position_loss(y, row, weights, from_logits) for row in series]))


# ----------------------------------------------------------------------------
# batched loss on the tape


@dataclass
class Batch:
    arrays: dict
    labels: np.ndarray  # B x C

    @property
    def lengths(self) -> np.ndarray:
        return self.arrays["lengths"]


def make_batch(seqs: Sequence[InputSequence], labels: np.ndarray) -> Batch:
    return Batch(pad_sequences(seqs), np.asarray(labels, dtype=np.float64))


def loss_weights(lengths: np.ndarray, T: int, C: int, mode: str, class_weights=None) -> np.ndarray:
    """Constant weights turning elementwise BCE into the mean per-person loss.

    Padded positions get weight exactly zero.
    """
    B = len(lengths)
    w = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if mode == "cls":
        return np.broadcast_to(w / (C * B), (B, C)).copy()
    valid = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    per_pos = valid / lengths[:, None] / B
    return per_pos[:, :, None] * (w / C)[None, None, :]


def batch_loss(model: EvolveModel, batch: Batch, class_weights=None, train: bool = False, rng=None) -> ad.Tensor:
    """Mean over persons of the per-person loss, as a differentiable scalar."""
    logits = model.forward_logits(batch.arrays, train=train, rng=rng)
    C = model.config.n_classes
    if model.config.mode == "cls":
        targets = batch.labels
    else:
        B, T, _ = logits.shape
        targets = np.broadcast_to(batch.labels[:, None, :], (B, T, C))
    w = loss_weights(batch.lengths, logits.shape[1] if logits.ndim == 3 else 1, C, model.config.mode, class_weights)
    return ad.weighted_sum(ad.bce_with_logits(logits, targets), w)


# ----------------------------------------------------------------------------
# optimiser and schedule


class AdamW:
    def __init__(self, params: Sequence[ad.Tensor], weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        # decay only matrices (weights and embedding tables), not gains/biases
        self.decay = [p.data.ndim >= 2 for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.b1**t
        c2 = 1 - self.b2**t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decay and self.weight_decay:
                p.data *= p.data.dtype.type(1 - lr * self.weight_decay)
            p.data -= (lr * update).astype(p.data.dtype)

    def state(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr_fraction`` of the peak."""
    warm = max(1, int(round(cfg.warmup_fraction * total_steps)))
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total_steps - warm))
    floor = cfg.min_lr_fraction
    return cfg.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


def clip_grad_norm(params: Sequence[ad.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if not math.isfinite(total):
        raise TrainingDivergence("non-finite gradient norm")
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(s)
    return total


# ----------------------------------------------------------------------------
# data handling


def none_only(labels: np.ndarray, none_class: int) -> np.ndarray:
    """Rows whose label vector is exactly the none class."""
    labels = np.asarray(labels) > 0.5
    C = labels.shape[1]
    nc = none_class % C
    others = np.delete(labels, nc, axis=1).any(axis=1)
    return labels[:, nc] & ~others


def downsample_none(labels: np.ndarray, rate: float, rng: np.random.Generator, none_class: int = -1) -> np.ndarray:
    """Indices kept for one epoch, shuffled: none-only persons survive with
    probability ``rate``, everybody else always."""
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    n = len(labels)
    keep = np.ones(n, dtype=bool)
    if rate < 1.0:
        nn = none_only(labels, none_class)
        keep[nn] = rng.random(int(nn.sum())) < rate
    idx = np.flatnonzero(keep)
    return idx[rng.permutation(len(idx))]


def make_batches(idx: np.ndarray, lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Group similar lengths to limit padding, then shuffle batch order."""
    chunk = batch_size * 20
    batches = []
    for s in range(0, len(idx), chunk):
        part = idx[s : s + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i : i + batch_size] for i in range(0, len(part), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass
class EncodedData:
    seqs: list
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.seqs)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.seqs])


# ----------------------------------------------------------------------------
# fit


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float


@dataclass
class TrainState:
    """Everything needed to continue training bit-for-bit after an interruption."""

    epoch: int
    params: dict
    best_params: dict
    optimizer: dict
    rng_state: dict
    best_valid: float
    best_epoch: int
    since_best: int
    total_steps: int
    history: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        arrays = {}
        for k, v in self.params.items():
            arrays[f"param/{k}"] = v
        for k, v in self.best_params.items():
            arrays[f"best/{k}"] = v
        for i, (m, v) in enumerate(zip(self.optimizer["m"], self.optimizer["v"])):
            arrays[f"adam_m/{i}"] = m
            arrays[f"adam_v/{i}"] = v
        meta = {
            "epoch": self.epoch,
            "param_names": list(self.params),
            "opt_step": self.optimizer["step"],
            "n_opt": len(self.optimizer["m"]),
            "rng_state": self.rng_state,
            "best_valid": self.best_valid,
            "best_epoch": self.best_epoch,
            "since_best": self.since_best,
            "total_steps": self.total_steps,
            "history": [asdict(h) for h in self.history],
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            names = meta["param_names"]
            params = {k: z[f"param/{k}"] for k in names}
            best = {k: z[f"best/{k}"] for k in names}
            n = meta["n_opt"]
            opt = {"step": meta["opt_step"], "m": [z[f"adam_m/{i}"] for i in range(n)], "v": [z[f"adam_v/{i}"] for i in range(n)]}
        return cls(
            epoch=meta["epoch"],
            params=params,
            best_params=best,
            optimizer=opt,
            rng_state=meta["rng_state"],
            best_valid=meta["best_valid"],
            best_epoch=meta["best_epoch"],
            since_best=meta["since_best"],
            total_steps=meta["total_steps"],
            history=[EpochRecord(**h) for h in meta["history"]],
        )


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_valid: float
    state: TrainState
    stopped_early: bool


def evaluate_loss(model: EvolveModel, data: EncodedData, batch_size: int = 256, class_weights=None) -> float:
    """Mean per-person loss over a dataset, dropout off."""
    order = np.argsort(data.lengths, kind="stable")
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            batch = make_batch([data.seqs[i] for i in idx], data.labels[idx])
            total += batch_loss(model, batch, class_weights).item() * len(idx)
    return total / len(data)


def expected_steps_per_epoch(labels: np.ndarray, cfg: TrainConfig) -> int:
    nn = int(none_only(labels, cfg.none_class).sum())
    kept = (len(labels) - nn) + cfg.none_downsample_rate * nn
    return max(1, math.ceil(kept / cfg.batch_size))


def fit(
    model: EvolveModel,
    train: EncodedData,
    valid: EncodedData,
    cfg: TrainConfig,
    resume: TrainState | None = None,
    stop_after_epochs: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """Train in place; on return the model holds the best-validation weights.

    ``stop_after_epochs`` ends the run after that many epochs in this call
    (used for interruption/resume); the returned state resumes the run.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and valid sets must be non-empty")
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    if cfg.downsample_valid and cfg.none_downsample_rate < 1.0:
        keep = np.sort(downsample_none(valid.labels, cfg.none_downsample_rate, np.random.default_rng([cfg.seed, 1]), cfg.none_class))
        valid = EncodedData([valid.seqs[i] for i in keep], valid.labels[keep])
    lengths = train.lengths
    if resume is None:
        total_steps = cfg.max_epochs * expected_steps_per_epoch(train.labels, cfg)
        start_epoch = 0
        history: list[EpochRecord] = []
        best_valid = math.inf
        best_epoch = -1
        since_best = 0
        best_params = model.state_dict()
    else:
        model.load_state_dict(resume.params)
        opt.load_state(resume.optimizer)
        rng.bit_generator.state = resume.rng_state
        total_steps = resume.total_steps
        start_epoch = resume.epoch
        history = list(resume.history)
        best_valid, best_epoch, since_best = resume.best_valid, resume.best_epoch, resume.since_best
        best_params = {k: np.array(v) for k, v in resume.best_params.items()}

    stopped_early = False
    epoch = start_epoch
    ran = 0
    while epoch < cfg.max_epochs:
        t0 = time.time()
        idx = downsample_none(train.labels, cfg.none_downsample_rate, rng, cfg.none_class)
        batches = make_batches(idx, lengths, cfg.batch_size, rng)
        run_loss = 0.0
        seen = 0
        lr = 0.0
        for b in batches:
            lr = lr_at(opt.step_count, total_steps, cfg)
            batch = make_batch([train.seqs[i] for i in b], train.labels[b])
            model.zero_grad()
            loss = batch_loss(model, batch, cfg.class_weights, train=True, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite training loss at epoch {epoch}, step {opt.step_count} (lr={lr:.3g})")
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step(lr)
            run_loss += value * len(b)
            seen += len(b)
        vloss = evaluate_loss(model, valid, class_weights=cfg.class_weights)
        if not math.isfinite(vloss):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, run_loss / max(seen, 1), vloss, lr)
        history.append(rec)
        logger.info(
            "epoch %d train %.5f valid %.5f lr %.2e (%.1fs)", epoch, rec.train_loss, vloss, lr, time.time() - t0
        )
        if on_epoch:
            on_epoch(rec)
        if vloss < best_valid:
            best_valid, best_epoch, since_best = vloss, epoch, 0
            best_params = model.state_dict()
        else:
            since_best += 1
        epoch += 1
        ran += 1
        if since_best >= cfg.early_stop_patience:
            stopped_early = True
            break
        if stop_after_epochs is not None and ran >= stop_after_epochs:
            break

    state = TrainState(
        epoch=epoch,
        params=model.state_dict(),
        best_params=best_params,
        optimizer=opt.state(),
        rng_state=rng.bit_generator.state,
        best_valid=best_valid,
        best_epoch=best_epoch,
        since_best=since_best,
        total_steps=total_steps,
        history=history,
    )
    model.load_state_dict(best_params)
    return FitResult(history, best_epoch, best_valid, state, stopped_early)


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_loss", "lr"])
        for h in history:
            w.writerow([h.epoch, f"{h.train_loss:.8f}", f"{h.valid_loss:.8f}", f"{h.lr:.8e}"])


def overfit_single(model: EvolveModel, seq: InputSequence, labels: np.ndarray, steps: int = 200, lr: float = 1e-2) -> list[float]:
    """Plain AdamW steps on one person; returns the loss after each step."""
    opt = AdamW(model.parameters(), weight_decay=0.0)
    batch = make_batch([seq], np.asarray(labels)[None, :])
    losses = []
    for _ in range(steps):
        model.zero_grad()
        loss = batch_loss(model, batch)
        loss.backward()
        opt.step(lr)
        losses.append(loss.item())
    with ad.no_grad():
        losses.append(batch_loss(model, batch).item())
    return losses
