"""Multi-label evaluation metrics with micro/macro averaging and bootstrap.

Tie conventions: AUROC uses midranks, average precision groups tied scores
into one threshold, and top-k selection breaks ties by lower class index.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

AVERAGES = ("micro", "macro")


class MetricUndefined(ValueError):
    """The metric has no defined value for these labels (e.g. a single class present)."""


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, (y > 0.5).astype(np.int8)


def valid_classes(labels: np.ndarray) -> np.ndarray:
    """Boolean mask of columns holding at least one positive and one negative."""
    y = np.asarray(labels) > 0.5
    if y.ndim == 1:
        y = y[:, None]
    return y.any(axis=0) & (~y).any(axis=0)


def binary_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    y = np.asarray(labels) > 0.5
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUROC needs both positives and negatives")
    ranks = rankdata(scores, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision, sum over thresholds of (R_i - R_{i-1}) * P_i.

    Tied scores form one threshold.
    """
    y = np.asarray(labels) > 0.5
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise MetricUndefined("AUPRC needs both positives and negatives")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def _average(fn, s: np.ndarray, y: np.ndarray, averaging: str, name: str) -> float:
    if averaging == "micro":
        return fn(s.reshape(-1), y.reshape(-1))
    if averaging == "macro":
        ok = valid_classes(y)
        if not ok.any():
            raise MetricUndefined(f"{name}: no class has both positives and negatives")
        skipped = np.flatnonzero(~ok)
        if skipped.size:
            logger.info("%s macro: excluding classes without both outcomes: %s", name, skipped.tolist())
        return float(np.mean([fn(s[:, c], y[:, c]) for c in np.flatnonzero(ok)]))
    raise ValueError(f"averaging must be one of {AVERAGES}")


def auroc(scores, labels, averaging: str = "macro") -> float:
    s, y = _check(scores, labels)
    return _average(binary_auroc, s, y, averaging, "AUROC")


def auprc(scores, labels, averaging: str = "macro") -> float:
    s, y = _check(scores, labels)
    return _average(binary_average_precision, s, y, averaging, "AUPRC")


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean N x C mask of each row's k highest scores (ties -> lower index)."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    mask = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def recall_at_k(scores, labels, k: int = 4, averaging: str = "macro", exclude: Sequence[int] = ()) -> float:
    """Fraction of true labels that land in each person's top-k scored classes.

    ``exclude`` drops classes (e.g. the none class) from both ranking and scoring.
    """
    s, y = _check(scores, labels)
    if exclude:
        keep = np.setdiff1d(np.arange(s.shape[1]), np.asarray(exclude, dtype=int))
        s, y = s[:, keep], y[:, keep]
    if s.shape[1] < k:
        raise ValueError(f"recall@{k} needs at least {k} classes, got {s.shape[1]}")
    hit = top_k_mask(s, k) & (y > 0)
    if averaging == "micro":
        total = int(y.sum())
        if total == 0:
            raise MetricUndefined("recall@k: no positive labels")
        return float(hit.sum() / total)
    if averaging == "macro":
        pos = y.sum(axis=0)
        ok = pos > 0
        if not ok.any():
            raise MetricUndefined("recall@k: no positive labels")
        return float(np.mean(hit.sum(axis=0)[ok] / pos[ok]))
    raise ValueError(f"averaging must be one of {AVERAGES}")


def per_class_recall_at_k(scores, labels, k: int = 4) -> np.ndarray:
    s, y = _check(scores, labels)
    hit = top_k_mask(s, k) & (y > 0)
    pos = y.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(pos > 0, hit.sum(axis=0) / np.maximum(pos, 1), np.nan)


def per_class_auroc(scores, labels) -> np.ndarray:
    s, y = _check(scores, labels)
    out = np.full(s.shape[1], np.nan)
    for c in np.flatnonzero(valid_classes(y)):
        out[c] = binary_auroc(s[:, c], y[:, c])
    return out


@dataclass
class BootstrapResult:
    mean: float
    std: float
    n_redrawn: int = 0
    values: np.ndarray = field(default=None, repr=False)


def bootstrap_std(
    metric: Callable[[np.ndarray, np.ndarray], float],
    scores,
    labels,
    iters: int = 1000,
    seed: int = 0,
    max_redraws: int | None = None,
) -> BootstrapResult:
    """Resample persons with replacement and summarise the metric spread."""
    if iters < 2:
        raise ValueError("bootstrap needs at least 2 iterations")
    s = np.asarray(scores)
    y = np.asarray(labels)
    n = s.shape[0]
    rng = np.random.default_rng(seed)
    max_redraws = 10 * iters if max_redraws is None else max_redraws
    values = np.empty(iters)
    redrawn = 0
    i = 0
    while i < iters:
        idx = rng.integers(0, n, size=n)
        try:
            values[i] = metric(s[idx], y[idx])
        except MetricUndefined:
            redrawn += 1
            if redrawn > max_redraws:
                raise
            continue
        i += 1
    if redrawn:
        logger.info("bootstrap: redrew %d resamples with undefined metric", redrawn)
    return BootstrapResult(float(values.mean()), float(values.std(ddof=1)), redrawn, values)


# ----------------------------------------------------------------------------
# report tables

METRIC_FNS = {
    "auroc": auroc,
    "auprc": auprc,
    "recall4": lambda s, y, averaging: recall_at_k(s, y, 4, averaging),
}

SUMMARY_COLUMNS = ["model"] + [
    f"{m}_{a}{suffix}" for m in METRIC_FNS for a in AVERAGES for suffix in ("", "_std")
]


def summary_row(model: str, scores, labels, iters: int = 1000, seed: int = 0) -> dict:
    """One row of the model-comparison table: each metric, micro and macro, with bootstrap std."""
    row = {"model": model}
    for name, fn in METRIC_FNS.items():
        for a in AVERAGES:
            row[f"{name}_{a}"] = fn(scores, labels, a)
            if iters:
                bs = bootstrap_std(lambda s, y, fn=fn, a=a: fn(s, y, a), scores, labels, iters=iters, seed=seed)
                row[f"{name}_{a}_std"] = bs.std
            else:
                row[f"{name}_{a}_std"] = float("nan")
    return row


def per_class_rows(scores, labels, class_names: Sequence[str]) -> list[dict]:
    y = np.asarray(labels)
    au = per_class_auroc(scores, labels)
    rc = per_class_recall_at_k(scores, labels, 4)
    return [
        {"class": name, "auroc": au[c], "recall4": rc[c], "prevalence": float(y[:, c].mean())}
        for c, name in enumerate(class_names)
    ]


def write_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str] | None = None) -> None:
    columns = list(columns or rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
