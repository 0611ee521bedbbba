"""One-vs-rest L1 logistic regression on code-count vectors plus age.

Each class minimises ``sum_i logloss_i + (1/C) * ||w||_1`` (liblinear's
scaling of the inverse regularisation strength ``C``) with an unpenalised
intercept, solved by accelerated proximal gradient with backtracking.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import stable_sigmoid
from .cohort import PersonRecord

logger = logging.getLogger(__name__)


class NotFittedError(RuntimeError):
    pass


def count_features(p: PersonRecord, vocab_size: int, forecast_start: float, max_events: int | None = None) -> np.ndarray:
    """Raw code counts (over the most recent ``max_events`` events) followed by age at forecast start."""
    events = p.events if max_events is None else p.events[-max_events:]
    x = np.zeros(vocab_size + 1)
    for code, _ in events:
        x[code] += 1
    x[vocab_size] = forecast_start - p.birth_year
    return x


class Featurizer:
    """Count vectorizer whose age column is standardized with training-set moments."""

    def __init__(self, vocab_size: int, forecast_start: float, max_events: int | None = None):
        self.vocab_size = vocab_size
        self.forecast_start = forecast_start
        self.max_events = max_events
        self.age_mean: float | None = None
        self.age_std: float | None = None

    def raw(self, persons: Sequence[PersonRecord]) -> np.ndarray:
        return np.stack([count_features(p, self.vocab_size, self.forecast_start, self.max_events) for p in persons])

    def fit(self, persons: Sequence[PersonRecord]) -> "Featurizer":
        ages = self.raw(persons)[:, -1]
        self.age_mean = float(ages.mean())
        self.age_std = float(ages.std()) or 1.0
        return self

    def transform(self, persons: Sequence[PersonRecord]) -> np.ndarray:
        if self.age_mean is None:
            raise NotFittedError("Featurizer.fit must run on the training set first")
        X = self.raw(persons)
        X[:, -1] = (X[:, -1] - self.age_mean) / self.age_std
        return X

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "forecast_start": self.forecast_start,
            "max_events": self.max_events,
            "age_mean": self.age_mean,
            "age_std": self.age_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Featurizer":
        f = cls(d["vocab_size"], d["forecast_start"], d.get("max_events"))
        f.age_mean, f.age_std = d["age_mean"], d["age_std"]
        return f


@dataclass
class FitInfo:
    iterations: int
    converged: bool
    objective: float
    grad_norm: float


def fit_l1_logistic(
    X: np.ndarray,
    y: np.ndarray,
    C: float = 0.1,
    tol: float = 1e-5,
    max_iter: int = 20000,
) -> tuple[np.ndarray, float, FitInfo]:
    """FISTA on the mean-scaled objective; stops when the proximal-gradient
    mapping norm falls below ``tol``."""
    n, d = X.shape
    y = np.asarray(y, dtype=np.float64)
    lam = 1.0 / (C * n)  # penalty on the mean loss

    def smooth(w, b):
        z = X @ w + b
        f = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
        r = (stable_sigmoid(z) - y) / n
        return f, X.T @ r, r.sum()

    def prox(v, step):
        return np.sign(v) * np.maximum(np.abs(v) - step * lam, 0.0)

    prev_mean = min(max(y.mean(), 1e-6), 1 - 1e-6)
    w = np.zeros(d)
    b = float(np.log(prev_mean / (1 - prev_mean)))
    vw, vb = w.copy(), b
    t = 1.0
    L = 1.0
    best = (np.inf, w.copy(), b)
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f, gw, gb = smooth(vw, vb)
        while True:
            step = 1.0 / L
            nw = prox(vw - step * gw, step)
            nb = vb - step * gb
            dw, db = nw - vw, nb - vb
            fn, _, _ = smooth(nw, nb)
            if fn <= f + gw @ dw + gb * db + 0.5 * L * (dw @ dw + db * db) + 1e-15:
                break
            L *= 2.0
        gnorm = float(np.sqrt(dw @ dw + db * db) * L)
        obj = fn + lam * np.abs(nw).sum()
        if obj < best[0]:
            best = (obj, nw.copy(), nb)
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        mom = (t - 1) / t_next
        # restart momentum when the objective goes up
        if obj > best[0] + 1e-12:
            t_next, mom = 1.0, 0.0
        vw = nw + mom * (nw - w)
        vb = nb + mom * (nb - b)
        w, b, t = nw, nb, t_next
        L *= 0.9
        if gnorm < tol:
            return w, float(b), FitInfo(it, True, obj, gnorm)
    warnings.warn(f"L1 logistic regression did not converge in {max_iter} iterations (gradient mapping {gnorm:.2e})")
    return best[1], float(best[2]), FitInfo(it, False, best[0], gnorm)


class OneVsRestLogReg:
    """Independent L1 logistic model per class."""

    def __init__(self, C: float = 0.1, tol: float = 1e-5, max_iter: int = 20000):
        self.C = C
        self.tol = tol
        self.max_iter = max_iter
        self.coef_: np.ndarray | None = None
        self.intercept_: np.ndarray | None = None
        self.skipped: list[int] = []
        self.info: list[FitInfo | None] = []
        self.featurizer: Featurizer | None = None

    def fit(self, X: np.ndarray, Y: np.ndarray) -> "OneVsRestLogReg":
        n, d = X.shape
        C = Y.shape[1]
        self.coef_ = np.zeros((C, d))
        self.intercept_ = np.zeros(C)
        self.skipped = []
        self.info = []
        for c in range(C):
            y = Y[:, c]
            pos = y.sum()
            if pos == 0 or pos == n:
                # degenerate class: constant predictor at the training prevalence
                prev = min(max(pos / n, 1e-12), 1 - 1e-12)
                self.intercept_[c] = np.log(prev / (1 - prev))
                self.skipped.append(c)
                self.info.append(None)
                logger.warning("class %d has a single outcome in training; using a constant predictor", c)
                continue
            w, b, info = fit_l1_logistic(X, y, self.C, self.tol, self.max_iter)
            self.coef_[c], self.intercept_[c] = w, b
            self.info.append(info)
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.coef_ is None:
            raise NotFittedError("model is not fitted")
        return stable_sigmoid(np.asarray(X, dtype=np.float64) @ self.coef_.T + self.intercept_)

    def to_json(self) -> str:
        if self.coef_ is None:
            raise NotFittedError("model is not fitted")
        return json.dumps(
            {
                "kind": "logreg",
                "C": self.C,
                "classes": [
                    {"weights": self.coef_[c].tolist(), "intercept": float(self.intercept_[c]), "skipped": c in self.skipped}
                    for c in range(len(self.intercept_))
                ],
                "featurizer": self.featurizer.to_dict() if self.featurizer else None,
            }
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "OneVsRestLogReg":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.get("kind") != "logreg":
            raise ValueError(f"{path}: not a logistic-regression model file")
        m = cls(C=d["C"])
        m.coef_ = np.array([c["weights"] for c in d["classes"]], dtype=np.float64)
        m.intercept_ = np.array([c["intercept"] for c in d["classes"]], dtype=np.float64)
        m.skipped = [i for i, c in enumerate(d["classes"]) if c["skipped"]]
        if d.get("featurizer"):
            m.featurizer = Featurizer.from_dict(d["featurizer"])
        return m
