"""Trajectory analyses on a trained Evolve model.

* age embeddings: position-weighted mean pooling of the final hidden states
  at each recorded age, L2-normalised and gap-filled forward;
* neighbourhood change: share of a person's k nearest same-age neighbours
  that is replaced from one age to the next;
* sigmoid jumps: per-class thresholds calibrated on validation positives and
  used to attribute large prediction increases to the code that caused them;
* class-representative similarity: similarity of a person to the mean of
  their k most similar reference persons from each outcome class, per age.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import CODE_OFFSET, EvolveModel, InputSequence

logger = logging.getLogger(__name__)

JUMP_FLOOR = 1e-6


class AnalysisError(ValueError):
    pass


# ----------------------------------------------------------------------------
# age embeddings


def pwm_pool(embeddings) -> np.ndarray:
    """Position-weighted mean (weights 1..m, latest largest), then L2-normalised."""
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if E.shape[0] == 0:
        raise AnalysisError("pwm_pool needs at least one embedding")
    w = np.arange(1, E.shape[0] + 1, dtype=np.float64)
    v = (w[:, None] * E).sum(axis=0) / w.sum()
    norm = np.linalg.norm(v)
    if norm == 0.0 or not np.isfinite(norm):
        raise AnalysisError("pooled embedding is zero and cannot be normalised")
    return v / norm


@dataclass
class AgeEmbeddingMap:
    person_id: int
    first_age: int
    vectors: np.ndarray  # row i holds age first_age + i
    recorded_ages: np.ndarray = field(default=None, repr=False)

    @property
    def last_age(self) -> int:
        return self.first_age + len(self.vectors) - 1

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.first_age, self.last_age + 1)

    def has(self, age: int) -> bool:
        return self.first_age <= age <= self.last_age

    def at(self, age: int) -> np.ndarray:
        if not self.has(age):
            raise KeyError(f"person {self.person_id} has no embedding at age {age}")
        return self.vectors[age - self.first_age]


def age_embeddings_from_positions(person_id: int, ages: np.ndarray, hidden: np.ndarray) -> AgeEmbeddingMap:
    """Pool per-position hidden states into a gap-filled age -> unit vector map."""
    ages = np.asarray(ages, dtype=np.int64)
    if len(ages) == 0:
        raise AnalysisError(f"person {person_id} has no positions")
    recorded = np.unique(ages)
    first, last = int(recorded[0]), int(recorded[-1])
    out = np.empty((last - first + 1, hidden.shape[1]))
    current = None
    for a in range(first, last + 1):
        sel = ages == a
        if sel.any():
            current = pwm_pool(hidden[sel])
        out[a - first] = current
    return AgeEmbeddingMap(person_id, first, out, recorded)


def build_age_embeddings(seq: InputSequence, model: EvolveModel, person_id: int = 0) -> AgeEmbeddingMap:
    return age_embeddings_from_positions(person_id, seq.ages, model.extract_position_embeddings(seq))


def build_age_embedding_maps(
    seqs: Sequence[InputSequence], ids: Sequence[int], model: EvolveModel, batch_size: int = 128
) -> list[AgeEmbeddingMap]:
    hidden = model.position_embeddings(seqs, batch_size=batch_size)
    return [age_embeddings_from_positions(i, s.ages, h) for i, s, h in zip(ids, seqs, hidden)]


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise AnalysisError("cosine similarity of a zero vector")
    return float(u @ v / (nu * nv))


# ----------------------------------------------------------------------------
# neighbourhoods


class ReferenceIndex:
    """Reference persons' unit age embeddings stacked per age."""

    def __init__(self, maps: Iterable[AgeEmbeddingMap], labels: Mapping[int, np.ndarray] | None = None):
        self.maps = {m.person_id: m for m in maps}
        by_age: dict[int, list[tuple[int, np.ndarray]]] = defaultdict(list)
        for pid in sorted(self.maps):
            m = self.maps[pid]
            for a, v in zip(m.ages, m.vectors):
                by_age[int(a)].append((pid, v))
        self._ids: dict[int, np.ndarray] = {}
        self._vecs: dict[int, np.ndarray] = {}
        for a, rows in by_age.items():
            self._ids[a] = np.array([r[0] for r in rows], dtype=np.int64)
            self._vecs[a] = np.stack([r[1] for r in rows])
        self.labels = labels

    def pool(self, age: int, exclude: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        ids = self._ids.get(age)
        if ids is None:
            return np.empty(0, dtype=np.int64), np.empty((0, 0))
        vecs = self._vecs[age]
        if exclude is not None:
            keep = ids != exclude
            return ids[keep], vecs[keep]
        return ids, vecs

    def pool_size(self, age: int, exclude: int | None = None) -> int:
        return len(self.pool(age, exclude)[0])


@dataclass
class NeighborSet:
    target_id: int
    age: int
    k: int
    members: np.ndarray
    cosines: np.ndarray


def _as_index(references) -> ReferenceIndex:
    return references if isinstance(references, ReferenceIndex) else ReferenceIndex(references)


def _rank(vector: np.ndarray, ids: np.ndarray, vecs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    cos = vecs @ vector / (np.linalg.norm(vecs, axis=1) * np.linalg.norm(vector))
    order = np.lexsort((ids, -cos))[:k]
    return ids[order], cos[order]


def neighbors(target: AgeEmbeddingMap, age: int, references, k: int) -> NeighborSet:
    """k most cosine-similar references at the same age; ties go to the lower id."""
    index = _as_index(references)
    ids, vecs = index.pool(age, exclude=target.person_id)
    if len(ids) == 0:
        raise AnalysisError(f"no reference persons at age {age}")
    members, cos = _rank(target.at(age), ids, vecs, k)
    return NeighborSet(target.person_id, age, k, members, cos)


def _clamped_k(index: ReferenceIndex, target_id: int, ages: Iterable[int], k: int) -> int:
    smallest = min(index.pool_size(a, target_id) for a in ages)
    if smallest == 0:
        raise AnalysisError(f"empty reference pool at one of ages {list(ages)}")
    if k > smallest:
        warnings.warn(f"k={k} exceeds reference pool ({smallest}); clamped", stacklevel=3)
        return smallest
    return k


def rate_of_change(target: AgeEmbeddingMap, age: int, k: int, references) -> float:
    """1 - |N(age-1, k) & N(age, k)| / k, with k clamped to the smaller pool."""
    if not (target.has(age) and target.has(age - 1)):
        raise AnalysisError(f"person {target.person_id} lacks ages {age - 1} and {age}")
    index = _as_index(references)
    kk = _clamped_k(index, target.person_id, (age - 1, age), k)
    prev = neighbors(target, age - 1, index, kk).members
    cur = neighbors(target, age, index, kk).members
    return (kk - len(np.intersect1d(prev, cur))) / kk


def change_curve(target: AgeEmbeddingMap, k: int, references) -> dict[int, float]:
    """Rate of change at every age after the first in the person's range."""
    index = _as_index(references)
    out = {}
    prev = None
    for a in target.ages:
        a = int(a)
        cur_ok = index.pool_size(a, target.person_id) > 0
        if prev is not None and cur_ok and index.pool_size(a - 1, target.person_id) > 0:
            out[a] = rate_of_change(target, a, k, index)
        prev = a
    return out


@dataclass
class CurvePoint:
    age: int
    mean_r: float
    n: int


def cohort_change_curve(
    group: Sequence[AgeEmbeddingMap],
    k: int,
    references,
    ages: Iterable[int] | None = None,
    anchors: Mapping[int, int] | None = None,
) -> list[CurvePoint]:
    """Group-mean rate of change per age.

    With ``anchors`` (person id -> event age) the curve is indexed by years
    relative to each person's event instead of absolute age.
    """
    index = _as_index(references)
    acc: dict[int, list[float]] = defaultdict(list)
    for m in group:
        curve = change_curve(m, k, index)
        shift = anchors[m.person_id] if anchors is not None else 0
        for a, r in curve.items():
            acc[a - shift].append(r)
    keys = sorted(acc) if ages is None else list(ages)
    missing = [a for a in keys if not acc.get(a)]
    if missing:
        logger.info("change curve: no group member covers ages %s", missing)
    return [CurvePoint(a, float(np.mean(acc[a])), len(acc[a])) for a in keys if acc.get(a)]


# ----------------------------------------------------------------------------
# sigmoid jumps


@dataclass
class JumpThresholds:
    mean: np.ndarray  # per class, NaN where undefined
    counts: np.ndarray

    @property
    def undefined(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.counts == 0)]


def max_jump(series: np.ndarray) -> np.ndarray:
    """Per-class maximum position-to-position change of a T x C series (T >= 2)."""
    return np.diff(np.asarray(series, dtype=np.float64), axis=0).max(axis=0)


def calibrate_jumps(series: Sequence[np.ndarray], labels: np.ndarray) -> JumpThresholds:
    """Mean over positive persons of their maximum jump, per class."""
    labels = np.asarray(labels) > 0.5
    C = labels.shape[1]
    total = np.zeros(C)
    counts = np.zeros(C, dtype=np.int64)
    for s, y in zip(series, labels):
        if len(s) < 2:
            continue
        mj = max_jump(s)
        total[y] += mj[y]
        counts[y] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    th = JumpThresholds(mean, counts)
    if th.undefined:
        logger.warning("jump threshold undefined for classes without positives: %s", th.undefined)
    return th


@dataclass
class JumpEvent:
    person_id: int
    cls: int
    code: int
    before: float
    after: float
    age: int
    t2f: int

    @property
    def magnitude(self) -> float:
        return self.after - self.before


def detect_series_jumps(series: np.ndarray, thresholds: np.ndarray) -> list[tuple[int, int]]:
    """(position, class) pairs where the increase reaches the class threshold."""
    s = np.asarray(series, dtype=np.float64)
    if len(s) < 2:
        return []
    thr = np.where(np.isnan(thresholds), np.inf, np.maximum(thresholds, JUMP_FLOOR))
    d = np.diff(s, axis=0)
    t, c = np.nonzero(d >= thr[None, :])
    return [(int(a) + 1, int(b)) for a, b in zip(t, c)]


@dataclass
class JumpRow:
    cls: int
    code: int
    percent: float
    mean_age: float
    mean_t2f: float
    count: int


def detect_jumps(
    series: Sequence[np.ndarray],
    seqs: Sequence[InputSequence],
    ids: Sequence[int],
    thresholds: JumpThresholds,
) -> tuple[list[JumpEvent], list[JumpRow]]:
    """Attribute every qualifying jump to the code at the later position and
    tabulate per class: share of detected jumps, mean age, mean t2f."""
    events = []
    for s, seq, pid in zip(series, seqs, ids):
        for t, c in detect_series_jumps(s, thresholds.mean):
            events.append(
                JumpEvent(
                    person_id=int(pid),
                    cls=c,
                    code=int(seq.codes[t]) - CODE_OFFSET,
                    before=float(s[t - 1, c]),
                    after=float(s[t, c]),
                    age=int(seq.ages[t]),
                    t2f=int(seq.t2f[t]),
                )
            )
    return events, jump_table(events)


def jump_table(events: Sequence[JumpEvent]) -> list[JumpRow]:
    groups: dict[int, dict[int, list[JumpEvent]]] = defaultdict(lambda: defaultdict(list))
    for e in events:
        groups[e.cls][e.code].append(e)
    rows = []
    for c in sorted(groups):
        total = sum(len(v) for v in groups[c].values())
        per = [
            JumpRow(
                cls=c,
                code=code,
                percent=100.0 * len(evs) / total,
                mean_age=float(np.mean([e.age for e in evs])),
                mean_t2f=float(np.mean([e.t2f for e in evs])),
                count=len(evs),
            )
            for code, evs in groups[c].items()
        ]
        per.sort(key=lambda r: (-r.count, r.code))
        rows.extend(per)
    return rows


def top_codes(rows: Sequence[JumpRow], cls: int, n: int = 3) -> list[int]:
    return [r.code for r in rows if r.cls == cls][:n]


# ----------------------------------------------------------------------------
# class-representative similarity


@dataclass
class ClassSimilarity:
    ages: np.ndarray
    similarity: np.ndarray  # ages x C, NaN where a class has no reference
    omitted: list  # classes with no references at all
    short: list  # (age, class, available) where fewer than k references existed


def class_representative_similarity(
    target: AgeEmbeddingMap,
    references,
    ref_labels: Mapping[int, np.ndarray],
    k: int,
    n_classes: int,
) -> ClassSimilarity:
    """Per age and class: cosine between the target and the re-normalised mean
    of its k most similar same-age references carrying that label."""
    index = _as_index(references)
    ages = target.ages
    sim = np.full((len(ages), n_classes), np.nan)
    short = []
    seen_class = np.zeros(n_classes, dtype=bool)
    for i, a in enumerate(ages):
        a = int(a)
        ids, vecs = index.pool(a, exclude=target.person_id)
        if len(ids) == 0:
            continue
        lab = np.stack([np.asarray(ref_labels[int(p)]) > 0.5 for p in ids])
        z = target.at(a)
        for c in range(n_classes):
            sel = lab[:, c]
            n_avail = int(sel.sum())
            if n_avail == 0:
                continue
            seen_class[c] = True
            if n_avail < k:
                short.append((a, c, n_avail))
            members, _ = _rank(z, ids[sel], vecs[sel], k)
            rows = vecs[sel][np.isin(ids[sel], members)]
            centre = rows.mean(axis=0)
            norm = np.linalg.norm(centre)
            if norm == 0.0:
                continue
            sim[i, c] = cosine(z, centre / norm)
    omitted = [c for c in range(n_classes) if not seen_class[c]]
    if omitted:
        logger.info("class similarity: no references for classes %s", omitted)
    return ClassSimilarity(ages, sim, omitted, short)


# ----------------------------------------------------------------------------
# sigmoid trajectory


def series_by_age(series: np.ndarray, ages: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep the row of the last position at each distinct age."""
    ages = np.asarray(ages)
    distinct = np.unique(ages)
    last = np.array([np.flatnonzero(ages == a)[-1] for a in distinct])
    return distinct, np.asarray(series)[last]


def sigmoid_trajectory(seq: InputSequence, model: EvolveModel) -> tuple[np.ndarray, np.ndarray]:
    if model.config.mode != "evolve":
        raise AnalysisError("sigmoid trajectories need an evolve-mode model")
    return series_by_age(model.forward(seq), seq.ages)


# ----------------------------------------------------------------------------
# CSV output


def write_trajectory_csv(path, ages, matrix, class_names, extra: Mapping[str, Sequence] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        extra = extra or {}
        w.writerow(["age", *class_names, *extra])
        for i, a in enumerate(ages):
            vals = ["" if np.isnan(v) else f"{v:.6f}" for v in matrix[i]]
            ext = []
            for col in extra.values():
                v = col[i]
                ext.append("" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}")
            w.writerow([int(a), *vals, *ext])


def write_jump_csv(path, rows: Sequence[JumpRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "code", "percent", "mean_age", "mean_t2f", "count"])
        for r in rows:
            w.writerow([r.cls, r.code, f"{r.percent:.4f}", f"{r.mean_age:.4f}", f"{r.mean_t2f:.4f}", r.count])


def write_curve_csv(path, points: Sequence[CurvePoint], key: str = "age") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, "mean_r", "n"])
        for p in points:
            w.writerow([p.age, f"{p.mean_r:.6f}", p.n])
