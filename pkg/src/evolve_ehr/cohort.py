"""Synthetic longitudinal coded cohorts with planted hazard structure.

Each person has a birth date, a run of coded events in the historical
interval and a multi-label outcome vector for the forecast interval
(first-onset diagnoses, death, or none). Diagnosis hazards rise with age,
scale with a latent per-class frailty and are multiplied after a planted
trigger code. A small group receives a mid-life burst of otherwise unseen
"shock" codes.

Time is continuous (decimal years). Generation is per person with a seed
derived from ``(seed, person_index)``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import CODE_OFFSET, InputSequence

logger = logging.getLogger(__name__)

CODE_TYPES = (
    "visits",
    "drugs",
    "endpoints",
    "icd",
    "infections",
    "procedures_secondary",
    "procedures_primary",
)

DEFAULT_VOCAB = {
    "visits": 40,
    "drugs": 40,
    "endpoints": 40,
    "icd": 30,
    "infections": 10,
    "procedures_secondary": 25,
    "procedures_primary": 15,
}


class CohortConfigError(ValueError):
    """Invalid or infeasible cohort configuration."""


class DataError(ValueError):
    """A person record violates the dataset invariants."""


@dataclass
class CohortConfig:
    n_persons: int = 20000
    vocab: dict = field(default_factory=lambda: dict(DEFAULT_VOCAB))
    n_classes: int = 10
    history_years: float = 60.0
    forecast_years: float = 5.0
    buffer_fraction: float = 0.05
    forecast_start: float = 2016.0
    # class index (as str in JSON) -> {"codes": [...], "multiplier": float}
    trigger_map: dict | None = None
    trigger_multiplier: float = 8.0
    trigger_prob: float = 0.2
    trigger_window_years: float = 15.0
    base_rates: list | None = None
    age_slope: float = 0.04
    frailty_sigma: float = 0.6
    death_rate: float = 0.0025
    death_slope: float = 0.09
    event_rate: float = 0.5
    event_age_slope: float = 0.012
    prodromal_rate: float = 0.06
    # yearly rate at which a trigger code or recorded endpoint recurs at follow-up visits
    followup_rate: float = 0.0
    n_prodromal: int = 2
    shock_prob: float = 0.02
    shock_size: int = 8
    n_shock_codes: int = 6
    shock_age_range: tuple = (30, 50)
    shock_effects: dict = field(default_factory=lambda: {"1": 3.0})
    mean_age: float = 42.0
    sd_age: float = 24.0
    seed: int = 0

    # --- derived layout -----------------------------------------------------
    @property
    def vocab_size(self) -> int:
        return int(sum(self.vocab.values()))

    @property
    def n_diagnoses(self) -> int:
        return self.n_classes - 2

    @property
    def death_class(self) -> int:
        return self.n_classes - 2

    @property
    def none_class(self) -> int:
        return self.n_classes - 1

    @property
    def buffer_years(self) -> float:
        return self.buffer_fraction * self.forecast_years

    def type_start(self, kind: str) -> int:
        start = 0
        for t in CODE_TYPES:
            if t == kind:
                return start
            start += int(self.vocab.get(t, 0))
        raise KeyError(kind)

    def record_code(self, c: int) -> int:
        """Endpoint code emitted when diagnosis ``c`` first occurs in the history."""
        return self.type_start("endpoints") + c

    def default_trigger_code(self, c: int) -> int:
        return self.type_start("endpoints") + self.n_diagnoses + c

    def prodromal_codes(self, c: int) -> list[int]:
        s = self.type_start("drugs") + c * self.n_prodromal
        return list(range(s, s + self.n_prodromal))

    def shock_codes(self) -> list[int]:
        end = self.type_start("visits") + int(self.vocab["visits"])
        return list(range(end - self.n_shock_codes, end))

    def resolved_triggers(self) -> dict[int, tuple[list[int], float]]:
        if self.trigger_map is None:
            return {c: ([self.default_trigger_code(c)], self.trigger_multiplier) for c in range(self.n_diagnoses)}
        out = {}
        for k, v in self.trigger_map.items():
            out[int(k)] = ([int(x) for x in v["codes"]], float(v.get("multiplier", self.trigger_multiplier)))
        return out

    def resolved_base_rates(self) -> np.ndarray:
        if self.base_rates is None:
            # yearly hazard at age 50 for frailty 1; spread so prevalences differ
            return np.geomspace(0.0013, 0.004, self.n_diagnoses)
        return np.asarray(self.base_rates, dtype=float)

    def validate(self) -> None:
        if self.n_persons <= 0:
            raise CohortConfigError("n_persons: must be positive")
        if self.n_classes < 3:
            raise CohortConfigError("n_classes: need at least one diagnosis plus death and none")
        unknown = set(self.vocab) - set(CODE_TYPES)
        if unknown:
            raise CohortConfigError(f"vocab: unknown code types {sorted(unknown)}")
        if any(int(v) < 0 for v in self.vocab.values()):
            raise CohortConfigError("vocab: counts must be non-negative")
        if self.vocab.get("endpoints", 0) < 2 * self.n_diagnoses:
            raise CohortConfigError("vocab.endpoints: need two endpoint codes per diagnosis")
        if self.vocab.get("drugs", 0) < self.n_prodromal * self.n_diagnoses:
            raise CohortConfigError("vocab.drugs: too few drug codes for prodromal codes")
        if self.vocab.get("visits", 0) < self.n_shock_codes + 1:
            raise CohortConfigError("vocab.visits: too few visit codes for shock codes")
        for name in ("trigger_prob", "shock_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CohortConfigError(f"{name}: probability outside [0, 1]")
        if self.followup_rate < 0:
            raise CohortConfigError("followup_rate: must be non-negative")
        if not 0.0 <= self.buffer_fraction < 1.0:
            raise CohortConfigError("buffer_fraction: must lie in [0, 1)")
        if self.history_years <= 0 or self.forecast_years <= 0:
            raise CohortConfigError("history_years/forecast_years: must be positive")
        V = self.vocab_size
        for c, (codes, mult) in self.resolved_triggers().items():
            if not 0 <= c < self.n_diagnoses + 1:
                raise CohortConfigError(f"trigger_map.{c}: not a diagnosis or death class")
            for code in codes:
                if not 0 <= code < V:
                    raise CohortConfigError(f"trigger_map.{c}.codes: code {code} outside vocabulary of {V}")
            if mult <= 0:
                raise CohortConfigError(f"trigger_map.{c}.multiplier: must be positive")
        if len(self.resolved_base_rates()) != self.n_diagnoses:
            raise CohortConfigError("base_rates: need one rate per diagnosis class")
        lo, hi = self.shock_age_range
        if not 1 <= lo <= hi:
            raise CohortConfigError("shock_age_range: need 1 <= lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shock_age_range"] = list(self.shock_age_range)
        return d

    @classmethod
    def from_dict(cls, d: dict, path: str = "cohort") -> "CohortConfig":
        """Build from a JSON document. ``vocab`` must be given explicitly."""
        if not isinstance(d, dict):
            raise CohortConfigError(f"{path}: expected an object")
        if "vocab" not in d:
            raise CohortConfigError(f"{path}.vocab: required field missing")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise CohortConfigError(f"{path}.{k}: unknown field")
            kwargs[k] = v
        if "shock_age_range" in kwargs:
            kwargs["shock_age_range"] = tuple(kwargs["shock_age_range"])
        try:
            cfg = cls(**kwargs)
        except TypeError as e:  # pragma: no cover - dataclass signature errors
            raise CohortConfigError(f"{path}: {e}") from e
        for name in ("n_persons", "n_classes", "seed"):
            if not isinstance(getattr(cfg, name), int) or isinstance(getattr(cfg, name), bool):
                raise CohortConfigError(f"{path}.{name}: expected an integer")
        if not isinstance(cfg.vocab, dict):
            raise CohortConfigError(f"{path}.vocab: expected an object of per-type counts")
        try:
            cfg.validate()
        except CohortConfigError as e:
            raise CohortConfigError(f"{path}.{e}") from None
        return cfg


@dataclass
class PersonRecord:
    person_id: int
    birth_year: float
    events: list  # [(code, age_in_years)], time ordered
    labels: list  # sorted class ids

    def __eq__(self, other):
        if not isinstance(other, PersonRecord):
            return NotImplemented
        return (
            self.person_id == other.person_id
            and self.birth_year == other.birth_year
            and [tuple(e) for e in self.events] == [tuple(e) for e in other.events]
            and list(self.labels) == list(other.labels)
        )

    def label_vector(self, n_classes: int) -> np.ndarray:
        y = np.zeros(n_classes)
        y[list(self.labels)] = 1.0
        return y

    def age_at(self, t: float) -> float:
        return t - self.birth_year


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list

    def to_dict(self) -> dict:
        return {"train": list(self.train), "valid": list(self.valid), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["valid"]), list(d["test"]))


# ----------------------------------------------------------------------------
# hazard sampling


def _first_passage(
    rng: np.random.Generator,
    start_age: float,
    end_age: float,
    level: float,
    slope: float,
    steps: Sequence[tuple[float, float]] = (),
    pivot: float = 50.0,
) -> float | None:
    """Sample the first event age for hazard ``level * exp(slope*(a - pivot)) * m(a)``.

    ``m`` is piecewise constant: each ``(age, factor)`` in ``steps`` multiplies
    the hazard from that age onwards. Returns None when no event occurs before
    ``end_age``.
    """
    target = rng.exponential()
    cuts = sorted((a, f) for a, f in steps if start_age < a < end_age)
    mult = math.prod(f for a, f in steps if a <= start_age)
    bounds = [start_age] + [a for a, _ in cuts] + [end_age]
    factors = [mult]
    for _, f in cuts:
        mult *= f
        factors.append(mult)
    acc = 0.0
    for (a0, a1), m in zip(zip(bounds[:-1], bounds[1:]), factors):
        k = level * m
        e0 = math.exp(slope * (a0 - pivot))
        seg = k / slope * (math.exp(slope * (a1 - pivot)) - e0)
        if acc + seg >= target:
            need = target - acc
            return pivot + math.log(e0 + need * slope / k) / slope
        acc += seg
    return None


def _background_weights(cfg: CohortConfig) -> tuple[np.ndarray, np.ndarray]:
    reserved = set()
    for c in range(cfg.n_diagnoses):
        reserved.add(cfg.record_code(c))
        reserved.update(cfg.prodromal_codes(c))
    for codes, _ in cfg.resolved_triggers().values():
        reserved.update(codes)
    reserved.update(cfg.shock_codes())
    pool = np.array([k for k in range(cfg.vocab_size) if k not in reserved], dtype=np.int64)
    # fixed Zipf-like popularity over a permutation seeded by the cohort seed
    order = np.random.default_rng([cfg.seed, 7919]).permutation(len(pool))
    w = 1.0 / (1.0 + order) ** 0.8
    return pool, w / w.sum()


def _generate_person(cfg: CohortConfig, index: int, pool: np.ndarray, pool_p: np.ndarray, triggers, base_rates) -> PersonRecord:
    rng = np.random.default_rng([cfg.seed, index])
    fs = cfg.forecast_start
    hist_end = fs - cfg.buffer_years
    birth = round(fs - float(np.clip(rng.normal(cfg.mean_age, cfg.sd_age), 1.0, 100.0)), 6)
    age_fs = fs - birth
    win_start_age = max(0.0, age_fs - cfg.history_years)
    win_end_age = hist_end - birth  # exclusive
    fc_end_age = age_fs + cfg.forecast_years
    if win_end_age <= win_start_age:
        win_end_age = win_start_age + 1e-3  # unreachable with age_fs >= 1 and buffer < 1 year
    span = win_end_age - win_start_age

    frailty = rng.lognormal(0.0, cfg.frailty_sigma, size=cfg.n_diagnoses)
    general = rng.lognormal(0.0, 0.4)
    events: list[tuple[int, float]] = []

    def uniform_age(lo=win_start_age, hi=win_end_age):
        return float(rng.uniform(lo, hi))

    def followups(code: int, start: float) -> None:
        n = rng.poisson(cfg.followup_rate * max(win_end_age - start, 0.0))
        events.extend((code, float(a)) for a in rng.uniform(start, win_end_age, size=n))

    # planted triggers
    steps: dict[int, list[tuple[float, float]]] = {c: [] for c in range(cfg.n_classes)}
    for c in sorted(triggers):
        codes, mult = triggers[c]
        if rng.random() < cfg.trigger_prob:
            a = uniform_age(max(win_start_age, win_end_age - cfg.trigger_window_years))
            for code in codes:
                events.append((int(code), a))
                followups(int(code), a)
            steps[c].append((a, mult))

    # mid-life shock burst at one integer age
    lo, hi = cfg.shock_age_range
    shock_draw = rng.random()
    shock_age_int = int(rng.integers(lo, hi + 1))
    if shock_draw < cfg.shock_prob and win_start_age <= shock_age_int - 1 and shock_age_int + 2 <= win_end_age:
        codes = rng.choice(cfg.shock_codes(), size=cfg.shock_size)
        offs = np.sort(rng.uniform(0.0, 0.95, size=cfg.shock_size))
        a_shock = shock_age_int + float(offs[0])
        for code, off in zip(codes, offs):
            events.append((int(code), shock_age_int + float(off)))
        for k, f in cfg.shock_effects.items():
            steps[int(k)].append((a_shock, float(f)))

    # background codes, age-dependent rate
    r0 = general * cfg.event_rate
    slope = cfg.event_age_slope
    mean_n = r0 * (span + slope * (win_end_age**2 - win_start_age**2) / 2)
    n_bg = rng.poisson(mean_n)
    if n_bg:
        # inverse CDF of the linear rate r0*(1 + slope*a) over the window
        u = rng.random(n_bg)
        A = slope / 2
        B = 1.0
        lo_c = A * win_start_age**2 + B * win_start_age
        tot = A * win_end_age**2 + B * win_end_age - lo_c
        cc = lo_c + u * tot
        ages = (-B + np.sqrt(B * B + 4 * A * cc)) / (2 * A) if A > 0 else cc
        ages = np.clip(ages, win_start_age, np.nextafter(win_end_age, -np.inf))
        codes = rng.choice(pool, size=n_bg, p=pool_p)
        events.extend((int(c), float(a)) for c, a in zip(codes, ages))

    # class-linked codes whose rate tracks the latent frailty
    for c in range(cfg.n_diagnoses):
        n = rng.poisson(cfg.prodromal_rate * frailty[c] * span)
        if n:
            codes = rng.choice(cfg.prodromal_codes(c), size=n)
            for code in codes:
                events.append((int(code), uniform_age()))

    # diagnosis onsets over the whole life; a first onset inside the history
    # is recorded as an endpoint code and can no longer produce a label
    onset = {}
    for c in range(cfg.n_diagnoses):
        a = _first_passage(rng, 0.0, fc_end_age, base_rates[c] * frailty[c], cfg.age_slope, steps[c])
        onset[c] = a
        if a is not None and win_start_age <= a < win_end_age:
            events.append((cfg.record_code(c), a))
            followups(cfg.record_code(c), a)

    # death conditioned on survival to forecast start
    n_prior = sum(1 for a in onset.values() if a is not None and a < age_fs)
    death_level = cfg.death_rate * general * (1.0 + 0.3 * n_prior)
    death_age = _first_passage(rng, age_fs, fc_end_age, death_level, cfg.death_slope, steps[cfg.death_class])

    horizon = death_age if death_age is not None else fc_end_age
    labels = [c for c in range(cfg.n_diagnoses) if onset[c] is not None and age_fs <= onset[c] < horizon]
    if death_age is not None:
        labels.append(cfg.death_class)
    if not labels:
        labels = [cfg.none_class]

    if not events:
        # persons without any record are out of scope; give them one visit
        events.append((int(rng.choice(pool, p=pool_p)), uniform_age()))
    events.sort(key=lambda e: (e[1], e[0]))
    events = [(c, round(a, 6)) for c, a in events]
    events = [(c, min(a, _below(win_end_age))) for c, a in events]
    return PersonRecord(person_id=index, birth_year=birth, events=events, labels=sorted(labels))


def _below(age_end: float) -> float:
    # largest 6-decimal age strictly inside the historical window
    return math.floor(age_end * 1e6 - 1) / 1e6


def generate(cfg: CohortConfig, seed: int | None = None) -> list[PersonRecord]:
    """Generate ``cfg.n_persons`` persons; ``seed`` overrides ``cfg.seed``."""
    if seed is not None and seed != cfg.seed:
        cfg = CohortConfig(**{**cfg.__dict__, "seed": seed})
    cfg.validate()
    pool, pool_p = _background_weights(cfg)
    triggers = cfg.resolved_triggers()
    base = cfg.resolved_base_rates()
    persons = [_generate_person(cfg, i, pool, pool_p, triggers, base) for i in range(cfg.n_persons)]
    for p in persons:
        check_person(p, cfg)
    return persons


def check_person(p: PersonRecord, cfg: CohortConfig) -> None:
    if not p.events:
        raise DataError(f"person {p.person_id}: no events")
    hist_end = cfg.forecast_start - cfg.buffer_years
    for code, age in p.events:
        if p.birth_year + age >= hist_end:
            raise DataError(f"person {p.person_id}: event at age {age} falls in the buffer or later")
    labels = set(p.labels)
    if (cfg.none_class in labels) == (len(labels - {cfg.none_class}) > 0) or not labels:
        raise DataError(f"person {p.person_id}: none must be set exactly when nothing else is")


# ----------------------------------------------------------------------------
# splitting and model inputs


def split(persons: Sequence[PersonRecord] | Sequence[int], seed: int) -> DatasetSplit:
    """70/10/20 person-level split, deterministic under ``seed``."""
    ids = [p.person_id if isinstance(p, PersonRecord) else int(p) for p in persons]
    n = len(ids)
    if n < 10:
        raise ValueError("split needs at least 10 persons")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(0.7 * n + 0.5)
    n_valid = int(0.1 * n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=sorted(shuffled[:n_train]),
        valid=sorted(shuffled[n_train : n_train + n_valid]),
        test=sorted(shuffled[n_train + n_valid :]),
    )


def to_input_sequence(
    p: PersonRecord,
    forecast_start: float,
    buffer_years: float = 0.0,
    max_len: int | None = None,
) -> InputSequence:
    """Model input for one person: token ids, integer ages and years-to-forecast."""
    cutoff = forecast_start - buffer_years
    codes, ages, t2f = [], [], []
    for code, age in p.events:
        t = p.birth_year + age
        if t >= cutoff:
            raise DataError(f"person {p.person_id}: event at {t:.4f} is inside the buffer before {forecast_start}")
        codes.append(int(code) + CODE_OFFSET)
        ages.append(math.floor(age + 1e-9))
        t2f.append(math.floor(forecast_start - t + 1e-9))
    if max_len is not None and len(codes) > max_len:
        codes, ages, t2f = codes[-max_len:], ages[-max_len:], t2f[-max_len:]
    return InputSequence(codes, ages, t2f)


def label_matrix(persons: Sequence[PersonRecord], n_classes: int) -> np.ndarray:
    y = np.zeros((len(persons), n_classes))
    for i, p in enumerate(persons):
        y[i, list(p.labels)] = 1.0
    return y


def trigger_info(p: PersonRecord, cfg: CohortConfig) -> dict[int, float]:
    """Class -> age of that class's planted trigger, for persons who carry one."""
    out = {}
    for c, (codes, _) in cfg.resolved_triggers().items():
        for code, age in p.events:
            if code in codes:
                out[c] = age
                break
    return out


def shock_age(p: PersonRecord, cfg: CohortConfig) -> int | None:
    shock = set(cfg.shock_codes())
    for code, age in p.events:
        if code in shock:
            return math.floor(age + 1e-9)
    return None


# ----------------------------------------------------------------------------
# JSONL I/O

_FIELDS = ("person_id", "birth_year", "events", "labels")


def save_jsonl(persons: Iterable[PersonRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in persons:
            rec = {
                "person_id": p.person_id,
                "birth_year": p.birth_year,
                "events": [[int(c), float(a)] for c, a in p.events],
                "labels": [int(c) for c in p.labels],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_jsonl(path: str | Path) -> list[PersonRecord]:
    persons = []
    warned: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _FIELDS if k not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            for k in rec:
                if k not in _FIELDS and k not in warned:
                    warned.add(k)
                    warnings.warn(f"{path}:{lineno}: ignoring unknown field {k!r}", stacklevel=2)
            events = rec["events"]
            if not events:
                raise DataError(f"{path}:{lineno}: person {rec['person_id']} has no events")
            try:
                ev = [(int(c), float(a)) for c, a in events]
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: events must be [code, age] pairs") from None
            persons.append(
                PersonRecord(
                    person_id=int(rec["person_id"]),
                    birth_year=float(rec["birth_year"]),
                    events=ev,
                    labels=[int(c) for c in rec["labels"]],
                )
            )
    return persons


def save_split(s: DatasetSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(s.to_dict()) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> DatasetSplit:
    return DatasetSplit.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
