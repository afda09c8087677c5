"""Requests, workload profiles and arrival instances.

A request is described by its prefill size ``s`` and its number of processing
steps ``o``.  Its per-step cost sequence (the *workload profile*) is
``s, s + d_1, s + d_1 + d_2, ...`` where the increments ``d_t`` come from a
:class:`DriftSpec`.  Unit drift gives the usual LLM decode profile
``(s, s+1, ..., s+o-1)``; zero drift gives constant per-step work.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class WorkloadError(ValueError):
    """Invalid workload argument (bad size, bad drift, bad distribution)."""


class TraceError(ValueError):
    """A trace file could not be parsed or contains invalid values."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class WorkloadProfile:
    """Per-step workload of one request; ``steps[j]`` is the cost of step j+1."""

    steps: tuple

    def __post_init__(self):
        if len(self.steps) < 1:
            raise WorkloadError("a workload profile needs at least one step")
        if any(w < 0 for w in self.steps):
            raise WorkloadError("workload values must be non-negative")

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, j):
        return self.steps[j]

    @property
    def prefill(self):
        return self.steps[0]

    def total(self) -> float:
        return math.fsum(self.steps)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=np.float64)


def _check_size(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise WorkloadError(f"{name} must be a positive integer, got {value!r}")


def llm_profile(s: int, o: int) -> WorkloadProfile:
    """KV-cache growth profile ``(s, s+1, ..., s+o-1)``."""
    _check_size("prefill", s)
    _check_size("decode length", o)
    s, o = int(s), int(o)
    return WorkloadProfile(tuple(range(s, s + o)))


@dataclass(frozen=True)
class DriftSpec:
    """Common per-step workload increments shared by every request.

    ``kind`` is one of ``"unit"`` (all ones), ``"zero"``, ``"constant"``
    (all equal to ``value``) or ``"list"`` (explicit ``increments``; indices
    past the end repeat the last entry).  Increments are indexed by the
    request's own step counter.
    """

    kind: str = "unit"
    value: float = 1.0
    increments: tuple = ()
    delta_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("unit", "zero", "constant", "list"):
            raise WorkloadError(f"unknown drift kind {self.kind!r}")
        if self.kind == "list" and not self.increments:
            raise WorkloadError("list drift needs at least one increment")
        for d in self._declared():
            if not (0 <= d <= self.delta_max):
                raise WorkloadError(
                    f"invalid drift: increment {d} outside [0, {self.delta_max}]")

    def _declared(self) -> Iterable[float]:
        if self.kind == "unit":
            return (1.0,)
        if self.kind == "zero":
            return (0.0,)
        if self.kind == "constant":
            return (self.value,)
        return self.increments

    @classmethod
    def unit(cls) -> "DriftSpec":
        return cls("unit", 1.0, (), 1.0)

    @classmethod
    def zero(cls) -> "DriftSpec":
        return cls("zero", 0.0, (), 0.0)

    @classmethod
    def constant(cls, value: float) -> "DriftSpec":
        return cls("constant", float(value), (), max(float(value), 0.0))

    @classmethod
    def from_list(cls, increments: Sequence[float], delta_max: Optional[float] = None) -> "DriftSpec":
        inc = tuple(float(d) for d in increments)
        if delta_max is None:
            delta_max = max(inc) if inc else 0.0
        return cls("list", 0.0, inc, float(delta_max))

    @property
    def is_unit(self) -> bool:
        return self.kind == "unit" or (self.kind == "constant" and self.value == 1.0)

    def increments_for(self, n: int) -> np.ndarray:
        """First ``n`` increments ``d_1 .. d_n``."""
        if self.kind == "unit":
            return np.ones(n)
        if self.kind == "zero":
            return np.zeros(n)
        if self.kind == "constant":
            return np.full(n, self.value)
        inc = np.asarray(self.increments, dtype=np.float64)
        if n <= len(inc):
            return inc[:n].copy()
        return np.concatenate([inc, np.full(n - len(inc), inc[-1])])


def drift_profile(s: int, o: int, drift: DriftSpec) -> WorkloadProfile:
    """Profile with ``steps[j] = s + sum(d_1 .. d_j)`` (0-based j)."""
    _check_size("prefill", s)
    _check_size("decode length", o)
    if drift.is_unit:
        return llm_profile(s, o)
    if drift.kind == "zero":
        return WorkloadProfile((int(s),) * int(o))
    cum = np.concatenate([[0.0], np.cumsum(drift.increments_for(int(o) - 1))])
    return WorkloadProfile(tuple(float(x) for x in s + cum))


@dataclass
class Request:
    """One request and its lifecycle in a simulation.

    ``arrival_step``, ``worker``, ``start_step``, ``progress`` and the clock
    fields are filled in by the engine.
    """

    id: int
    arrival_time: float
    profile: WorkloadProfile
    arrival_step: Optional[int] = None
    worker: Optional[int] = None
    start_step: Optional[int] = None
    progress: int = 0
    start_clock: Optional[float] = None
    finish_time: Optional[float] = None

    @property
    def prefill(self):
        return self.profile.steps[0]

    @property
    def length(self) -> int:
        return len(self.profile)

    @property
    def done(self) -> bool:
        return self.progress >= len(self.profile)


# -- distributions -----------------------------------------------------------

@dataclass(frozen=True)
class PrefillDistribution:
    """Prefill sizes: ``uniform`` on ``{1..s_max}``, ``fixed`` or ``empirical``."""

    kind: str = "uniform"
    s_max: int = 64
    value: int = 1
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "fixed", "empirical"):
            raise WorkloadError(f"unknown prefill distribution {self.kind!r}")
        if self.kind == "fixed":
            _check_size("prefill", self.value)
            object.__setattr__(self, "s_max", int(self.value))
        elif self.kind == "empirical":
            if not self.values:
                raise WorkloadError("empirical prefill distribution is empty")
            for v in self.values:
                _check_size("prefill", v)
            object.__setattr__(self, "s_max", int(max(self.values)))
        else:
            _check_size("s_max", self.s_max)

    @classmethod
    def uniform(cls, s_max: int) -> "PrefillDistribution":
        return cls("uniform", s_max=s_max)

    @classmethod
    def fixed(cls, value: int) -> "PrefillDistribution":
        return cls("fixed", value=value)

    @classmethod
    def empirical(cls, values: Sequence[int]) -> "PrefillDistribution":
        return cls("empirical", values=tuple(int(v) for v in values))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.integers(1, self.s_max + 1, size=n)
        if self.kind == "fixed":
            return np.full(n, self.value, dtype=np.int64)
        return rng.choice(np.asarray(self.values, dtype=np.int64), size=n)

    def mean_std(self) -> tuple:
        if self.kind == "uniform":
            m = self.s_max
            return (m + 1) / 2.0, math.sqrt((m * m - 1) / 12.0)
        if self.kind == "fixed":
            return float(self.value), 0.0
        v = np.asarray(self.values, dtype=np.float64)
        return float(v.mean()), float(v.std())

    def support_size(self) -> int:
        if self.kind == "uniform":
            return self.s_max
        if self.kind == "fixed":
            return 1
        return len(set(self.values))

    def validity(self) -> dict:
        """Report ``sigma_s / s_max``; the non-degeneracy window is ``(0, 1/2]``."""
        mu, sigma = self.mean_std()
        ratio = sigma / self.s_max
        return {"mu_s": mu, "sigma_s": sigma, "s_max": self.s_max,
                "ratio": ratio, "within_bounds": 0.0 < ratio <= 0.5 + 1e-12}


@dataclass(frozen=True)
class DecodeDistribution:
    """Decode lengths: ``geometric`` with success probability ``p``, ``fixed`` or ``empirical``."""

    kind: str = "geometric"
    p: float = 0.02
    value: int = 1
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("geometric", "fixed", "empirical"):
            raise WorkloadError(f"unknown decode distribution {self.kind!r}")
        if self.kind == "geometric" and not (0.0 < self.p < 1.0):
            raise WorkloadError(f"geometric p must lie in (0, 1), got {self.p}")
        if self.kind == "fixed":
            _check_size("decode length", self.value)
        if self.kind == "empirical":
            if not self.values:
                raise WorkloadError("empirical decode distribution is empty")
            for v in self.values:
                _check_size("decode length", v)

    @classmethod
    def geometric(cls, p: float) -> "DecodeDistribution":
        return cls("geometric", p=p)

    @classmethod
    def fixed(cls, value: int) -> "DecodeDistribution":
        return cls("fixed", value=value)

    @classmethod
    def empirical(cls, values: Sequence[int]) -> "DecodeDistribution":
        return cls("empirical", values=tuple(int(v) for v in values))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "geometric":
            return rng.geometric(self.p, size=n)
        if self.kind == "fixed":
            return np.full(n, self.value, dtype=np.int64)
        return rng.choice(np.asarray(self.values, dtype=np.int64), size=n)


@dataclass(frozen=True)
class ArrivalInstance:
    """Requests as ``(arrival_time, prefill, decode)`` rows, sorted by arrival."""

    rows: tuple
    drift: DriftSpec = field(default_factory=DriftSpec.unit)
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        times = [r[0] for r in self.rows]
        if any(b < a for a, b in zip(times, times[1:])):
            raise WorkloadError("arrival times must be non-decreasing")

    def __len__(self) -> int:
        return len(self.rows)

    def profiles(self) -> list:
        return [drift_profile(s, o, self.drift) for _, s, o in self.rows]

    def requests(self) -> list:
        return [Request(i, float(t), drift_profile(s, o, self.drift))
                for i, (t, s, o) in enumerate(self.rows)]

    def total_workload(self) -> float:
        return math.fsum(p.total() for p in self.profiles())


def sample_instance(prefill: PrefillDistribution, decode: DecodeDistribution,
                    rate: float, duration: float, seed: int,
                    drift: Optional[DriftSpec] = None) -> ArrivalInstance:
    """Poisson arrivals at ``rate`` per second on ``[0, duration]``."""
    if not rate > 0:
        raise WorkloadError(f"rate must be positive, got {rate}")
    if not duration > 0:
        raise WorkloadError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(seed)
    n = int(rng.poisson(rate * duration))
    times = np.sort(rng.uniform(0.0, duration, size=n))
    s = prefill.sample(rng, n)
    o = decode.sample(rng, n)
    rows = tuple((float(t), int(a), int(b)) for t, a, b in zip(times, s, o))
    return ArrivalInstance(rows, drift or DriftSpec.unit(),
                           {"seed": seed, "source": "poisson", "rate": rate,
                            "duration": duration})


def load_trace(path, drift: Optional[DriftSpec] = None) -> ArrivalInstance:
    """Read an ``arrival_time,prefill,decode`` CSV trace.

    ``#`` lines are comments.  Rows are sorted by arrival time (stable); the
    original row order is kept in ``metadata["original_order"]``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trace file not found: {path}")
    parsed = []
    header_seen = False
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            cells = [c.strip() for c in next(csv.reader([text]))]
            if not header_seen:
                if cells != ["arrival_time", "prefill", "decode"]:
                    raise TraceError(
                        "expected header 'arrival_time,prefill,decode'", lineno)
                header_seen = True
                continue
            if len(cells) != 3:
                raise TraceError(f"expected 3 fields, got {len(cells)}", lineno)
            try:
                t = float(cells[0])
                s, o = int(cells[1]), int(cells[2])
            except ValueError as exc:
                raise TraceError(f"malformed row {text!r}: {exc}", lineno) from None
            if not math.isfinite(t) or t < 0 or s < 1 or o < 1:
                raise TraceError(f"invalid trace values in row {text!r}", lineno)
            parsed.append((t, s, o))
    if not header_seen:
        raise TraceError("missing header 'arrival_time,prefill,decode'")
    order = sorted(range(len(parsed)), key=lambda i: parsed[i][0])
    rows = tuple(parsed[i] for i in order)
    return ArrivalInstance(rows, drift or DriftSpec.unit(),
                           {"source": str(path), "original_order": tuple(order)})


def is_overloaded_at(pool: Iterable, free_slots: int, s_max: int) -> bool:
    """Overload test for one step.

    ``pool`` holds ``(s, o)`` pairs (or bare prefill sizes).  True iff removing
    any single prefill class ``{1..s_max}`` still leaves ``free_slots``
    requests.
    """
    if s_max < 1:
        raise WorkloadError("s_max must be >= 1")
    counts = Counter(p[0] if isinstance(p, (tuple, list)) else p for p in pool)
    n = sum(counts.values())
    largest = max((counts.get(l, 0) for l in range(1, s_max + 1)), default=0)
    return n - largest >= free_slots


class OverloadedSource:
    """Endless request supply that keeps the waiting pool overloaded.

    Before each assignment the engine calls :meth:`top_up`; fresh i.i.d.
    samples are appended until, after removing the most numerous prefill
    class, the pool still covers every free slot.
    """

    def __init__(self, prefill: PrefillDistribution, decode: DecodeDistribution,
                 seed: int, drift: Optional[DriftSpec] = None, batch: int = 64):
        if prefill.support_size() < 2:
            raise WorkloadError(
                "an overloaded pool needs at least two prefill classes")
        self.prefill = prefill
        self.decode = decode
        self.drift = drift or DriftSpec.unit()
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self._batch = batch
        self._buf: list = []

    def _draw(self) -> tuple:
        if not self._buf:
            s = self.prefill.sample(self.rng, self._batch)
            o = self.decode.sample(self.rng, self._batch)
            self._buf = list(zip(s.tolist(), o.tolist()))[::-1]
        return self._buf.pop()

    def top_up(self, class_counts: Counter, pool_size: int, free_slots: int) -> list:
        """Return new ``(s, o)`` pairs; ``class_counts`` is updated in place."""
        new = []
        largest = max(class_counts.values(), default=0)
        while pool_size - largest < free_slots:
            s, o = self._draw()
            new.append((s, o))
            class_counts[s] += 1
            pool_size += 1
            largest = max(largest, class_counts[s])
        return new
