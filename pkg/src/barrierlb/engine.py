"""Step-indexed simulator for barrier-synchronized, sticky-assignment decode.

Each step runs six phases in a fixed order:

1. reveal: undiscovered requests with ``arrival_time <= clock`` join the
   waiting queue (an :class:`~barrierlb.workload.OverloadedSource` tops the
   pool up instead);
2. assign: the policy maps some waiting requests to workers with free slots;
3. admit: assigned requests start on their worker at this step;
4. load: ``L_g`` is the sum of the next-step workload of every active request;
5. time: ``dt = C + t_ell * max_g L_g`` and the clock advances;
6. progress: every active request completes one step; finished requests
   record the new clock and free their slot for the next step.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .lookahead import Lookahead
from .metrics import PowerModel
from .workload import ArrivalInstance, OverloadedSource, Request, drift_profile

# regression-fitted step model constants (seconds, seconds/token)
DEFAULT_C = 9.775e-3
DEFAULT_T_ELL = 1.005e-7


class PolicyContractError(RuntimeError):
    """A policy returned an allocation that violates capacity or disjointness."""


class ConsistencyError(RuntimeError):
    """Internal simulator state is inconsistent."""


@dataclass(frozen=True)
class SimConfig:
    G: int = 8
    B: int = 16
    C: float = DEFAULT_C
    t_ell: float = DEFAULT_T_ELL
    horizon: int = 0
    policy: str = "fcfs"
    max_steps: int = 10_000_000
    seed: int = 0
    power: PowerModel = field(default_factory=PowerModel)
    lookahead: str = "perfect"
    noise_sigma: float = 0.0
    lookahead_depth: Optional[int] = None
    window: int = 128
    search_limit: int = 200_000

    def __post_init__(self):
        if self.G < 1 or self.B < 1:
            raise ValueError("G and B must be >= 1")
        if self.C < 0:
            raise ValueError("C must be >= 0")
        if not self.t_ell > 0:
            raise ValueError("t_ell must be > 0")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def echo(self) -> dict:
        d = asdict(self)
        d["power"] = asdict(self.power)
        return d

    def make_lookahead(self) -> Lookahead:
        return Lookahead(self.lookahead, self.noise_sigma, self.lookahead_depth, self.seed)


def step_duration(max_load: float, config: SimConfig) -> float:
    """Wall-clock length of a step gated by the most loaded worker."""
    if max_load < 0:
        raise ValueError("max_load must be >= 0")
    return config.C + config.t_ell * max_load


def worker_load(active, profiles: dict) -> float:
    """Load of one worker; ``active`` holds ``(request_id, progress)`` pairs."""
    total = 0.0
    for rid, tau in active:
        try:
            prof = profiles[rid]
        except KeyError:
            raise ConsistencyError(f"unknown request id {rid!r}") from None
        if not 0 <= tau < len(prof):
            raise ConsistencyError(f"request {rid!r} has progress {tau} outside its profile")
        total += prof[tau]
    return total


@dataclass(frozen=True)
class StepRecord:
    k: int
    loads: tuple
    max_load: float
    dt: float
    active_count: int
    admitted: tuple
    completed: tuple
    clock_start: float


class StepView:
    """What a policy sees at one step (read-only by convention)."""

    def __init__(self, sim: "Simulator", caps: np.ndarray):
        self._sim = sim
        self.k = sim.k
        self.G = sim.config.G
        self.B = sim.config.B
        self.caps = caps
        self.active_counts = sim.config.B - caps
        self.lookahead = sim.lookahead
        self._loads = None
        self._windows = {}

    @property
    def n_waiting(self) -> int:
        return len(self._sim.waiting)

    @property
    def waiting(self) -> list:
        return list(self._sim.waiting.values())

    def head(self, n: int) -> list:
        """The ``n`` oldest waiting requests."""
        out = []
        if n <= 0:
            return out
        for r in self._sim.waiting.values():
            out.append(r)
            if len(out) == n:
                break
        return out

    @property
    def loads(self) -> np.ndarray:
        """Current pre-admission loads of the active requests."""
        if self._loads is None:
            self._loads = self._sim.current_loads()
        return self._loads

    def active_window(self, H: int) -> np.ndarray:
        """Predicted per-worker loads of already-active requests, shape (H+1, G)."""
        if H not in self._windows:
            self._windows[H] = self._sim.active_window(H)
        return self._windows[H]

    def candidate_windows(self, requests, H: int) -> np.ndarray:
        """Predicted workloads of not-yet-admitted requests, shape (n, H+1)."""
        return self._sim.candidate_windows(requests, H)


@dataclass
class SimResult:
    config: SimConfig
    loads: np.ndarray
    dts: np.ndarray
    clock_starts: np.ndarray
    active_counts: np.ndarray
    admitted: list
    completed: list
    requests: list
    completed_all: bool
    source: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return int(self.loads.shape[0])

    @property
    def steps(self) -> list:
        return [self.step(k) for k in range(self.n_steps)]

    def step(self, k: int) -> StepRecord:
        loads = self.loads[k]
        return StepRecord(k, tuple(float(x) for x in loads), float(loads.max()),
                          float(self.dts[k]), int(self.active_counts[k]),
                          tuple(self.admitted[k]), tuple(self.completed[k]),
                          float(self.clock_starts[k]))

    def timings(self) -> list:
        """``(start_clock, finish_clock, o)`` for every admitted request."""
        return [(r.start_clock, r.finish_time, len(r.profile))
                for r in self.requests if r.start_clock is not None]

    def total_workload(self) -> float:
        return float(math.fsum(self.loads.sum(axis=1)))

    def steps_csv(self) -> str:
        """Per-step dump ``k,clock_start,dt,max_load,active_count,load_0..``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        G = self.config.G
        w.writerow(["k", "clock_start", "dt", "max_load", "active_count"]
                   + [f"load_{g}" for g in range(G)])
        for k in range(self.n_steps):
            loads = self.loads[k]
            w.writerow([k, repr(float(self.clock_starts[k])), repr(float(self.dts[k])),
                        _num(loads.max()), int(self.active_counts[k])]
                       + [_num(x) for x in loads])
        return buf.getvalue()


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


class _ProfileBuffer:
    """Growable flat store of workload profiles; index 0 is a zero sentinel."""

    def __init__(self, capacity: int = 1 << 14):
        self.data = np.zeros(capacity)
        self.size = 1

    def add(self, steps: np.ndarray) -> int:
        n = len(steps)
        if self.size + n > len(self.data):
            cap = len(self.data)
            while self.size + n > cap:
                cap *= 2
            grown = np.zeros(cap)
            grown[: self.size] = self.data[: self.size]
            self.data = grown
        off = self.size
        self.data[off: off + n] = steps
        self.size += n
        return off


class Simulator:
    """Mutable simulation state; advance it one step at a time with :meth:`advance`."""

    def __init__(self, config: SimConfig,
                 source: Union[ArrivalInstance, OverloadedSource, None] = None,
                 lookahead: Optional[Lookahead] = None):
        self.config = config
        self.lookahead = lookahead or config.make_lookahead()
        G, B = config.G, config.B
        self.k = 0
        self.clock = 0.0
        self.requests: list = []
        self.waiting: dict = {}
        self._by_id: dict = {}
        self._buf = _ProfileBuffer()
        self._offsets: dict = {}
        self.slot_req = np.full((G, B), -1, dtype=np.int64)
        self.slot_off = np.zeros((G, B), dtype=np.int64)
        self.slot_len = np.zeros((G, B), dtype=np.int64)
        self.slot_plen = np.zeros((G, B), dtype=np.int64)
        self.slot_tau = np.zeros((G, B), dtype=np.int64)
        self._free = np.full(G, B, dtype=np.int64)
        self.overloaded: Optional[OverloadedSource] = None
        self._pending: list = []
        self._next = 0
        self._classes = Counter()
        self._n_done = 0
        if isinstance(source, OverloadedSource):
            self.overloaded = source
        elif source is not None:
            self._pending = source.requests()
            for r in self._pending:
                self._register(r)

    # -- bookkeeping -------------------------------------------------------
    def _register(self, r: Request) -> None:
        self.requests.append(r)
        self._by_id[r.id] = r

    def add_request(self, r: Request) -> None:
        """Put ``r`` straight into the waiting queue (used by tests and refills)."""
        if r.id in self._by_id:
            raise ConsistencyError(f"duplicate request id {r.id!r}")
        self._register(r)
        self._enqueue(r)

    def _enqueue(self, r: Request) -> None:
        r.arrival_step = self.k
        self.waiting[r.id] = r
        if self.overloaded is not None:
            self._classes[r.prefill] += 1

    @property
    def free_slots(self) -> np.ndarray:
        return self._free.copy()

    @property
    def idle(self) -> bool:
        return not self.waiting and bool(np.all(self._free == self.config.B))

    @property
    def finished(self) -> bool:
        return (self.overloaded is None and self._next >= len(self._pending)
                and self.idle)

    def current_loads(self) -> np.ndarray:
        return self._buf.data[self.slot_off + self.slot_tau].sum(axis=1)

    def active_window(self, H: int) -> np.ndarray:
        w = self.lookahead.slot_windows(self._buf.data, self.slot_off, self.slot_tau,
                                        self.slot_len, self.slot_plen, H)
        return w.sum(axis=1).T.copy()

    def candidate_windows(self, requests, H: int) -> np.ndarray:
        if not requests:
            return np.zeros((0, H + 1))
        off = np.array([self._offset(r) for r in requests], dtype=np.int64)
        length = np.array([len(r.profile) for r in requests], dtype=np.int64)
        plen = np.array([self.lookahead.predicted_length(r) for r in requests], dtype=np.int64)
        return self.lookahead.slot_windows(self._buf.data, off, np.zeros_like(off),
                                           length, plen, H)

    def _offset(self, r: Request) -> int:
        off = self._offsets.get(r.id)
        if off is None:
            off = self._buf.add(r.profile.as_array())
            self._offsets[r.id] = off
        return off

    # -- one step ----------------------------------------------------------
    def _reveal(self) -> None:
        pend = self._pending
        while self._next < len(pend) and pend[self._next].arrival_time <= self.clock:
            self._enqueue(pend[self._next])
            self._next += 1
        if self.overloaded is not None:
            need = int(self._free.sum())
            src = self.overloaded
            for s, o in src.top_up(Counter(self._classes), len(self.waiting), need):
                r = Request(len(self.requests), self.clock, drift_profile(s, o, src.drift))
                self._register(r)
                self._enqueue(r)

    def _check(self, alloc: dict, caps: np.ndarray) -> None:
        per = np.zeros(self.config.G, dtype=np.int64)
        for rid, g in alloc.items():
            if rid not in self.waiting:
                raise PolicyContractError(f"request {rid!r} is not waiting")
            if not (isinstance(g, (int, np.integer)) and 0 <= g < self.config.G):
                raise PolicyContractError(f"invalid worker {g!r} for request {rid!r}")
            per[g] += 1
        if np.any(per > caps):
            raise PolicyContractError(f"allocation exceeds free slots: {per.tolist()} > {caps.tolist()}")
        U = min(len(self.waiting), int(caps.sum()))
        if len(alloc) != U:
            raise PolicyContractError(f"allocation admits {len(alloc)} requests, expected {U}")

    def advance(self, policy) -> dict:
        """Execute one step; returns the raw step fields."""
        cfg = self.config
        k = self.k
        clock_start = self.clock
        self._reveal()
        caps = self._free.copy()
        admitted = ()
        if self.waiting and caps.sum() > 0:
            alloc = policy.assign(StepView(self, caps))
            self._check(alloc, caps)
            admitted = tuple(alloc)
            for rid, g in alloc.items():
                self._admit(self.waiting.pop(rid), int(g), clock_start)
        loads = self.current_loads()
        max_load = float(loads.max())
        dt = step_duration(max_load, cfg)
        self.clock = clock_start + dt
        active = self.slot_req >= 0
        n_active = int(active.sum())
        self.slot_tau[active] += 1
        done = active & (self.slot_tau >= self.slot_len)
        completed = ()
        if done.any():
            gs, bs = np.nonzero(done)
            completed = tuple(int(x) for x in self.slot_req[gs, bs])
            for rid in completed:
                r = self._by_id[rid]
                r.finish_time = self.clock
                r.progress = len(r.profile)
            self.slot_req[gs, bs] = -1
            self.slot_off[gs, bs] = 0
            self.slot_len[gs, bs] = 0
            self.slot_plen[gs, bs] = 0
            self.slot_tau[gs, bs] = 0
            np.add.at(self._free, gs, 1)
            self._n_done += len(completed)
        self.k += 1
        return {"k": k, "loads": loads, "dt": dt, "active_count": n_active,
                "admitted": admitted, "completed": completed, "clock_start": clock_start}

    def place(self, r: Request, g: int, progress: int = 0) -> None:
        """Seat ``r`` on worker ``g`` as if it had already run ``progress`` steps."""
        if r.id in self._by_id:
            raise ConsistencyError(f"duplicate request id {r.id!r}")
        if not 0 <= progress < len(r.profile):
            raise ValueError("progress must lie inside the profile")
        if self._free[g] == 0:
            raise ValueError(f"worker {g} has no free slot")
        self._register(r)
        self._admit(r, g, self.clock)
        row = np.flatnonzero(self.slot_req[g] == r.id)[0]
        self.slot_tau[g, row] = progress
        r.progress = progress

    def _admit(self, r: Request, g: int, clock: float) -> None:
        row = self.slot_req[g]
        b = int(np.flatnonzero(row < 0)[0])
        row[b] = r.id
        self.slot_off[g, b] = self._offset(r)
        self.slot_len[g, b] = len(r.profile)
        self.slot_plen[g, b] = self.lookahead.predicted_length(r)
        self.slot_tau[g, b] = 0
        self._free[g] -= 1
        r.worker = g
        r.start_step = self.k
        r.start_clock = clock
        if self.overloaded is not None:
            self._classes[r.prefill] -= 1
            if not self._classes[r.prefill]:
                del self._classes[r.prefill]

    def skip_idle_gap(self) -> bool:
        """With ``C == 0`` an idle step takes no time; jump to the next arrival."""
        if self.config.C > 0 or not self.idle or self._next >= len(self._pending):
            return False
        t = self._pending[self._next].arrival_time
        if t > self.clock:
            self.clock = t
            return True
        return False


def advance(sim: Simulator, policy) -> StepRecord:
    """Run one step of ``sim`` and return its record."""
    f = sim.advance(policy)
    loads = f["loads"]
    return StepRecord(f["k"], tuple(float(x) for x in loads), float(loads.max()),
                      f["dt"], f["active_count"], f["admitted"], f["completed"],
                      f["clock_start"])


def run(config: SimConfig, source, policy=None, steps: Optional[int] = None,
        lookahead: Optional[Lookahead] = None,
        on_step: Optional[Callable] = None) -> SimResult:
    """Simulate until every request completes or the step cap is hit.

    ``source`` is an :class:`ArrivalInstance` or an :class:`OverloadedSource`
    (which never runs dry, so the run always stops at the cap).  ``steps``
    overrides ``config.max_steps``.
    """
    if policy is None:
        from .policies import make_policy
        policy = make_policy(config)
    sim = Simulator(config, source, lookahead)
    cap = config.max_steps if steps is None else steps
    G = config.G
    loads = np.zeros((min(cap, 1 << 12), G))
    dts, clocks, counts, admitted, completed = [], [], [], [], []
    n = 0
    while n < cap and not sim.finished:
        if sim.skip_idle_gap():
            continue
        f = sim.advance(policy)
        if n == len(loads):
            loads = np.concatenate([loads, np.zeros_like(loads)])
        loads[n] = f["loads"]
        dts.append(f["dt"])
        clocks.append(f["clock_start"])
        counts.append(f["active_count"])
        admitted.append(f["admitted"])
        completed.append(f["completed"])
        n += 1
        if on_step is not None:
            on_step(sim, f)
    meta = dict(getattr(source, "metadata", {}) or {})
    if isinstance(source, OverloadedSource):
        meta = {"source": "overloaded", "seed": source.seed}
    return SimResult(
        config=config,
        loads=loads[:n].copy(),
        dts=np.asarray(dts, dtype=np.float64),
        clock_starts=np.asarray(clocks, dtype=np.float64),
        active_counts=np.asarray(counts, dtype=np.int64),
        admitted=admitted,
        completed=completed,
        requests=sim.requests,
        completed_all=sim.finished,
        source=meta,
    )
