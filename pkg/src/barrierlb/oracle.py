"""Brute-force references and Monte-Carlo estimates of the improvement ratio.

Nothing here reuses the policy module's search code: allocations are
listed with :func:`itertools.product` and scored in one vectorized pass,
so agreement with the policies is meaningful evidence.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import SimConfig, Simulator, run
from .lookahead import Lookahead
from .metrics import step_imbalances
from .workload import (DecodeDistribution, DriftSpec, OverloadedSource,
                       PrefillDistribution, Request)


class EnumerationLimitExceeded(ValueError):
    """The number of feasible allocations is above the caller's limit."""


def _admit_count(n: int, caps) -> int:
    return min(n, int(sum(caps)))


def allocation_count(n: int, caps) -> int:
    """Feasible allocations of ``n`` labelled requests, by summing multinomials."""
    caps = [int(c) for c in caps]
    U = _admit_count(n, caps)
    total = 0
    for ks in itertools.product(*(range(c + 1) for c in caps)):
        if sum(ks) != U:
            continue
        ways = math.factorial(U)
        for k in ks:
            ways //= math.factorial(k)
        total += ways
    return math.comb(n, U) * total


def _vectors(n: int, caps):
    """Worker vectors in lexicographic order; ``G`` marks a request left waiting."""
    G = len(caps)
    U = _admit_count(n, caps)
    for vec in itertools.product(range(G + 1), repeat=n):
        if vec.count(G) != n - U:
            continue
        if all(vec.count(g) <= caps[g] for g in range(G)):
            yield vec


def enumerate_allocations(waiting: Sequence, caps, limit: int = 1_000_000) -> list:
    """Every allocation admitting ``min(#waiting, sum(caps))`` requests, once each.

    Allocations are ``{id: worker}`` dicts, ordered lexicographically by the
    worker vector with "not admitted" sorting after every worker.
    """
    caps = [int(c) for c in caps]
    if any(c < 0 for c in caps):
        raise ValueError("free slots must be >= 0")
    count = allocation_count(len(waiting), caps)
    if count > limit:
        raise EnumerationLimitExceeded(f"{count} allocations exceed the limit {limit}")
    G = len(caps)
    return [{rid: g for rid, g in zip(waiting, vec) if g < G}
            for vec in _vectors(len(waiting), caps)]


@dataclass
class StepState:
    """A hand-built decision point: free slots plus the active requests per worker.

    ``active[g]`` is a sequence of ``(request, progress)`` pairs.
    """

    caps: tuple
    active: tuple

    def __post_init__(self):
        if len(self.caps) != len(self.active):
            raise ValueError("caps and active must cover the same workers")

    @property
    def G(self) -> int:
        return len(self.caps)

    def base_window(self, lookahead: Lookahead, H: int) -> np.ndarray:
        base = np.zeros((H + 1, self.G))
        for g, pairs in enumerate(self.active):
            for req, tau in pairs:
                base[:, g] += lookahead.request_window(req, tau, H)
        return base

    def simulator(self, waiting: Sequence[Request], lookahead: Lookahead,
                  B: Optional[int] = None) -> Simulator:
        """An engine in exactly this state, with ``waiting`` queued in order."""
        B = B or max(len(p) + int(c) for p, c in zip(self.active, self.caps))
        cfg = SimConfig(G=self.G, B=B)
        sim = Simulator(cfg, None, lookahead)
        for g, pairs in enumerate(self.active):
            for req, tau in pairs:
                sim.place(req, g, tau)
        for g, c in enumerate(self.caps):
            spare = int(sim.free_slots[g]) - int(c)
            if spare < 0:
                raise ValueError(f"worker {g} cannot offer {c} free slots with B={B}")
            sim._free[g] -= spare
        for r in waiting:
            sim.add_request(r)
        return sim


def _score(base: np.ndarray, cand: np.ndarray, vecs: np.ndarray):
    """Cost, step-0 max and count of step-0 maximizers for each worker vector."""
    G = base.shape[1]
    # one-hot (A, n, G+1); the extra column absorbs requests left waiting
    onehot = np.eye(G + 1)[vecs][:, :, :G]
    T = base[None] + np.einsum("ang,nh->ahg", onehot, cand)
    J = (G * T.max(axis=2) - T.sum(axis=2)).sum(axis=1)
    m0 = T[:, 0, :].max(axis=1)
    nmax = (T[:, 0, :] == m0[:, None]).sum(axis=1)
    return J, m0, nmax


def brute_force_core(base: np.ndarray, cand: np.ndarray, caps,
                     limit: int = 1_000_000):
    """Global minimum of the window cost over all feasible worker vectors.

    Ties go to the lower step-0 maximum, then fewer workers at that maximum,
    then the lexicographically first vector.  Returns ``(vector, cost)``.
    """
    base = np.asarray(base, dtype=np.float64)
    cand = np.asarray(cand, dtype=np.float64).reshape(-1, base.shape[0])
    caps = [int(c) for c in caps]
    n = len(cand)
    if allocation_count(n, caps) > limit:
        raise EnumerationLimitExceeded("enumeration exceeds the limit")
    listed = list(_vectors(n, caps))
    vecs = np.array(listed, dtype=np.int64).reshape(len(listed), n)
    J, m0, nmax = _score(base, cand, vecs)
    # lexsort keeps enumeration order among full ties, which is lexicographic
    best = int(np.lexsort((nmax, m0, J))[0])
    return [int(g) for g in vecs[best]], float(J[best])


def brute_force_best(waiting: Sequence[Request], state: StepState,
                     lookahead: Lookahead, H: int, limit: int = 1_000_000):
    """Optimal allocation for one step; returns ``({id: worker}, cost)``."""
    base = state.base_window(lookahead, H)
    cand = np.array([lookahead.request_window(r, 0, H) for r in waiting]).reshape(-1, H + 1)
    vec, J = brute_force_core(base, cand, state.caps, limit)
    return {r.id: g for r, g in zip(waiting, vec) if g < state.G}, J


def allocation_cost(waiting: Sequence[Request], state: StepState, lookahead: Lookahead,
                    H: int, alloc: dict) -> float:
    """Window cost of a given allocation."""
    T = state.base_window(lookahead, H)
    for r in waiting:
        if r.id in alloc:
            T[:, alloc[r.id]] += lookahead.request_window(r, 0, H)
    return float((state.G * T.max(axis=1) - T.sum(axis=1)).sum())


# -- improvement-ratio estimates -------------------------------------------------

@dataclass(frozen=True)
class IirSpec:
    """Overloaded instance family and the policy pair compared on it."""

    prefill: PrefillDistribution = field(default_factory=lambda: PrefillDistribution.uniform(65536))
    decode: DecodeDistribution = field(default_factory=lambda: DecodeDistribution.fixed(20))
    drift: DriftSpec = field(default_factory=DriftSpec.unit)
    horizon: int = 0
    window: int = 128
    steps: int = 2000
    warmup: int = 200

    def __post_init__(self):
        if self.steps < 1 or self.warmup < 0:
            raise ValueError("steps must be >= 1 and warmup >= 0")


@dataclass
class IirCell:
    B: int
    G: int
    fcfs_mean: float
    bfio_mean: float
    ratio: float
    stderr: float
    trials: int
    seed: int
    infinite: bool = False
    outside_regime: bool = False


@dataclass
class IirEstimate:
    grid: list
    cells: list

    def cell(self, B: int, G: int) -> IirCell:
        for c in self.cells:
            if (c.B, c.G) == (B, G):
                return c
        raise KeyError((B, G))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["B", "G", "fcfs_mean", "bfio_mean", "ratio", "stderr", "trials"])
        for c in self.cells:
            w.writerow([c.B, c.G, repr(c.fcfs_mean), repr(c.bfio_mean),
                        repr(c.ratio), repr(c.stderr), c.trials])
        return buf.getvalue()


def _trial_seed(seed: int, B: int, G: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, B, G, trial]).generate_state(1)[0])


def _mean_imbalance(cfg: SimConfig, spec: IirSpec, policy, seed: int) -> float:
    src = OverloadedSource(spec.prefill, spec.decode, seed, spec.drift)
    res = run(cfg, src, policy, steps=spec.warmup + spec.steps)
    return float(step_imbalances(res.loads)[spec.warmup:].mean())


def ratio_stderr(fcfs: np.ndarray, bfio: np.ndarray) -> float:
    """Delta-method standard error of ``mean(fcfs) / mean(bfio)``."""
    n = len(fcfs)
    fm, bm = float(np.mean(fcfs)), float(np.mean(bfio))
    if n < 2 or bm == 0:
        return math.nan if bm != 0 else math.inf
    r = fm / bm
    rel_f = np.std(fcfs, ddof=1) / math.sqrt(n) / fm if fm > 0 else 0.0
    rel_b = np.std(bfio, ddof=1) / math.sqrt(n) / bm
    return float(abs(r) * math.sqrt(rel_f ** 2 + rel_b ** 2))


def estimate_iir(grid: Sequence[tuple], spec: IirSpec = IirSpec(), trials: int = 20,
                 seed: int = 0, on_trial=None) -> IirEstimate:
    """FCFS-over-BF-IO imbalance ratio per ``(B, G)`` cell.

    Each trial runs both policies on the same overloaded source seed for
    ``spec.warmup + spec.steps`` steps and averages imbalance after warm-up.
    BF-IO here is the greedy solver at ``spec.horizon``.
    """
    from .policies import BFIOGreedy, FCFS

    if trials < 1:
        raise ValueError("trials must be >= 1")
    cells = []
    for B, G in grid:
        B, G = int(B), int(G)
        cfg = SimConfig(G=G, B=B, seed=seed, horizon=spec.horizon, window=spec.window)
        f = np.empty(trials)
        b = np.empty(trials)
        for t in range(trials):
            s = _trial_seed(seed, B, G, t)
            f[t] = _mean_imbalance(cfg, spec, FCFS(), s)
            b[t] = _mean_imbalance(cfg, spec, BFIOGreedy(spec.horizon, spec.window), s)
            if on_trial is not None:
                on_trial(B, G, t)
        fm, bm = float(f.mean()), float(b.mean())
        if bm == 0:
            ratio = 1.0 if fm == 0 else math.inf
            se = 0.0 if fm == 0 else math.inf
        else:
            ratio = fm / bm
            se = ratio_stderr(f, b) if trials > 1 else 0.0
        cells.append(IirCell(B, G, fm, bm, ratio, se, trials, seed,
                             infinite=math.isinf(ratio),
                             outside_regime=math.sqrt(G) >= B))
    return IirEstimate([(c.B, c.G) for c in cells], cells)
