"""Per-step assignment policies: FCFS, JSQ and Balance-Future (exact and greedy).

An allocation is a ``{request_id: worker}`` dict over a subset of the
waiting queue.  It must respect per-worker free slots and admit exactly
``U = min(#waiting, sum(free slots))`` requests.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .engine import SimConfig, StepView

POLICY_NAMES = ("fcfs", "jsq", "bfio-exact", "bfio-greedy")


class SearchLimitExceeded(RuntimeError):
    """Exact enumeration would exceed the configured search limit."""


def check_allocation(alloc: dict, waiting_ids: Sequence, caps) -> None:
    caps = np.asarray(caps)
    ids = set(waiting_ids)
    per = np.zeros(len(caps), dtype=np.int64)
    for rid, g in alloc.items():
        if rid not in ids:
            raise ValueError(f"request {rid!r} is not in the waiting queue")
        if not 0 <= g < len(caps):
            raise ValueError(f"worker {g!r} out of range")
        per[g] += 1
    if np.any(per > caps):
        raise ValueError("allocation exceeds free slots")
    U = min(len(ids), int(caps.sum()))
    if len(alloc) != U:
        raise ValueError(f"allocation admits {len(alloc)} requests, expected {U}")


# -- size-agnostic baselines ---------------------------------------------------

def fcfs_assign(waiting: Sequence, caps) -> dict:
    """Oldest request first, each to the worker with the most free slots (lowest index on ties)."""
    cap = [int(c) for c in caps]
    out = {}
    if not waiting or sum(cap) == 0:
        return out
    for rid in waiting:
        g = max(range(len(cap)), key=lambda j: (cap[j], -j))
        if cap[g] == 0:
            break
        out[rid] = g
        cap[g] -= 1
    return out


def jsq_assign(waiting: Sequence, active_counts, caps) -> dict:
    """Oldest request first, each to the free worker with the fewest active requests."""
    cnt = [int(c) for c in active_counts]
    cap = [int(c) for c in caps]
    out = {}
    for rid in waiting:
        free = [g for g in range(len(cap)) if cap[g] > 0]
        if not free:
            break
        g = min(free, key=lambda j: (cnt[j], j))
        out[rid] = g
        cnt[g] += 1
        cap[g] -= 1
    return out


# -- Balance-Future ------------------------------------------------------------

def horizon_cost(load_vectors) -> float:
    """Accumulated imbalance ``sum_h (G * max - sum)`` over a window of load vectors."""
    T = np.atleast_2d(np.asarray(load_vectors, dtype=np.float64))
    if T.size == 0:
        return 0.0
    return float((T.shape[1] * T.max(axis=1) - T.sum(axis=1)).sum())


def predict_loads(view: StepView, allocation: dict, H: int) -> np.ndarray:
    """Predicted per-worker loads for ``h = 0..H`` after admitting ``allocation``; shape (H+1, G)."""
    T = view.active_window(H).copy()
    if allocation:
        by_id = {r.id: r for r in view.waiting}
        reqs = [by_id[rid] for rid in allocation]
        W = view.candidate_windows(reqs, H)
        for w, g in zip(W, allocation.values()):
            T[:, g] += w
    return T


def count_allocations(n: int, caps) -> int:
    """Number of feasible allocations of ``n`` waiting requests into ``caps``."""
    caps = [int(c) for c in caps]
    U = min(n, sum(caps))
    # ways[t]: ordered ways to place t labelled requests on the workers seen so far
    ways = [1] + [0] * U
    for c in caps:
        new = [0] * (U + 1)
        for t in range(U + 1):
            if ways[t]:
                for j in range(0, min(c, U - t) + 1):
                    new[t + j] += ways[t] * math.comb(t + j, j)
        ways = new
    return math.comb(n, U) * ways[U]


def exact_core(base: np.ndarray, cand: np.ndarray, caps, search_limit: int = 200_000):
    """Exhaustive solve of one step.

    ``base`` is the (H+1, G) window of active loads, ``cand`` the (n, H+1)
    windows of waiting requests.  Returns ``(vector, cost)`` where
    ``vector[i]`` is the worker of request i or ``G`` when not admitted.
    Ties on cost go to the lower current-step maximum, then fewer workers
    at that maximum, then the lexicographically smallest vector.
    """
    caps = [int(c) for c in caps]
    G = len(caps)
    n = len(cand)
    U = min(n, sum(caps))
    total = count_allocations(n, caps)
    if total > search_limit:
        raise SearchLimitExceeded(
            f"{total} feasible allocations exceed the limit {search_limit}; "
            "use the greedy Balance-Future policy")
    cols = [list(map(float, base[:, g])) for g in range(G)]
    rows = [list(map(float, w)) for w in cand]
    Hp = len(cols[0]) if G else 0
    best_key = None
    best_vec = None
    vec = [G] * n
    skips_allowed = n - U

    def leaf():
        nonlocal best_key, best_vec
        J = 0.0
        for h in range(Hp):
            m = -math.inf
            s = 0.0
            for g in range(G):
                v = cols[g][h]
                s += v
                if v > m:
                    m = v
            J += G * m - s
        m0 = max(cols[g][0] for g in range(G))
        key = (J, m0, sum(1 for g in range(G) if cols[g][0] == m0))
        if best_key is None or key < best_key:
            best_key = key
            best_vec = list(vec)

    def dfs(i: int, skips: int):
        if i == n:
            leaf()
            return
        w = rows[i]
        for g in range(G):
            if caps[g] > 0:
                caps[g] -= 1
                col = cols[g]
                for h in range(Hp):
                    col[h] += w[h]
                vec[i] = g
                dfs(i + 1, skips)
                for h in range(Hp):
                    col[h] -= w[h]
                caps[g] += 1
        if skips < skips_allowed:
            vec[i] = G
            dfs(i + 1, skips + 1)
        vec[i] = G

    dfs(0, 0)
    return best_vec, best_key[0]


def bfio_assign_exact(view: StepView, H: int, search_limit: int = 200_000) -> dict:
    waiting = view.waiting
    if not waiting or view.caps.sum() == 0:
        return {}
    cand = view.candidate_windows(waiting, H)
    vec, _ = exact_core(view.active_window(H), cand, view.caps, search_limit)
    return {r.id: g for r, g in zip(waiting, vec) if g < view.G}


def _other_max(T: np.ndarray):
    """Per-row max over all columns but one: returns (top1, argtop1, top2)."""
    G = T.shape[1]
    arg = T.argmax(axis=1)
    top1 = T[np.arange(T.shape[0]), arg]
    if G == 1:
        return top1, arg, np.full_like(top1, -np.inf)
    masked = T.copy()
    masked[np.arange(T.shape[0]), arg] = -np.inf
    return top1, arg, masked.max(axis=1)


def greedy_core(base: np.ndarray, cand: np.ndarray, caps, U: int,
                max_swaps: int = 64) -> tuple:
    """Greedy surrogate for the exact solve.

    The first ``U`` candidates (the oldest) are placed in order of decreasing
    first-step workload, each on the free worker whose placement gives the
    smallest window cost; equal costs go to the worker with the least
    predicted window load, then the lowest index.  At ``H = 0`` this is the
    LPT rule.  Remaining candidates may then be swapped in for an
    admitted one whenever that strictly lowers the cost (best swap first, at
    most ``max_swaps`` swaps).  Returns ``(workers, cost)`` where
    ``workers[i]`` is the worker of candidate i or -1.
    """
    T = np.array(base, dtype=np.float64)
    G = T.shape[1]
    cap = np.array(caps, dtype=np.int64)
    n = len(cand)
    workers = np.full(n, -1, dtype=np.int64)
    if U == 0:
        return workers, horizon_cost(T)
    order = sorted(range(U), key=lambda i: (-cand[i, 0], i))
    for i in order:
        free = np.flatnonzero(cap > 0)
        w = cand[i]
        top1, arg, top2 = _other_max(T)
        other = np.where(arg[None, :] == free[:, None], top2[None, :], top1[None, :])
        newcol = T[:, free].T + w[None, :]
        cost = (G * np.maximum(other, newcol)).sum(axis=1) - w.sum()
        # ties: least predicted window load, then lowest index
        pick = np.lexsort((free, T[:, free].sum(axis=0), cost))[0]
        g = int(free[pick])
        T[:, g] += w
        cap[g] -= 1
        workers[i] = g
    J = horizon_cost(T)
    if n > U:
        J = _swap_improve(T, cand, workers, J, max_swaps)
    return workers, J


def _swap_improve(T, cand, workers, J, max_swaps):
    G = T.shape[1]
    for _ in range(max_swaps):
        adm = np.flatnonzero(workers >= 0)
        out = np.flatnonzero(workers < 0)
        if adm.size == 0 or out.size == 0:
            break
        top1, arg, top2 = _other_max(T)
        ga = workers[adm]
        other = np.where(arg[None, :] == ga[:, None], top2[None, :], top1[None, :])
        col = T[:, ga].T - cand[adm]                      # (A, H+1)
        new = col[:, None, :] + cand[out][None, :, :]      # (A, R, H+1)
        S = T.sum(axis=1)
        cost = (G * np.maximum(other[:, None, :], new)).sum(axis=2) \
            - (S[None, None, :] - cand[adm][:, None, :] + cand[out][None, :, :]).sum(axis=2)
        flat = int(np.argmin(cost))
        a, b = divmod(flat, out.size)
        if not cost[a, b] < J - 1e-9 * max(1.0, abs(J)):
            break
        g = ga[a]
        T[:, g] += cand[out[b]] - cand[adm[a]]
        workers[out[b]] = g
        workers[adm[a]] = -1
        J = horizon_cost(T)
    return J


def bfio_assign_greedy(view: StepView, H: int, window: int = 128,
                       max_swaps: int = 64) -> dict:
    caps = view.caps
    U = min(view.n_waiting, int(caps.sum()))
    if U == 0:
        return {}
    pool = view.head(U + window)
    cand = view.candidate_windows(pool, H)
    workers, _ = greedy_core(view.active_window(H), cand, caps, U, max_swaps)
    return {r.id: int(g) for r, g in zip(pool, workers) if g >= 0}


# -- policy objects used by the engine -----------------------------------------

class FCFS:
    name = "fcfs"

    def assign(self, view: StepView) -> dict:
        U = min(view.n_waiting, int(view.caps.sum()))
        return fcfs_assign([r.id for r in view.head(U)], view.caps)


class JSQ:
    name = "jsq"

    def assign(self, view: StepView) -> dict:
        U = min(view.n_waiting, int(view.caps.sum()))
        return jsq_assign([r.id for r in view.head(U)], view.active_counts, view.caps)


class BFIOExact:
    name = "bfio-exact"

    def __init__(self, horizon: int = 0, search_limit: int = 200_000):
        self.horizon = horizon
        self.search_limit = search_limit

    def assign(self, view: StepView) -> dict:
        return bfio_assign_exact(view, self.horizon, self.search_limit)


class BFIOGreedy:
    name = "bfio-greedy"

    def __init__(self, horizon: int = 0, window: int = 128, max_swaps: int = 64):
        self.horizon = horizon
        self.window = window
        self.max_swaps = max_swaps

    def assign(self, view: StepView) -> dict:
        return bfio_assign_greedy(view, self.horizon, self.window, self.max_swaps)


def make_policy(config: SimConfig, name: Optional[str] = None):
    name = name or config.policy
    if name == "fcfs":
        return FCFS()
    if name == "jsq":
        return JSQ()
    if name == "bfio-exact":
        return BFIOExact(config.horizon, config.search_limit)
    if name == "bfio-greedy":
        return BFIOGreedy(config.horizon, config.window)
    raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
