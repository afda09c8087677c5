import math

import numpy as np
import pytest

from barrierlb.engine import SimConfig, StepView
from barrierlb.lookahead import Lookahead
from barrierlb.oracle import (EnumerationLimitExceeded, IirSpec, StepState,
                              allocation_cost, allocation_count, brute_force_best,
                              brute_force_core, enumerate_allocations, estimate_iir,
                              ratio_stderr)
from barrierlb.policies import (FCFS, JSQ, BFIOExact, BFIOGreedy, check_allocation)
from barrierlb.workload import (DecodeDistribution, PrefillDistribution, Request,
                                WorkloadProfile, llm_profile)


def req(i, *steps):
    return Request(i, 0.0, WorkloadProfile(tuple(steps)))


class TestEnumeration:
    def test_two_by_two(self):
        assert enumerate_allocations(["a", "b"], [1, 1]) == [{"a": 0, "b": 1}, {"a": 1, "b": 0}]

    def test_empty(self):
        assert enumerate_allocations([], [2, 1]) == [{}]

    def test_choose_and_permute(self):
        got = enumerate_allocations(["a", "b", "c"], [1, 1])
        assert len(got) == 6 == math.comb(3, 2) * 2
        assert len({tuple(sorted(a.items())) for a in got}) == 6
        assert all(len(a) == 2 for a in got)

    def test_limit(self):
        with pytest.raises(EnumerationLimitExceeded):
            enumerate_allocations(list(range(6)), [3, 3, 3], limit=100)

    def test_each_feasible_once(self):
        got = enumerate_allocations(list("abcd"), [2, 1, 0])
        keys = [tuple(a.get(x, -1) for x in "abcd") for a in got]
        assert len(keys) == len(set(keys)) == allocation_count(4, [2, 1, 0])
        assert keys == sorted(keys, key=lambda k: tuple(3 if g < 0 else g for g in k))


class TestBruteForce:
    def test_balancing_example(self):
        state = StepState((1, 1), (((req(90, 10), 0),), ((req(91, 4), 0),)))
        alloc, J = brute_force_best([req(0, 7), req(1, 1)], state, Lookahead(), 0)
        assert alloc == {1: 0, 0: 1} and J == 0

    def test_identical_requests(self):
        state = StepState((2, 2), ((), ()))
        alloc, J = brute_force_best([req(i, 4) for i in range(3)], state, Lookahead(), 0)
        assert J == 4  # loads (8, 4) cannot be evened out
        assert alloc == {0: 0, 1: 0, 2: 1}

    def test_hand_window(self):
        # worker 0 runs (2,3); candidates (1,1) and (3,4); H=1
        state = StepState((1, 1), (((req(90, 2, 3), 0),), ()))
        w = [req(0, 1, 1), req(1, 3, 4)]
        alloc, J = brute_force_best(w, state, Lookahead(), 1)
        # 0->w0,1->w1: (3,3),(4,4) -> 0 ; 0->w1,1->w0: (5,1),(7,1) -> 4+6
        assert alloc == {0: 0, 1: 1} and J == 0
        assert allocation_cost(w, state, Lookahead(), 1, {0: 1, 1: 0}) == 10

    def test_matches_policy_state(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            state, waiting = random_state(rng)
            sim = state.simulator(waiting, Lookahead())
            view = StepView(sim, sim.free_slots)
            np.testing.assert_array_equal(view.active_window(2), state.base_window(Lookahead(), 2))


def random_state(rng, G=None, B=None, n=None):
    G = G or int(rng.integers(1, 4))
    B = B or int(rng.integers(1, 4))
    active, caps, rid = [], [], 0
    for g in range(G):
        pairs = []
        for _ in range(int(rng.integers(0, B + 1))):
            o = int(rng.integers(1, 6))
            pairs.append((Request(rid, 0.0, llm_profile(int(rng.integers(1, 30)), o)),
                          int(rng.integers(0, o))))
            rid += 1
        active.append(tuple(pairs))
        caps.append(B - len(pairs))
    n = int(rng.integers(0, 7)) if n is None else n
    waiting = [Request(rid + i, 0.0, llm_profile(int(rng.integers(1, 30)), int(rng.integers(1, 6))))
               for i in range(n)]
    return StepState(tuple(caps), tuple(active)), waiting


def test_global_minimum_property():
    """No policy beats the brute-force optimum on 10^4 random small steps."""
    rng = np.random.default_rng(2024)
    la = Lookahead()
    for _ in range(10_000):
        state, waiting = random_state(rng)
        H = int(rng.integers(0, 3))
        _, best = brute_force_best(waiting, state, la, H)
        sim = state.simulator(waiting, la)
        view = StepView(sim, sim.free_slots)
        ids = [r.id for r in waiting]
        for pol in (FCFS(), JSQ(), BFIOGreedy(H), BFIOExact(H)):
            alloc = pol.assign(view)
            check_allocation(alloc, ids, view.caps)
            assert allocation_cost(waiting, state, la, H, alloc) >= best


class TestIir:
    def test_single_worker_ratio_is_one(self):
        spec = IirSpec(steps=50, warmup=10)
        est = estimate_iir([(4, 1)], spec, trials=2, seed=0)
        (c,) = est.cells
        assert (c.fcfs_mean, c.bfio_mean, c.ratio) == (0.0, 0.0, 1.0)
        assert not c.infinite

    def test_reproducible_and_csv(self):
        spec = IirSpec(prefill=PrefillDistribution.uniform(64),
                       decode=DecodeDistribution.geometric(0.2), steps=60, warmup=20)
        a = estimate_iir([(2, 2), (4, 2)], spec, trials=2, seed=3)
        b = estimate_iir([(2, 2), (4, 2)], spec, trials=2, seed=3)
        assert a.to_csv() == b.to_csv()
        lines = a.to_csv().splitlines()
        assert lines[0] == "B,G,fcfs_mean,bfio_mean,ratio,stderr,trials"
        assert len(lines) == 3
        c = a.cell(2, 2)
        assert c.ratio == c.fcfs_mean / c.bfio_mean and c.trials == 2

    def test_regime_flag(self):
        est = estimate_iir([(2, 9)], IirSpec(steps=20, warmup=0), trials=1)
        assert est.cells[0].outside_regime

    def test_infinite_flag(self):
        # two prefill classes, one-step requests, one slot per worker: the
        # overloaded pool always holds two equal sizes, so BF-IO idles nobody
        spec = IirSpec(prefill=PrefillDistribution.empirical([1, 2]),
                       decode=DecodeDistribution.fixed(1), steps=40, warmup=0)
        c = estimate_iir([(1, 2)], spec, trials=2, seed=1).cells[0]
        assert c.bfio_mean == 0 and c.fcfs_mean > 0
        assert c.infinite and math.isinf(c.ratio)

    def test_ratio_stderr(self):
        f = np.array([10.0, 12.0, 11.0])
        b = np.array([5.0, 5.0, 5.0])
        se = ratio_stderr(f, b)
        assert se == pytest.approx(np.std(f, ddof=1) / np.sqrt(3) / 5.0)

    def test_bad_trials(self):
        with pytest.raises(ValueError):
            estimate_iir([(2, 2)], IirSpec(), trials=0)
