import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from barrierlb.engine import SimConfig, run
from barrierlb.metrics import (SUMMARY_FIELDS, MetricError, PowerModel, avg_imbalance,
                               energy, energy_saving_lower_bound, imbalance,
                               mfu_from_throughput, power, report, step_imbalances,
                               throughput, tpot, utilization)
from barrierlb.policies import FCFS
from barrierlb.workload import (ArrivalInstance, DecodeDistribution, PrefillDistribution,
                                sample_instance)


class TestImbalance:
    def test_examples(self):
        assert imbalance([5, 5, 5]) == 0
        assert imbalance([10, 4, 6]) == 10
        assert imbalance([7]) == 0

    def test_average(self):
        assert avg_imbalance([[3, 3], [1, 1]]) == 0
        assert avg_imbalance([[10, 0], [0, 0]]) == 5
        with pytest.raises(MetricError):
            avg_imbalance(np.zeros((0, 2)))

    def test_average_matches_resummation(self):
        rng = np.random.default_rng(0)
        loads = rng.integers(0, 1000, size=(1000, 8)).astype(float)
        ref = math.fsum(8 * max(row) - math.fsum(row) for row in loads.tolist()) / 1000
        assert avg_imbalance(loads) == ref

    @given(st.lists(st.integers(0, 10**6), min_size=1, max_size=16))
    def test_nonnegative_and_zero_iff_uniform(self, loads):
        v = imbalance(loads)
        assert v >= 0
        assert (v == 0) == (len(set(loads)) == 1)


class TestRates:
    def test_throughput(self):
        assert throughput([1] * 10, [1.0] * 10) == 1.0
        assert throughput([2] * 10, [1.0] * 10) == 2.0
        assert throughput([0] * 3, [1.0] * 3) == 0
        with pytest.raises(MetricError):
            throughput([1], [0.0])

    def test_tpot(self):
        assert tpot([(0.0, 8.0, 4)]) == 2.0
        assert tpot([(0.0, 1.0, 1), (0.0, 6.0, 2)]) == 2.0
        with pytest.raises(MetricError):
            tpot([(0.0, None, 3)])


class TestPower:
    def test_curve(self):
        assert power(0.0) == 100.0
        assert power(1.0) == 400.0
        assert power(0.5) == pytest.approx(284.6716620017374, rel=1e-14)
        with pytest.raises(ValueError):
            power(1.5)
        with pytest.raises(ValueError):
            power(-0.1)

    def test_concave(self):
        u = np.linspace(0, 1, 100)
        second = np.diff(power(u), 2)
        assert np.all(second <= 1e-9)

    def test_utilization(self):
        assert utilization([10, 4]).tolist() == [1.0, 0.4]
        assert utilization([3, 3]).tolist() == [1.0, 1.0]
        assert utilization([0, 0]).tolist() == [0.0, 0.0]

    def test_energy(self):
        assert energy([[5.0]] * 10, [1.0] * 10) == 4000.0
        assert energy(np.zeros((0, 3)), []) == 0.0
        # idle workers are still powered
        assert energy([[0.0, 0.0]], [2.0]) == 400.0
        loads = np.full((7, 4), 9.0)
        dts = np.linspace(0.1, 0.7, 7)
        assert energy(loads, dts) == pytest.approx(4 * 400 * dts.sum(), rel=1e-12)

    @given(st.lists(st.floats(0, 100), min_size=2, max_size=5), st.floats(0.01, 2))
    def test_energy_monotone_in_dt(self, loads, dt):
        assert energy([loads], [dt * 1.5]) >= energy([loads], [dt])

    def test_power_monotone_in_u(self):
        assert np.all(np.diff(power(np.linspace(0, 1, 101))) > 0)

    def test_model_validation(self):
        for kw in (dict(p_idle=0), dict(p_idle=500), dict(mfu_sat=0), dict(gamma=1)):
            with pytest.raises(ValueError):
                PowerModel(**kw)


class TestBound:
    def test_limit(self):
        assert energy_saving_lower_bound(math.inf, math.inf) == pytest.approx(100 / 190, abs=1e-12)

    def test_no_improvement(self):
        v = energy_saving_lower_bound(1.0, 2.0)
        assert v == pytest.approx(-90 / (200 + 190))
        assert v <= 0

    def test_example(self):
        assert energy_saving_lower_bound(10.0, 1.0) == pytest.approx(81 / 590, rel=1e-14)

    def test_monotone(self):
        alphas = [1, 1.5, 2, 5, 10, 100]
        etas = [0.01, 0.1, 1, 10]
        grid = np.array([[energy_saving_lower_bound(a, e) for e in etas] for a in alphas])
        assert np.all(np.diff(grid, axis=0) > 0)
        # in eta the bound rises only once it is non-vacuous (alpha > 1.9 here)
        useful = np.array(alphas) > 1.9
        assert np.all(np.diff(grid[useful], axis=1) > 0)
        assert np.all(np.diff(grid[~useful], axis=1) < 0)

    def test_argument_checks(self):
        with pytest.raises(ValueError):
            energy_saving_lower_bound(0.5, 1.0)
        with pytest.raises(ValueError):
            energy_saving_lower_bound(2.0, 0.0)


def test_mfu():
    assert mfu_from_throughput(0, 7e9, 3.12e14) == 0
    assert mfu_from_throughput(1000, 7e9, 3.12e14) == pytest.approx(7 / 52, rel=1e-14)
    assert mfu_from_throughput(3000, 7e9, 3.12e14) == pytest.approx(3 * 7 / 52, rel=1e-14)


class TestReport:
    def result(self):
        inst = sample_instance(PrefillDistribution.uniform(32), DecodeDistribution.geometric(0.2),
                               100.0, 1.0, seed=4)
        return run(SimConfig(G=3, B=2), inst, FCFS())

    def test_fields_and_eta(self):
        rep = report(self.result())
        s = rep.summary()
        assert list(s)[:5] == list(SUMMARY_FIELDS)
        assert rep.eta_sum * rep.total_workload == pytest.approx(rep.imb_total, rel=1e-15)
        assert rep.imbalance_series.shape == (len(self.result().dts),)

    def test_json_and_text(self):
        rep = report(self.result())
        doc = json.loads(rep.to_json({"seed": 4}))
        assert doc["seed"] == 4 and set(SUMMARY_FIELDS) <= set(doc)
        lines = rep.to_text().splitlines()
        assert [ln.split(" = ")[0] for ln in lines[:5]] == list(SUMMARY_FIELDS)

    def test_warmup_skip(self):
        res = self.result()
        full = report(res).avg_imbalance
        skipped = report(res, skip=5).avg_imbalance
        assert skipped == pytest.approx(step_imbalances(res.loads)[5:].mean())
        assert full == pytest.approx(step_imbalances(res.loads).mean())

    def test_no_steps(self):
        with pytest.raises(MetricError):
            report(run(SimConfig(), ArrivalInstance(())))
