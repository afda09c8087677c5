"""Imbalance, throughput, TPOT and energy metrics, plus the energy-saving bound."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """A metric is undefined for the given input (empty series, zero time...)."""


@dataclass(frozen=True)
class PowerModel:
    """Sublinear GPU power curve ``P(u) = p_idle + (p_max - p_idle) * u**gamma``.

    ``u`` is utilization relative to saturation (mfu / mfu_sat).  Defaults are
    A100-class numbers: 100 W idle, 400 W peak, saturation at 45% MFU,
    exponent 0.7.
    """

    p_idle: float = 100.0
    p_max: float = 400.0
    mfu_sat: float = 0.45
    gamma: float = 0.7

    def __post_init__(self):
        if not (0 < self.p_idle < self.p_max):
            raise ValueError("power model needs 0 < p_idle < p_max")
        if not (0 < self.mfu_sat <= 1):
            raise ValueError("mfu_sat must lie in (0, 1]")
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def c_gamma(self) -> float:
        return (1 - self.gamma) * self.p_max + self.gamma * self.p_idle

    @property
    def d_gamma(self) -> float:
        return (1 - self.gamma) * (self.p_max - self.p_idle)


def imbalance(loads) -> float:
    """Idle work at one step: ``G * max(loads) - sum(loads)``."""
    a = np.asarray(loads, dtype=np.float64)
    if a.size == 0:
        raise MetricError("imbalance needs at least one worker")
    return float(a.size * a.max() - a.sum())


def step_imbalances(loads: np.ndarray) -> np.ndarray:
    """Row-wise imbalance of a ``(K, G)`` load matrix."""
    loads = np.asarray(loads, dtype=np.float64)
    return loads.shape[1] * loads.max(axis=1) - loads.sum(axis=1)


def avg_imbalance(loads) -> float:
    """Mean per-step imbalance over a ``(K, G)`` series of loads."""
    loads = np.asarray(loads, dtype=np.float64)
    if loads.ndim != 2 or loads.shape[0] == 0:
        raise MetricError("average imbalance of an empty series")
    return float(step_imbalances(loads).mean())


def throughput(active_counts, dts) -> float:
    """Tokens per second: each active request emits one token per step."""
    total_t = math.fsum(np.asarray(dts, dtype=np.float64))
    if total_t <= 0:
        raise MetricError("throughput undefined for zero elapsed time")
    return float(np.asarray(active_counts, dtype=np.float64).sum() / total_t)


def tpot(timings) -> float:
    """Mean ``(finish - start) / o`` over completed requests.

    ``timings`` is an iterable of ``(start, finish, o)``; rows whose finish
    is ``None`` are skipped.
    """
    vals = [(f - s) / o for s, f, o in timings if f is not None]
    if not vals:
        raise MetricError("TPOT undefined: no completed requests")
    return math.fsum(vals) / len(vals)


def utilization(loads) -> np.ndarray:
    """Per-worker ``L_g / max(L)``; all zeros when every load is zero."""
    a = np.asarray(loads, dtype=np.float64)
    m = a.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(m > 0, a / np.where(m > 0, m, 1.0), 0.0)
    return u


def power(u, model: PowerModel = PowerModel()):
    """Instantaneous power in watts at relative utilization ``u`` in [0, 1]."""
    arr = np.asarray(u, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise ValueError("utilization must lie in [0, 1]")
    out = model.p_idle + (model.p_max - model.p_idle) * arr ** model.gamma
    return float(out) if out.ndim == 0 else out


def energy(loads, dts, model: PowerModel = PowerModel()) -> float:
    """Joules: ``sum_k dt_k * sum_g P(u_g(k))``."""
    loads = np.asarray(loads, dtype=np.float64)
    dts = np.asarray(dts, dtype=np.float64)
    if loads.shape[0] == 0:
        return 0.0
    u = utilization(loads)
    # u == 1 exactly for the max worker; clip guards float noise from the division
    p = model.p_idle + (model.p_max - model.p_idle) * np.clip(u, 0.0, 1.0) ** model.gamma
    return float(math.fsum(dts * p.sum(axis=1)))


def energy_saving_lower_bound(alpha: float, eta_sum: float,
                              model: PowerModel = PowerModel()) -> float:
    """Guaranteed fractional energy saving given an imbalance ratio ``alpha``.

    ``eta_sum`` is the baseline's total imbalance over total workload.  Either
    argument may be ``math.inf``; a negative result is a vacuous bound.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if not eta_sum > 0:
        raise ValueError("eta_sum must be positive")
    inv_alpha = 0.0 if math.isinf(alpha) else 1.0 / alpha
    first = 0.0 if math.isinf(eta_sum) else model.p_max / eta_sum
    gain = model.p_idle * (1.0 - inv_alpha) - model.d_gamma * inv_alpha
    return gain / (first + model.c_gamma)


def mfu_from_throughput(tok_per_sec: float, n_params: float, peak_flops: float) -> float:
    """Model-FLOPs utilization at ~6 FLOPs per parameter per token."""
    if tok_per_sec < 0 or n_params <= 0 or peak_flops <= 0:
        raise ValueError("throughput must be >= 0; params and peak FLOPs > 0")
    return tok_per_sec * 6.0 * n_params / peak_flops


SUMMARY_FIELDS = ("avg_imbalance", "throughput_tok_s", "tpot_s_tok", "energy_j", "eta_sum")


@dataclass
class MetricsReport:
    avg_imbalance: float
    throughput: float
    tpot: float
    energy: float
    imb_total: float
    total_workload: float
    eta_sum: float
    imbalance_series: np.ndarray = field(repr=False, default=None)
    power_series: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        """Fixed-name summary fields (stable schema)."""
        return {
            "avg_imbalance": self.avg_imbalance,
            "throughput_tok_s": self.throughput,
            "tpot_s_tok": self.tpot,
            "energy_j": self.energy,
            "eta_sum": self.eta_sum,
            "imb_total": self.imb_total,
            "total_workload": self.total_workload,
        }

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_fmt(v)}" for k, v in self.summary().items()) + "\n"

    def to_json(self, extra: dict = None) -> str:
        doc = {k: _jsonable(v) for k, v in self.summary().items()}
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _fmt(v) -> str:
    return repr(float(v)) if v is not None else "nan"


def _jsonable(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else str(v)


def report(result, model: PowerModel = None, skip: int = 0) -> MetricsReport:
    """Compute every metric for a :class:`~barrierlb.engine.SimResult`.

    ``skip`` drops that many leading steps from the imbalance average (warm-up).
    TPOT is NaN when no request completed.
    """
    model = model or result.config.power
    loads = result.loads
    if loads.shape[0] == 0:
        raise MetricError("cannot report on a run with no steps")
    imb = step_imbalances(loads)
    imb_total = float(math.fsum(imb))
    total_w = float(math.fsum(loads.sum(axis=1)))
    try:
        tp = tpot(result.timings())
    except MetricError:
        tp = math.nan
    try:
        thr = throughput(result.active_counts, result.dts)
    except MetricError:
        thr = 0.0
    p_series = power(np.clip(utilization(loads), 0.0, 1.0), model).sum(axis=1)
    return MetricsReport(
        avg_imbalance=float(imb[skip:].mean()) if imb[skip:].size else math.nan,
        throughput=thr,
        tpot=tp,
        energy=energy(loads, result.dts, model),
        imb_total=imb_total,
        total_workload=total_w,
        eta_sum=imb_total / total_w if total_w > 0 else math.nan,
        imbalance_series=imb,
        power_series=p_series,
    )
