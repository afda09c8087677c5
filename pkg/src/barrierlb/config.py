"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Precedence, lowest first: built-in defaults, the config file, ``--set``
overrides, then the dedicated command-line flags.

Keys
----
Simulator: ``G``, ``B``, ``C``, ``t_ell``, ``horizon``, ``policy``,
``max_steps``, ``seed``, ``lookahead`` (perfect/truncated/noisy),
``noise_sigma``, ``lookahead_depth``, ``window``, ``search_limit``.

Power model: ``power.p_idle``, ``power.p_max``, ``power.mfu_sat``,
``power.gamma``.

Workload (exactly one source): ``workload.trace = PATH``, or a synthetic
spec ``workload.prefill`` (``uniform:S_MAX``, ``fixed:S``,
``empirical:a,b,...``), ``workload.decode`` (``geometric:P``, ``fixed:O``,
``empirical:a,b,...``), plus either ``workload.rate`` and
``workload.duration`` for Poisson arrivals or ``workload.overloaded = true``
with ``workload.steps`` for an endless overloaded pool.
``workload.drift`` is ``unit``, ``zero``, ``constant:X`` or ``list:a,b,...``.

Experiments: ``compare.policies``, ``sweep.h``, ``sweep.g`` (comma lists),
``iir.grid`` (``BxG`` pairs, e.g. ``8x4,32x16``), ``iir.trials``,
``iir.steps``, ``iir.warmup``, ``iir.prefill`` and ``iir.decode`` (the
instance family for improvement-ratio grids), ``warmup`` (steps dropped
from the reported average imbalance), ``output``, ``emit_steps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .engine import SimConfig
from .lookahead import MODES
from .metrics import PowerModel
from .policies import POLICY_NAMES
from .workload import (DecodeDistribution, DriftSpec, OverloadedSource,
                       PrefillDistribution, load_trace, sample_instance)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


_INT_KEYS = {"G", "B", "horizon", "max_steps", "seed", "window", "search_limit",
             "lookahead_depth"}
_FLOAT_KEYS = {"C", "t_ell", "noise_sigma"}
_POWER_KEYS = {"p_idle", "p_max", "mfu_sat", "gamma"}


def parse_text(text: str, origin: str = "<config>") -> dict:
    """Raw ``{key: value}`` strings from config text."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{n}: empty key")
        out[key] = value
    return out


def read_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    return parse_text(text, str(p))


def _bool(key: str, v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _num(key: str, v: str, kind):
    try:
        return kind(v)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}") from None


def _int_list(key: str, v: str) -> tuple:
    items = [x.strip() for x in v.split(",") if x.strip()]
    if not items:
        raise ConfigError(f"{key}: list is empty")
    return tuple(_num(key, x, int) for x in items)


def _grid(v: str) -> tuple:
    cells = []
    for item in (x.strip() for x in v.split(",")):
        if not item:
            continue
        try:
            b, g = item.lower().split("x")
            cells.append((int(b), int(g)))
        except ValueError:
            raise ConfigError(f"iir.grid: expected BxG pairs, got {item!r}") from None
    if not cells:
        raise ConfigError("iir.grid: list is empty")
    return tuple(cells)


def parse_prefill(v: str) -> PrefillDistribution:
    kind, _, arg = v.partition(":")
    try:
        if kind == "uniform":
            return PrefillDistribution.uniform(int(arg))
        if kind == "fixed":
            return PrefillDistribution.fixed(int(arg))
        if kind == "empirical":
            return PrefillDistribution.empirical([int(x) for x in arg.split(",")])
    except ValueError as e:
        raise ConfigError(f"workload.prefill: {e}") from None
    raise ConfigError(f"workload.prefill: unknown distribution {v!r}")


def parse_decode(v: str) -> DecodeDistribution:
    kind, _, arg = v.partition(":")
    try:
        if kind == "geometric":
            return DecodeDistribution.geometric(float(arg))
        if kind == "fixed":
            return DecodeDistribution.fixed(int(arg))
        if kind == "empirical":
            return DecodeDistribution.empirical([int(x) for x in arg.split(",")])
    except ValueError as e:
        raise ConfigError(f"workload.decode: {e}") from None
    raise ConfigError(f"workload.decode: unknown distribution {v!r}")


def parse_drift(v: str) -> DriftSpec:
    kind, _, arg = v.partition(":")
    try:
        if kind == "unit":
            return DriftSpec.unit()
        if kind == "zero":
            return DriftSpec.zero()
        if kind == "constant":
            return DriftSpec.constant(float(arg))
        if kind == "list":
            return DriftSpec.from_list([float(x) for x in arg.split(",")])
    except ValueError as e:
        raise ConfigError(f"workload.drift: {e}") from None
    raise ConfigError(f"workload.drift: unknown drift {v!r}")


@dataclass(frozen=True)
class WorkloadSpec:
    """Exactly one of a trace path or a synthetic description."""

    trace: Optional[str] = None
    prefill: str = "uniform:64"
    decode: str = "geometric:0.02"
    rate: Optional[float] = None
    duration: Optional[float] = None
    overloaded: bool = False
    steps: Optional[int] = None
    drift: str = "unit"

    def validate(self) -> None:
        parse_drift(self.drift)
        if self.trace is not None:
            if self.overloaded or self.rate is not None or self.duration is not None:
                raise ConfigError("workload: give either a trace or a synthetic spec, not both")
            return
        parse_prefill(self.prefill)
        parse_decode(self.decode)
        if self.overloaded:
            if self.rate is not None or self.duration is not None:
                raise ConfigError("workload: an overloaded pool takes no rate/duration")
            if self.steps is None or self.steps < 1:
                raise ConfigError("workload.steps must be >= 1 for an overloaded pool")
        else:
            if self.rate is None or self.duration is None:
                raise ConfigError("workload: a synthetic spec needs rate and duration")
            if self.rate <= 0 or self.duration <= 0:
                raise ConfigError("workload: rate and duration must be > 0")

    def build(self, seed: int):
        """The arrival source for ``seed``: an instance or an overloaded pool."""
        drift = parse_drift(self.drift)
        if self.trace is not None:
            return load_trace(self.trace, drift)
        pre, dec = parse_prefill(self.prefill), parse_decode(self.decode)
        if self.overloaded:
            return OverloadedSource(pre, dec, seed, drift)
        return sample_instance(pre, dec, self.rate, self.duration, seed, drift)

    def echo(self) -> dict:
        if self.trace is not None:
            return {"trace": self.trace, "drift": self.drift}
        d = {"prefill": self.prefill, "decode": self.decode, "drift": self.drift}
        if self.overloaded:
            d.update(overloaded=True, steps=self.steps)
        else:
            d.update(rate=self.rate, duration=self.duration)
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    policies: tuple = ("fcfs", "bfio-greedy")
    sweep_h: tuple = (0, 20)
    sweep_g: tuple = (4, 8, 16)
    iir_grid: tuple = ((8, 4), (8, 16), (32, 4), (32, 16))
    iir_trials: int = 20
    iir_steps: int = 2000
    iir_warmup: int = 200
    iir_prefill: str = "uniform:65536"
    iir_decode: str = "fixed:20"
    warmup: int = 0
    output: str = "out"
    emit_steps: bool = False

    def echo(self) -> dict:
        return {
            "sim": self.sim.echo(),
            "workload": self.workload.echo(),
            "warmup": self.warmup,
        }


def build_config(raw: dict) -> ExperimentConfig:
    """Turn merged raw key/value strings into a validated :class:`ExperimentConfig`."""
    sim_kw, power_kw, wl_kw, ex_kw = {}, {}, {}, {}
    for key, v in raw.items():
        if key in _INT_KEYS:
            sim_kw[key] = None if (key == "lookahead_depth" and v.lower() == "none") \
                else _num(key, v, int)
        elif key in _FLOAT_KEYS:
            sim_kw[key] = _num(key, v, float)
        elif key in ("policy", "lookahead"):
            sim_kw[key] = v
        elif key.startswith("power.") and key[6:] in _POWER_KEYS:
            power_kw[key[6:]] = _num(key, v, float)
        elif key == "workload.trace":
            wl_kw["trace"] = v
        elif key in ("workload.prefill", "workload.decode", "workload.drift"):
            wl_kw[key[9:]] = v
        elif key in ("workload.rate", "workload.duration"):
            wl_kw[key[9:]] = _num(key, v, float)
        elif key == "workload.overloaded":
            wl_kw["overloaded"] = _bool(key, v)
        elif key == "workload.steps":
            wl_kw["steps"] = _num(key, v, int)
        elif key == "compare.policies":
            ex_kw["policies"] = tuple(x.strip() for x in v.split(",") if x.strip())
        elif key == "sweep.h":
            ex_kw["sweep_h"] = _int_list(key, v)
        elif key == "sweep.g":
            ex_kw["sweep_g"] = _int_list(key, v)
        elif key == "iir.grid":
            ex_kw["iir_grid"] = _grid(v)
        elif key in ("iir.trials", "iir.steps", "iir.warmup"):
            ex_kw["iir_" + key[4:]] = _num(key, v, int)
        elif key in ("iir.prefill", "iir.decode"):
            (parse_prefill if key == "iir.prefill" else parse_decode)(v)
            ex_kw["iir_" + key[4:]] = v
        elif key == "warmup":
            ex_kw["warmup"] = _num(key, v, int)
        elif key == "output":
            ex_kw["output"] = v
        elif key == "emit_steps":
            ex_kw["emit_steps"] = _bool(key, v)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        power = PowerModel(**power_kw)
        sim = SimConfig(power=power, **sim_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if sim.policy not in POLICY_NAMES:
        raise ConfigError(f"unknown policy {sim.policy!r}; choose from {', '.join(POLICY_NAMES)}")
    if sim.lookahead not in MODES:
        raise ConfigError(f"unknown lookahead {sim.lookahead!r}; choose from {', '.join(MODES)}")
    if wl_kw.get("trace") is not None:
        # a trace replaces the synthetic defaults wholesale
        wl = WorkloadSpec(trace=wl_kw.pop("trace"), drift=wl_kw.pop("drift", "unit"))
        if wl_kw:
            raise ConfigError("workload: give either a trace or a synthetic spec, not both")
    else:
        wl = WorkloadSpec(**wl_kw)
    if not wl.trace and not wl.overloaded:
        # default synthetic source: a small Poisson instance
        wl = replace(wl, rate=50.0 if wl.rate is None else wl.rate,
                     duration=10.0 if wl.duration is None else wl.duration)
    wl.validate()
    cfg = ExperimentConfig(sim=sim, workload=wl, **ex_kw)
    for name in cfg.policies:
        if name not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {name!r} in compare.policies")
    if cfg.iir_trials < 1 or cfg.iir_steps < 1 or cfg.iir_warmup < 0 or cfg.warmup < 0:
        raise ConfigError("iir.trials and iir.steps must be >= 1; warm-ups >= 0")
    return cfg


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    raw = read_file(path) if path else {}
    raw.update(overrides or {})
    return build_config(raw)
