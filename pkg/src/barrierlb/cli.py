"""Command-line entry point: ``barrierlb SUBCOMMAND [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 partial completion
(the step cap stopped a run before every request finished).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import (ConfigError, ExperimentConfig, load_config, parse_decode,
                     parse_drift, parse_prefill)
from .engine import SimResult, run
from .metrics import report
from .oracle import IirSpec, estimate_iir
from .policies import POLICY_NAMES, SearchLimitExceeded, make_policy
from .workload import OverloadedSource, TraceError, WorkloadError, load_trace

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2

COMPARE_COLUMNS = ("policy", "avg_imbalance", "throughput", "tpot", "energy")
SWEEP_H_COLUMNS = ("H",) + COMPARE_COLUMNS[1:]
SWEEP_G_COLUMNS = ("G", "policy", "avg_imbalance", "throughput", "tpot", "energy",
                   "energy_saving_pct")


def _f(x) -> str:
    x = float(x)
    return repr(x) if math.isfinite(x) else str(x)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _manifest(cfg: ExperimentConfig, command: str, files: list, **params) -> str:
    """Provenance sidecar; the key set is fixed, command-specific values go in ``params``."""
    doc = {"command": command, "seed": cfg.sim.seed, "config": cfg.echo(),
           "params": params, "files": files}
    return json.dumps(doc, indent=2, default=str) + "\n"


def _simulate(cfg: ExperimentConfig, policy_name: str, source=None, **sim_changes):
    sim = replace(cfg.sim, policy=policy_name, **sim_changes)
    if source is None:
        source = cfg.workload.build(sim.seed)
    steps = cfg.workload.steps if isinstance(source, OverloadedSource) else None
    res = run(sim, source, make_policy(sim), steps=steps)
    complete = res.completed_all or (steps is not None and res.n_steps == steps)
    return res, complete


def _metric_row(res: SimResult, cfg: ExperimentConfig):
    rep = report(res, skip=cfg.warmup)
    return rep, [_f(rep.avg_imbalance), _f(rep.throughput), _f(rep.tpot), _f(rep.energy)]


# -- subcommands -----------------------------------------------------------------

def cmd_run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output)
    res, complete = _simulate(cfg, cfg.sim.policy)
    rep = report(res, skip=cfg.warmup)
    extra = {"policy": cfg.sim.policy, "seed": cfg.sim.seed, "steps": res.n_steps,
             "completed": complete, "config": cfg.echo()}
    _write(out / "summary.json", rep.to_json(extra))
    _write(out / "summary.txt", rep.to_text())
    files = ["summary.json", "summary.txt"]
    if cfg.emit_steps:
        _write(out / "steps.csv", res.steps_csv())
        files.append("steps.csv")
    _write(out / "manifest.json", _manifest(cfg, "run", files))
    sys.stdout.write(rep.to_text())
    if not complete:
        print(f"partial run: stopped at max_steps={cfg.sim.max_steps}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, policies: Sequence[str]) -> int:
    if len(policies) < 2:
        raise ConfigError("compare needs at least two policies")
    out = Path(cfg.output)
    # an overloaded pool is stateful, so each policy gets a fresh one
    shared = None if cfg.workload.overloaded else cfg.workload.build(cfg.sim.seed)
    rows, files, ok = [], ["compare.csv"], True
    for i, name in enumerate(policies):
        res, complete = _simulate(cfg, name, shared)
        ok &= complete
        _, vals = _metric_row(res, cfg)
        rows.append([name] + vals)
        if cfg.emit_steps:
            fn = f"steps_{i}_{name}.csv"
            _write(out / fn, res.steps_csv())
            files.append(fn)
    _write(out / "compare.csv", _csv(COMPARE_COLUMNS, rows))
    _write(out / "manifest.json", _manifest(cfg, "compare", files, policies=list(policies)))
    sys.stdout.write(_csv(COMPARE_COLUMNS, rows))
    return EXIT_OK if ok else EXIT_PARTIAL


def cmd_sweep_h(cfg: ExperimentConfig, hs: Sequence[int]) -> int:
    if not hs:
        raise ConfigError("sweep-h needs at least one horizon")
    out = Path(cfg.output)
    policy = cfg.sim.policy if cfg.sim.policy.startswith("bfio") else "bfio-greedy"
    rows, files, ok = [], ["sweep_h.csv"], True
    for H in hs:
        res, complete = _simulate(cfg, policy, horizon=int(H))
        ok &= complete
        _, vals = _metric_row(res, cfg)
        rows.append([int(H)] + vals)
        if cfg.emit_steps:
            fn = f"steps_h{H}.csv"
            _write(out / fn, res.steps_csv())
            files.append(fn)
    _write(out / "sweep_h.csv", _csv(SWEEP_H_COLUMNS, rows))
    _write(out / "manifest.json", _manifest(cfg, "sweep-h", files, policy=policy,
                                            horizons=list(hs)))
    sys.stdout.write(_csv(SWEEP_H_COLUMNS, rows))
    return EXIT_OK if ok else EXIT_PARTIAL


def cmd_sweep_g(cfg: ExperimentConfig, gs: Sequence[int]) -> int:
    if not gs:
        raise ConfigError("sweep-g needs at least one worker count")
    out = Path(cfg.output)
    bfio = cfg.sim.policy if cfg.sim.policy.startswith("bfio") else "bfio-greedy"
    rows, files, ok = [], ["sweep_g.csv"], True
    for G in gs:
        reps, vals = {}, {}
        for name in ("fcfs", bfio):
            res, complete = _simulate(cfg, name, G=int(G))
            ok &= complete
            reps[name], vals[name] = _metric_row(res, cfg)
            if cfg.emit_steps:
                fn = f"steps_g{G}_{name}.csv"
                _write(out / fn, res.steps_csv())
                files.append(fn)
        e0 = reps["fcfs"].energy
        saving = 100.0 * (1.0 - reps[bfio].energy / e0) if e0 > 0 else 0.0
        for name in ("fcfs", bfio):
            rows.append([int(G), name] + vals[name] + [_f(saving)])
    _write(out / "sweep_g.csv", _csv(SWEEP_G_COLUMNS, rows))
    _write(out / "manifest.json", _manifest(cfg, "sweep-g", files, policy=bfio,
                                            workers=list(gs)))
    sys.stdout.write(_csv(SWEEP_G_COLUMNS, rows))
    return EXIT_OK if ok else EXIT_PARTIAL


def iir_spec(cfg: ExperimentConfig) -> IirSpec:
    return IirSpec(prefill=parse_prefill(cfg.iir_prefill), decode=parse_decode(cfg.iir_decode),
                   drift=parse_drift(cfg.workload.drift), horizon=cfg.sim.horizon,
                   window=cfg.sim.window, steps=cfg.iir_steps, warmup=cfg.iir_warmup)


def cmd_iir(cfg: ExperimentConfig, grid: Sequence[tuple]) -> int:
    if not grid:
        raise ConfigError("iir needs at least one grid cell")
    out = Path(cfg.output)
    try:
        est = estimate_iir(grid, iir_spec(cfg), cfg.iir_trials, cfg.sim.seed)
    except WorkloadError as e:
        raise ConfigError(str(e)) from None
    _write(out / "iir.csv", est.to_csv())
    flags = {f"{c.B}x{c.G}": [k for k in ("infinite", "outside_regime") if getattr(c, k)]
             for c in est.cells}
    _write(out / "manifest.json", _manifest(
        cfg, "iir", ["iir.csv"], iir={"prefill": cfg.iir_prefill, "decode": cfg.iir_decode,
                                      "trials": cfg.iir_trials, "steps": cfg.iir_steps,
                                      "warmup": cfg.iir_warmup},
        flags={k: v for k, v in flags.items() if v}))
    sys.stdout.write(est.to_csv())
    for key, v in flags.items():
        if v:
            print(f"cell {key}: {', '.join(v)}", file=sys.stderr)
    return EXIT_OK


def cmd_validate_trace(path: str) -> int:
    inst = load_trace(path)
    n = len(inst)
    print(f"{path}: {n} requests, total workload {inst.total_workload():g} tokens")
    return EXIT_OK


# -- argument handling -------------------------------------------------------------

def _comma(kind):
    def parse(text: str):
        try:
            return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="workload and noise seed")
    common.add_argument("--policy", choices=POLICY_NAMES)
    common.add_argument("--horizon", type=int, metavar="H")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--emit-steps", action="store_true", default=None,
                        help="also write per-step CSVs")

    p = argparse.ArgumentParser(
        prog="barrierlb",
        description="Simulate load balancing of barrier-synchronized decode workers.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="one simulation")
    c = sub.add_parser("compare", parents=[common], help="several policies on one instance")
    c.add_argument("--policies", type=_comma(str), help="comma list, at least two")
    h = sub.add_parser("sweep-h", parents=[common], help="BF-IO across lookahead horizons")
    h.add_argument("--h", dest="hs", type=_comma(int), help="comma list of horizons")
    g = sub.add_parser("sweep-g", parents=[common], help="FCFS and BF-IO across worker counts")
    g.add_argument("--g", dest="gs", type=_comma(int), help="comma list of worker counts")
    i = sub.add_parser("iir", parents=[common], help="improvement-ratio grid")
    i.add_argument("--grid", help="BxG pairs, e.g. 8x4,32x16")
    i.add_argument("--trials", type=int)
    v = sub.add_parser("validate-trace", help="check a trace CSV")
    v.add_argument("path")
    return p


def _overrides(args) -> dict:
    raw = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    flags = {"seed": args.seed, "policy": args.policy, "horizon": args.horizon,
             "output": args.out, "emit_steps": args.emit_steps}
    raw.update({k: str(v) for k, v in flags.items() if v is not None})
    if getattr(args, "policies", None) is not None:
        raw["compare.policies"] = ",".join(args.policies)
    if getattr(args, "hs", None) is not None:
        raw["sweep.h"] = ",".join(map(str, args.hs))
    if getattr(args, "gs", None) is not None:
        raw["sweep.g"] = ",".join(map(str, args.gs))
    if getattr(args, "grid", None) is not None:
        raw["iir.grid"] = args.grid
    if getattr(args, "trials", None) is not None:
        raw["iir.trials"] = str(args.trials)
    return raw


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        if args.command == "validate-trace":
            return cmd_validate_trace(args.path)
        cfg = load_config(args.config, _overrides(args))
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "compare":
            return cmd_compare(cfg, cfg.policies)
        if args.command == "sweep-h":
            return cmd_sweep_h(cfg, cfg.sweep_h)
        if args.command == "sweep-g":
            return cmd_sweep_g(cfg, cfg.sweep_g)
        return cmd_iir(cfg, cfg.iir_grid)
    except (ConfigError, TraceError, WorkloadError, SearchLimitExceeded) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
