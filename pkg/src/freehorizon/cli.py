"""Command-line front end: run a scenario and write CSV/JSON artifacts.

    freehorizon solve      --config F --horizon T
    freehorizon sweep      --config F
    freehorizon msweep     --config F [--m-values a,b,c]
    freehorizon discounted --config F [--beta b] [--budget N]
    freehorizon check      --config F

``F`` is a TOML file or the name of a bundled scenario. Every run writes
``manifest.json`` into the output directory. Exit status is 0 on success,
1 when ``check`` ran but a report failed, 2 for configuration or usage
errors and 3 for numerical failures; errors are also printed to stderr as a
JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli_w

from . import __version__
from . import cost as costs
from . import diagnostics
from .config import ConfigError, ScenarioConfig, bundled_scenarios, load_config
from .dynamics import NumericOverflowError
from .horizon import (
    HittingTimeNotFoundError,
    SweepFailedError,
    SweepRecord,
    m_sweep,
    solve_acocp,
    solve_discounted_acocp,
)
from .ilqr import SolverDivergedError, solve_fhocp

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

SWEEP_HEADER = ["T", "total_cost", "transfer_cost", "terminal_phi", "hit", "converged", "iterations"]


class OutputError(OSError):
    pass


def fmt(value) -> str:
    """17 significant digits for floats, lowercase booleans, empty for missing."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path: Path, header: list[str], rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
    except OSError as err:
        raise OutputError(f"cannot write {path}: {err}") from err


def write_sweep_csv(records: list[SweepRecord], path) -> None:
    if not records:
        raise ValueError("no sweep records to write")
    rows = [[getattr(r, h) for h in SWEEP_HEADER] for r in sorted(records, key=lambda r: r.T)]
    write_csv(Path(path), SWEEP_HEADER, rows)


def read_sweep_csv(path) -> list[SweepRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        SweepRecord(
            T=int(row["T"]),
            total_cost=float(row["total_cost"]),
            transfer_cost=float(row["transfer_cost"]),
            terminal_phi=float(row["terminal_phi"]),
            hit=row["hit"] == "true",
            converged=row["converged"] == "true",
            iterations=int(row["iterations"]),
        )
        for row in rows
    ]


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as err:
        raise OutputError(f"cannot write {path}: {err}") from err


@dataclass
class RunContext:
    config: ScenarioConfig
    out: Path
    files: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def timed(self, phase: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - t0


def _cmd_solve(ctx: RunContext, args) -> int:
    cfg = ctx.config
    res = ctx.timed("solve", solve_fhocp, cfg.problem, args.horizon, None, cfg.solver)
    n, p = cfg.model.n, cfg.model.p
    header = ["k"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(p)] + ["stage_cost"]
    rows = []
    for k in range(res.T):
        c = costs.stage_cost(cfg.cost, res.states[k], res.controls[k])
        rows.append([k, *res.states[k], *res.controls[k], c])
    # final state: no control and no stage cost
    rows.append([res.T, *res.states[-1], *([None] * p), None])
    write_csv(ctx.path("trajectory.csv"), header, rows)
    _write_json(
        ctx.path("solve_result.json"),
        {
            "T": res.T,
            "total_cost": res.breakdown.total,
            "transfer_cost": res.breakdown.transfer,
            "terminal_cost": res.breakdown.terminal,
            "converged": res.converged,
            "iterations": res.iterations,
        },
    )
    return EXIT_OK


def _ac_summary(res) -> dict:
    return {
        "T_star": res.T_star,
        "J_M": res.J_M,
        "M": res.M,
        "transfer_cost": res.solution.breakdown.transfer,
        "phi_at_hit": res.phi_at_hit,
        "converged": res.solution.converged,
        "iterations": res.solution.iterations,
    }


def _cmd_sweep(ctx: RunContext, args) -> int:
    cfg, s = ctx.config, ctx.config.sweep
    try:
        res = ctx.timed(
            "sweep", solve_acocp, cfg.problem, cfg.M, s.t_min, s.t_max, s.t_step, cfg.solver, s.refine, s.parallel
        )
    except HittingTimeNotFoundError as err:
        if err.sweep:
            write_sweep_csv(err.sweep, ctx.path("sweep.csv"))
        raise
    write_sweep_csv(res.sweep, ctx.path("sweep.csv"))
    _write_json(ctx.path("ac_result.json"), _ac_summary(res))
    return EXIT_OK


def _parse_levels(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--m-values must be comma-separated numbers, got {text!r}") from None


def _cmd_msweep(ctx: RunContext, args) -> int:
    cfg, s = ctx.config, ctx.config.sweep
    levels = list(cfg.msweep.m_values)
    if not levels:
        raise ConfigError("no M values: pass --m-values or set msweep.m_values")
    try:
        out = ctx.timed(
            "msweep", m_sweep, cfg.problem, levels, s.t_min, s.t_max, s.t_step, cfg.solver, s.refine, cfg.msweep.T_ref
        )
    except ValueError as err:
        raise ConfigError(str(err), "msweep.m_values") from None
    rows = [[e.M, e.T_star, e.J_M, out.J_ref, e.gap] for e in out.entries]
    write_csv(ctx.path("msweep.csv"), ["M", "T_star", "J_M", "J_ref", "gap"], rows)
    return EXIT_OK


def _cmd_discounted(ctx: RunContext, args) -> int:
    cfg, s = ctx.config, ctx.config.sweep
    beta = cfg.discounted.beta
    if beta is None:
        raise ConfigError("no discount: pass --beta or set discounted.beta")
    problem = cfg.problem.with_cost(cfg.cost.with_beta(beta))
    res = ctx.timed(
        "discounted",
        solve_discounted_acocp,
        problem,
        cfg.M,
        cfg.discounted.budget,
        s.t_min,
        s.t_step,
        cfg.solver,
        s.refine,
    )
    write_csv(ctx.path("discounted.csv"), ["beta", "entered", "T_star", "J_M"], [[beta, res.entered, res.T_star, res.J_M]])
    return EXIT_OK


def _cmd_check(ctx: RunContext, args) -> int:
    cfg, s, c = ctx.config, ctx.config.sweep, ctx.config.check
    problem = cfg.problem
    reports = [ctx.timed("jacobians", diagnostics.check_jacobians, cfg.model, c.jacobian_samples, c.seed, c.jacobian_tol)]
    res = ctx.timed(
        "sweep", solve_acocp, problem, cfg.M, s.t_min, s.t_max, s.t_step, cfg.solver, s.refine, s.parallel,
        stop_at_hit=True,
    )
    reports.append(diagnostics.check_first_hit_minimality(res))
    cache: dict = {}
    reports.append(
        ctx.timed("bellman", diagnostics.check_bellman_consistency, res, problem, c.stride, c.tol, cfg.solver, cache)
    )
    reports.append(ctx.timed("lyapunov", diagnostics.check_lyapunov_decrease, res, problem, c.tol, cfg.solver, cache))
    path = ctx.path("checks.jsonl")
    try:
        path.write_text("".join(r.to_json() + "\n" for r in reports), encoding="utf-8")
    except OSError as err:
        raise OutputError(f"cannot write {path}: {err}") from err
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: worst {r.worst_violation:.3g} (tol {r.tolerance:g})")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


COMMANDS = {
    "solve": _cmd_solve,
    "sweep": _cmd_sweep,
    "msweep": _cmd_msweep,
    "discounted": _cmd_discounted,
    "check": _cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freehorizon", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help=f"TOML file or bundled scenario ({', '.join(bundled_scenarios())})")
        p.add_argument("--output-dir", help="overrides scenario.output_dir (default: out/<scenario name>)")
        return p

    add("solve", "fixed-horizon solve").add_argument("--horizon", type=int, required=True)
    add("sweep", "horizon sweep and free-final-time result")
    add("msweep", "terminal-level sweep against the long-horizon reference").add_argument(
        "--m-values", help="comma-separated, strictly decreasing"
    )
    p = add("discounted", "discounted free-final-time solve within a horizon budget")
    p.add_argument("--beta", type=float)
    p.add_argument("--budget", type=int)
    add("check", "Jacobian, first-hit, Bellman and Lyapunov checks")
    return parser


def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    echo = json.loads(json.dumps(cfg.echo))
    if getattr(args, "m_values", None):
        levels = tuple(_parse_levels(args.m_values))
        cfg = replace(cfg, msweep=replace(cfg.msweep, m_values=levels))
        echo["msweep"]["m_values"] = list(levels)
    if getattr(args, "beta", None) is not None:
        if not 0 < args.beta < 1:
            raise ConfigError(f"must lie in (0, 1), got {args.beta}", "--beta")
        cfg = replace(cfg, discounted=replace(cfg.discounted, beta=args.beta))
        echo["discounted"]["beta"] = args.beta
    if getattr(args, "budget", None) is not None:
        if args.budget < 1:
            raise ConfigError("must be >= 1", "--budget")
        cfg = replace(cfg, discounted=replace(cfg.discounted, budget=args.budget))
        echo["discounted"]["budget"] = args.budget
    if getattr(args, "horizon", None) is not None and args.horizon < 1:
        raise ConfigError("must be >= 1", "--horizon")
    return replace(cfg, echo=echo)


def _error_object(err: BaseException, code: int) -> dict:
    obj = {"type": type(err).__name__, "message": str(err), "exit_code": code}
    if isinstance(err, ConfigError):
        obj.update(key=err.key, line=err.line)
    if isinstance(err, SweepFailedError):
        obj["diagnostics"] = {str(T): msg for T, msg in sorted(err.diagnostics.items())}
    return obj


def _manifest(ctx: RunContext, args, started: str, wall: float, status: str, error: dict | None) -> dict:
    return {
        "tool": "freehorizon",
        "version": __version__,
        "command": args.command,
        "arguments": {k: v for k, v in vars(args).items() if k not in ("command", "config", "output_dir")},
        "config": ctx.config.echo,
        "config_toml": tomli_w.dumps(ctx.config.echo),
        "started_at": started,
        "wall_clock_seconds": wall,
        "timings": ctx.timings,
        "files": sorted(ctx.files),
        "status": status,
        "error": error,
    }


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    ctx = None
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = Path(args.output_dir or cfg.output_dir or Path("out") / cfg.name)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise OutputError(f"cannot create output directory {out}: {err}") from err
        ctx = RunContext(cfg, out)
        code = COMMANDS[args.command](ctx, args)
        error = None
    except ConfigError as err:
        code, error = EXIT_CONFIG, _error_object(err, EXIT_CONFIG)
    except (
        HittingTimeNotFoundError,
        SweepFailedError,
        SolverDivergedError,
        NumericOverflowError,
        OutputError,
        diagnostics.OracleFailedError,
    ) as err:
        code, error = EXIT_NUMERIC, _error_object(err, EXIT_NUMERIC)
    if error is not None:
        print(json.dumps({"error": error}, sort_keys=True), file=sys.stderr)
    if ctx is not None:
        status = "ok" if code == EXIT_OK else ("checks_failed" if code == EXIT_CHECK_FAILED else "error")
        ctx.files.append("manifest.json")
        manifest = _manifest(ctx, args, started, time.perf_counter() - t0, status, error)
        try:
            _write_json(ctx.out / "manifest.json", manifest)
        except OutputError as err:
            print(json.dumps({"error": _error_object(err, EXIT_NUMERIC)}), file=sys.stderr)
            return EXIT_NUMERIC
    return code


if __name__ == "__main__":
    sys.exit(main())
