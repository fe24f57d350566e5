"""Scenario configuration files.

A scenario is a TOML document with the sections below; every key outside
this schema is rejected so a misspelt weight never goes unnoticed.

    [scenario]   name, x0, output_dir
    [model]      name, dt, wheelbase
    [cost]       goal, Q, R, Q_T, M, beta
    [sweep]      t_min, t_max, t_step, refine, parallel
    [solver]     any SolverOptions field
    [msweep]     m_values, T_ref
    [discounted] beta, budget
    [check]      stride, tol, jacobian_samples, jacobian_tol, seed

Numeric entries may be strings holding arithmetic in ``pi`` (``"pi/3"``).
Weight matrices are diagonal lists or nested lists; ``Q_T = "dare"`` uses the
stationary Riccati cost of the linearization at the goal.
"""

from __future__ import annotations

import ast
import math
import operator
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .cost import CostSpec
from .diagnostics import OracleFailedError, dare_fixed_point, goal_linearization
from .dynamics import MODEL_DIMS, DimensionError, Model
from .ilqr import Problem, SolverOptions

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ConfigError(ValueError):
    """Invalid configuration; names the offending key and, when known, its line."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f"line {line}: " if line else ""
        what = f"{key}: " if key else ""
        super().__init__(f"{where}{what}{message}")
        self.key = key
        self.line = line


_OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
    ast.USub: operator.neg,
    ast.UAdd: operator.pos,
}


def _eval_expr(text: str) -> float:
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ValueError(f"unsupported expression {text!r}")

    try:
        return ev(ast.parse(text.strip(), mode="eval"))
    except (SyntaxError, ZeroDivisionError) as err:
        raise ValueError(f"bad expression {text!r}: {err}") from None


@dataclass(frozen=True)
class SweepSettings:
    t_min: int = 1
    t_max: int = 1000
    t_step: int = 1
    refine: bool = True
    parallel: bool = False


@dataclass(frozen=True)
class MSweepSettings:
    m_values: tuple[float, ...] = ()
    T_ref: int = 1000


@dataclass(frozen=True)
class DiscountedSettings:
    beta: float | None = None
    budget: int = 1500


@dataclass(frozen=True)
class CheckSettings:
    stride: int = 10
    tol: float = 1e-3
    jacobian_samples: int = 100
    jacobian_tol: float = 1e-4
    seed: int = 7


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    name: str
    model: Model
    x0: np.ndarray
    cost: CostSpec
    M: float
    sweep: SweepSettings = field(default_factory=SweepSettings)
    solver: SolverOptions = field(default_factory=SolverOptions)
    msweep: MSweepSettings = field(default_factory=MSweepSettings)
    discounted: DiscountedSettings = field(default_factory=DiscountedSettings)
    check: CheckSettings = field(default_factory=CheckSettings)
    output_dir: str | None = None
    # normalized document: numbers evaluated, defaults filled in
    echo: dict = field(default_factory=dict)

    @property
    def problem(self) -> Problem:
        return Problem(self.model, self.cost, self.x0)


_SCHEMA = {
    "scenario": {"name", "x0", "output_dir"},
    "model": {"name", "dt", "wheelbase"},
    "cost": {"goal", "Q", "R", "Q_T", "M", "beta"},
    "sweep": {f.name for f in fields(SweepSettings)},
    "solver": {f.name for f in fields(SolverOptions)},
    "msweep": {f.name for f in fields(MSweepSettings)},
    "discounted": {f.name for f in fields(DiscountedSettings)},
    "check": {f.name for f in fields(CheckSettings)},
}
_REQUIRED = {"scenario": {"x0"}, "model": {"name"}, "cost": {"goal", "Q", "R", "Q_T", "M"}}


class _Reader:
    """Typed access to the parsed document with line-aware errors."""

    def __init__(self, text: str, doc: dict):
        self.lines = text.splitlines()
        self.doc = doc

    def line_of(self, section: str, key: str | None = None) -> int | None:
        in_section = False
        for i, raw in enumerate(self.lines, 1):
            line = raw.split("#", 1)[0].strip()
            m = re.match(r"^\[\s*([A-Za-z_]+)\s*\]$", line)
            if m:
                in_section = m.group(1) == section
                if in_section and key is None:
                    return i
                continue
            if in_section and key is not None and re.match(rf"^\"?{re.escape(key)}\"?\s*=", line):
                return i
        return None

    def error(self, section: str, key: str | None, message: str) -> ConfigError:
        name = f"{section}.{key}" if key else section
        return ConfigError(message, name, self.line_of(section, key))

    def has(self, section: str, key: str) -> bool:
        return key in self.doc.get(section, {})

    def raw(self, section: str, key: str, default=None):
        return self.doc.get(section, {}).get(key, default)

    def number(self, section: str, key: str, default=None) -> float:
        value = self.raw(section, key, default)
        try:
            return _to_float(value)
        except (TypeError, ValueError) as err:
            raise self.error(section, key, str(err)) from None

    def integer(self, section: str, key: str, default=None) -> int:
        value = self.raw(section, key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(section, key, f"expected an integer, got {value!r}")
        return value

    def boolean(self, section: str, key: str, default=None) -> bool:
        value = self.raw(section, key, default)
        if not isinstance(value, bool):
            raise self.error(section, key, f"expected true or false, got {value!r}")
        return value

    def string(self, section: str, key: str, default=None) -> str:
        value = self.raw(section, key, default)
        if not isinstance(value, str):
            raise self.error(section, key, f"expected a string, got {value!r}")
        return value

    def vector(self, section: str, key: str, size: int | None = None) -> list[float]:
        value = self.raw(section, key)
        if not isinstance(value, list):
            raise self.error(section, key, f"expected a list, got {value!r}")
        try:
            out = [_to_float(v) for v in value]
        except (TypeError, ValueError) as err:
            raise self.error(section, key, str(err)) from None
        if size is not None and len(out) != size:
            raise self.error(section, key, f"expected {size} entries, got {len(out)}")
        return out

    def matrix(self, section: str, key: str, size: int) -> list:
        value = self.raw(section, key)
        if isinstance(value, list) and value and all(isinstance(r, list) for r in value):
            try:
                rows = [[_to_float(v) for v in r] for r in value]
            except (TypeError, ValueError) as err:
                raise self.error(section, key, str(err)) from None
            if len(rows) != size or any(len(r) != size for r in rows):
                raise self.error(section, key, f"expected a {size}x{size} matrix")
            return rows
        return self.vector(section, key, size)


def _to_float(value) -> float:
    if isinstance(value, bool):
        raise TypeError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return _eval_expr(value)
    raise TypeError(f"expected a number, got {value!r}")


def _check_keys(reader: _Reader) -> None:
    for section, body in reader.doc.items():
        if section not in _SCHEMA:
            raise reader.error(section, None, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError("expected a table", section)
        for key in body:
            if key not in _SCHEMA[section]:
                raise reader.error(section, key, "unknown key")
    for section, keys in _REQUIRED.items():
        for key in sorted(keys):
            if not reader.has(section, key):
                raise ConfigError("missing required key", f"{section}.{key}", reader.line_of(section))


def parse_config(text: str, name: str = "scenario") -> ScenarioConfig:
    """Validate a TOML scenario and fill in defaults."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        m = re.search(r"line (\d+)", str(err))
        raise ConfigError(f"invalid TOML: {err}", None, int(m.group(1)) if m else None) from None
    r = _Reader(text, doc)
    _check_keys(r)

    model_name = r.string("model", "name")
    if model_name not in MODEL_DIMS:
        raise r.error("model", "name", f"unknown model {model_name!r}; choose from {sorted(MODEL_DIMS)}")
    try:
        model = Model(
            model_name,
            dt=r.number("model", "dt") if r.has("model", "dt") else None,
            wheelbase=r.number("model", "wheelbase", 1.0),
        )
    except ValueError as err:
        key = "wheelbase" if "wheelbase" in str(err) else "dt"
        raise r.error("model", key, str(err)) from None
    n, p = model.n, model.p

    x0 = r.vector("scenario", "x0", n)
    goal = r.vector("cost", "goal", n)
    Q = r.matrix("cost", "Q", n)
    R = r.matrix("cost", "R", p)
    beta = r.number("cost", "beta", 1.0)
    if not 0 < beta <= 1:
        raise r.error("cost", "beta", f"must lie in (0, 1], got {beta}")
    M = r.number("cost", "M")
    if not M > 0:
        raise r.error("cost", "M", f"must be positive, got {M}")

    Q_T_raw = r.raw("cost", "Q_T")
    if Q_T_raw == "dare":
        Q_T = _dare_terminal(r, model, goal, Q, R)
    else:
        Q_T = r.matrix("cost", "Q_T", n)
    try:
        cost = CostSpec(goal=goal, Q=Q, R=R, Q_T=Q_T, beta=beta)
    except (ValueError, DimensionError) as err:
        # CostSpec messages lead with the offending weight's name
        key = str(err).split()[0]
        raise r.error("cost", key if key in ("Q", "R", "Q_T") else None, str(err)) from None

    sweep = _settings(r, "sweep", SweepSettings)
    if not 1 <= sweep.t_min <= sweep.t_max:
        raise r.error("sweep", "t_max", f"need 1 <= t_min <= t_max, got {sweep.t_min}, {sweep.t_max}")
    if sweep.t_step < 1:
        raise r.error("sweep", "t_step", "must be >= 1")

    solver_kw = {}
    defaults = SolverOptions()
    for key in r.doc.get("solver", {}):
        if key == "alphas":
            solver_kw[key] = tuple(r.vector("solver", key))
        elif key == "discount_mode":
            solver_kw[key] = r.string("solver", key)
        elif isinstance(getattr(defaults, key), int):
            solver_kw[key] = r.integer("solver", key)
        else:
            solver_kw[key] = r.number("solver", key)
    try:
        solver = SolverOptions(**solver_kw)
    except ValueError as err:
        raise r.error("solver", next(iter(solver_kw), None), str(err)) from None

    msweep = MSweepSettings(
        m_values=tuple(r.vector("msweep", "m_values")) if r.has("msweep", "m_values") else (),
        T_ref=r.integer("msweep", "T_ref", 1000),
    )
    if msweep.T_ref < 1:
        raise r.error("msweep", "T_ref", "must be >= 1")
    disc_beta = r.number("discounted", "beta") if r.has("discounted", "beta") else None
    if disc_beta is not None and not 0 < disc_beta < 1:
        raise r.error("discounted", "beta", f"must lie in (0, 1), got {disc_beta}")
    discounted = DiscountedSettings(beta=disc_beta, budget=r.integer("discounted", "budget", 1500))
    if discounted.budget < 1:
        raise r.error("discounted", "budget", "must be >= 1")
    check = _settings(r, "check", CheckSettings)
    if check.stride < 1 or check.jacobian_samples < 1:
        raise r.error("check", "stride" if check.stride < 1 else "jacobian_samples", "must be >= 1")

    output_dir = r.string("scenario", "output_dir") if r.has("scenario", "output_dir") else None
    scenario_name = r.string("scenario", "name", name)

    echo = {
        "scenario": {"name": scenario_name, "x0": x0},
        "model": {"name": model.name, "dt": model.dt, "wheelbase": model.wheelbase},
        "cost": {
            "goal": goal,
            "Q": cost.Q.tolist(),
            "R": cost.R.tolist(),
            "Q_T": cost.Q_T.tolist(),
            "M": M,
            "beta": beta,
        },
        "sweep": _asdict(sweep),
        "solver": {f.name: _plain(getattr(solver, f.name)) for f in fields(SolverOptions)},
        "msweep": {"m_values": list(msweep.m_values), "T_ref": msweep.T_ref},
        "discounted": {"budget": discounted.budget} | ({"beta": disc_beta} if disc_beta is not None else {}),
        "check": _asdict(check),
    }
    if output_dir is not None:
        echo["scenario"]["output_dir"] = output_dir
    return ScenarioConfig(
        name=scenario_name,
        model=model,
        x0=np.array(x0),
        cost=cost,
        M=M,
        sweep=sweep,
        solver=solver,
        msweep=msweep,
        discounted=discounted,
        check=check,
        output_dir=output_dir,
        echo=echo,
    )


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _asdict(obj) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}


def _settings(r: _Reader, section: str, cls):
    kw = {}
    for f in fields(cls):
        if not r.has(section, f.name):
            continue
        default = f.default
        if isinstance(default, bool):
            kw[f.name] = r.boolean(section, f.name)
        elif isinstance(default, int):
            kw[f.name] = r.integer(section, f.name)
        else:
            kw[f.name] = r.number(section, f.name)
    return cls(**kw)


def _dare_terminal(r: _Reader, model: Model, goal, Q, R) -> list:
    A, B = goal_linearization(model, goal)
    try:
        P, _ = dare_fixed_point(A, B, np.diag(Q) if np.ndim(Q) == 1 else Q, np.diag(R) if np.ndim(R) == 1 else R)
    except OracleFailedError as err:
        raise r.error("cost", "Q_T", f"cannot build the Riccati terminal cost: {err}") from None
    return P.tolist()


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.toml"))


def resolve_config_path(name_or_path: str) -> Path:
    """A file path, or the name of a bundled scenario."""
    path = Path(name_or_path)
    if path.is_file():
        return path
    bundled = SCENARIO_DIR / f"{name_or_path}.toml"
    if bundled.is_file():
        return bundled
    raise ConfigError(f"no such config file or bundled scenario {name_or_path!r} (bundled: {', '.join(bundled_scenarios())})")


def load_config(name_or_path: str) -> ScenarioConfig:
    path = resolve_config_path(name_or_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    return parse_config(text, name=path.stem)
