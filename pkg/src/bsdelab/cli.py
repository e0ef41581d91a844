"""Command-line front end: ``bsdelab {solve,verify,decompose,gamma-check,schema}``.

Exit codes: 0 success, 1 invalid configuration or inputs, 2 solver or
verification failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from collections.abc import Sequence
from pathlib import Path

import jsonschema
import numpy as np
import sympy as sp

from ._io import write_csv, write_json
from .bsde_solver import Driver, SolverConfig
from .clock_measure import Clock, DiscreteMeasurePath, lebesgue_decompose
from .errors import AlignmentError, ConfigError, DomainError
from .forward_models import (
    AlphaStable,
    BrownianDiffusion,
    JumpDiffusion,
    TestFunction,
    apply_generator,
    carre_du_champ,
    sample_paths,
)
from .pseudo_pde import classical_residual, extract_solution, verify_classical_vs_bsde
from .regression import RegressionBasis
from .verification import ORACLE_KINDS, Oracle, markov_check

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2

_NUM = {"type": "number"}
_NUM_OR_LIST = {"oneOf": [_NUM, {"type": "array", "items": _NUM}, {"type": "array", "items": {"type": "array", "items": _NUM}}]}
_NODE = {
    "type": "object",
    "required": ["s", "x"],
    "properties": {"s": {"type": "number", "minimum": 0}, "x": _NUM_OR_LIST},
    "additionalProperties": False,
}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bsdelab run configuration",
    "type": "object",
    "required": ["model", "driver", "clock"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "threads": {"type": "integer", "minimum": 1},
        "model": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["brownian", "jump_diffusion", "alpha_stable"]},
                "dim": {"type": "integer", "minimum": 1},
                "mu": _NUM_OR_LIST,
                "sigma": _NUM_OR_LIST,
                "rate": {"type": "number", "minimum": 0},
                "jump_mean": _NUM_OR_LIST,
                "jump_std": _NUM_OR_LIST,
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 2},
                "scale": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "truncation": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "inner_cutoff": {"type": "number", "exclusiveMinimum": 0},
                "quad_radius": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "jump_cutoff": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "clock": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["identity", "table"]},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "n_steps": {"type": "integer", "minimum": 1},
                "times": {"type": "array", "items": _NUM, "minItems": 2},
                "values": {"type": "array", "items": _NUM, "minItems": 2},
                "v_max": _NUM,
            },
        },
        "driver": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["zero", "constant", "linear", "sin_cos", "expression"]},
                "params": {"type": "object", "additionalProperties": _NUM},
                "f": {"type": "string"},
                "g": {"type": "string"},
                "K_y": {"type": "number", "minimum": 0},
                "K_z": {"type": "number", "minimum": 0},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lam": {"type": ["number", "null"], "minimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "n_paths": {"type": "integer", "minimum": 2},
                "ridge": {"type": ["number", "null"], "minimum": 0},
                "basis": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "family": {"enum": ["polynomial", "local_partition"]},
                        "degree": {"type": "integer", "minimum": 0},
                        "n_bins": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "nodes": {
            "oneOf": [
                {"type": "array", "items": _NODE},
                {
                    "type": "object",
                    "required": ["s", "x"],
                    "additionalProperties": False,
                    "properties": {
                        "s": {"type": "array", "items": {"type": "number", "minimum": 0}},
                        "x": {"type": "array", "items": _NUM_OR_LIST},
                    },
                },
            ]
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "u": {"type": "string"},
                "oracle": {
                    "type": "object",
                    "required": ["kind"],
                    "properties": {"kind": {"enum": list(ORACLE_KINDS)}},
                },
                "shift": _NUM,
                "start": _NODE,
                "path_budget": {"type": "number", "minimum": 0},
                "bracket_constant": {"type": "number", "minimum": 0},
                "markov": {"type": "boolean"},
                "residual_tol": {"type": "number", "minimum": 0},
            },
        },
        "gamma_check": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "functions": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "points": {"type": "array", "items": _NODE, "minItems": 1},
            },
        },
    },
}

_DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "solver": {"lam": None, "max_iters": 20, "tol": 1e-4, "n_paths": 10000, "ridge": None},
    "verify": {"path_budget": 0.05, "bracket_constant": 3.0, "markov": False, "residual_tol": 1e-6, "shift": 0.0},
}


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def validate(config: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = list(validator.iter_errors(config))
    if errors:
        # the deepest error names the most specific field
        err = max(errors, key=lambda e: len(e.absolute_path))
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(err.message, path)


def resolve(config: dict) -> dict:
    """Validate and fill defaults; the result is what gets echoed."""
    validate(config)
    cfg = copy.deepcopy(config)
    cfg.setdefault("seed", _DEFAULTS["seed"])
    cfg.setdefault("threads", _DEFAULTS["threads"])
    solver = {**_DEFAULTS["solver"], **cfg.get("solver", {})}
    clock = cfg["clock"]
    model = cfg["model"]
    model.setdefault("dim", 1)
    dim = model["dim"]
    solver["basis"] = {
        "family": "polynomial", "degree": 4 if dim == 1 else 2, "n_bins": 4,
        **solver.get("basis", {}),
    }
    cfg["solver"] = solver
    if clock["kind"] == "identity":
        clock.setdefault("T", 1.0)
        clock.setdefault("n_steps", 50)
    elif "times" not in clock or "values" not in clock:
        raise ConfigError("a table clock needs 'times' and 'values'", "clock.times")
    kind = model["kind"]
    if kind in ("brownian", "jump_diffusion"):
        model.setdefault("mu", 0.0)
        model.setdefault("sigma", 1.0)
    if kind == "jump_diffusion":
        model.setdefault("rate", 1.0)
        model.setdefault("jump_mean", 0.0)
        model.setdefault("jump_std", 1.0)
    if kind == "alpha_stable":
        if "alpha" not in model:
            raise ConfigError("alpha_stable needs 'alpha'", "model.alpha")
        if dim != 1:
            raise ConfigError("alpha_stable is one-dimensional", "model.dim")
        model.setdefault("scale", None)
        model.setdefault("truncation", None)
        model.setdefault("inner_cutoff", 1e-6)
        model.setdefault("quad_radius", None)
        model.setdefault("jump_cutoff", 0.05)
    drv = cfg["driver"]
    drv.setdefault("params", {})
    drv.setdefault("g", "0")
    if drv["name"] == "expression":
        for key in ("f", "K_y", "K_z"):
            if key not in drv:
                raise ConfigError(f"expression drivers need '{key}'", f"driver.{key}")
    if "verify" in cfg:
        cfg["verify"] = {**_DEFAULTS["verify"], **cfg["verify"]}
    return cfg


def build_clock(spec: dict) -> Clock:
    try:
        if spec["kind"] == "identity":
            return Clock.uniform(spec["T"], spec["n_steps"])
        clock = Clock.from_table(spec["times"], spec["values"], spec.get("n_steps"))
        if "v_max" in spec:
            clock = Clock(clock.times, clock.values, spec["v_max"])
        return clock
    except ValueError as exc:
        raise ConfigError(str(exc), "clock") from None


def build_model(spec: dict, clock: Clock):
    kind = spec["kind"]
    try:
        if kind == "brownian":
            return BrownianDiffusion(clock, spec["mu"], spec["sigma"], spec["dim"])
        if kind == "jump_diffusion":
            return JumpDiffusion(
                clock, spec["mu"], spec["sigma"], spec["rate"], spec["jump_mean"], spec["jump_std"], spec["dim"]
            )
        if spec["dim"] != 1:
            raise ConfigError("alpha_stable is one-dimensional", "model.dim")
        return AlphaStable(
            clock,
            spec["alpha"],
            spec["scale"],
            spec["truncation"],
            inner_cutoff=spec["inner_cutoff"],
            quad_radius=spec["quad_radius"],
            jump_cutoff=spec["jump_cutoff"],
        )
    except (ValueError, DomainError) as exc:
        raise ConfigError(str(exc), "model") from None


def _symbols(dim: int) -> dict:
    names = {"t": sp.Symbol("t"), "y": sp.Symbol("y"), "z": sp.Symbol("z")}
    for i in range(dim):
        names[f"x{i + 1}"] = names[f"x_{i + 1}"] = sp.Symbol(f"x{i + 1}")
    if dim == 1:
        names["x"] = names["x1"]
    return names


def parse_expression(text: str, dim: int, field: str, allowed: Sequence[str]) -> sp.Expr:
    names = _symbols(dim)
    try:
        expr = sp.sympify(text, locals=names)
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigError(f"cannot parse {text!r}: {exc}", field) from None
    free = {str(s) for s in expr.free_symbols}
    ok = set(allowed) | ({"x"} if dim == 1 and "x1" in allowed else set())
    bad = free - ok
    if bad:
        raise ConfigError(f"unknown symbols {sorted(bad)} in {text!r}", field)
    return expr


def _lambdify(expr: sp.Expr, args: Sequence[sp.Symbol]):
    fn = sp.lambdify(args, expr, modules="numpy")
    return fn


def _xs(dim: int) -> list:
    return [sp.Symbol(f"x{i + 1}") for i in range(dim)]


def expression_test_function(text: str, dim: int, field: str) -> TestFunction:
    """TestFunction with exact sympy derivatives of ``text`` in ``t, x1..xd``."""
    expr = parse_expression(text, dim, field, ["t"] + [f"x{i + 1}" for i in range(dim)])
    t = sp.Symbol("t")
    xs = _xs(dim)
    args = [t] + xs
    value = _lambdify(expr, args)
    dt = _lambdify(sp.diff(expr, t), args)
    grads = [_lambdify(sp.diff(expr, xi), args) for xi in xs]
    hess = [[_lambdify(sp.diff(expr, xi, xj), args) for xj in xs] for xi in xs]

    def call(fn, tt, x):
        shape = np.shape(x)[:-1]
        out = fn(tt, *[x[..., i] for i in range(dim)])
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    return TestFunction(
        lambda tt, x: call(value, tt, x),
        dt=lambda tt, x: call(dt, tt, x),
        grad=lambda tt, x: np.stack([call(g, tt, x) for g in grads], axis=-1),
        hess=lambda tt, x: np.stack([np.stack([call(h, tt, x) for h in row], -1) for row in hess], -2),
        dim=dim,
        name=text,
    )


def build_driver(spec: dict, dim: int) -> Driver:
    g_expr = parse_expression(spec["g"], dim, "driver.g", [f"x{i + 1}" for i in range(dim)])
    g_fn = _lambdify(g_expr, _xs(dim))

    def g(x):
        return np.broadcast_to(np.asarray(g_fn(*[x[:, i] for i in range(dim)]), dtype=float), x.shape[:1])

    p = spec["params"]
    name = spec["name"]
    if name == "zero":
        return Driver(lambda t, x, y, z: np.zeros_like(y), g, 0.0, 0.0, "zero", True, p)
    if name == "constant":
        c = float(p.get("c", 1.0))
        return Driver(lambda t, x, y, z: np.full_like(y, c), g, 0.0, 0.0, f"constant({c})", True, p)
    if name == "linear":
        a, b = float(p.get("a", -1.0)), float(p.get("b", 0.0))
        return Driver(lambda t, x, y, z: a * y + b * z, g, abs(a), abs(b), f"linear({a},{b})", a == 0 and b == 0, p)
    if name == "sin_cos":
        a, b = float(p.get("a", 1.0)), float(p.get("b", 0.5))
        return Driver(
            lambda t, x, y, z: a * np.sin(y) + b * np.cos(z), g, abs(a), abs(b), f"sin_cos({a},{b})", False, p
        )
    allowed = ["t", "y", "z"] + [f"x{i + 1}" for i in range(dim)]
    f_expr = parse_expression(spec["f"], dim, "driver.f", allowed)
    y, z, t = sp.symbols("y z t")
    f_fn = _lambdify(f_expr, [t, *_xs(dim), y, z])
    free = {str(s) for s in f_expr.free_symbols}

    def f(tt, x, yy, zz):
        return f_fn(tt, *[x[:, i] for i in range(dim)], yy, zz)

    return Driver(f, g, float(spec["K_y"]), float(spec["K_z"]), spec["f"], not ({"y", "z"} & free), p)


def build_solver_config(cfg: dict) -> SolverConfig:
    s = cfg["solver"]
    b = s["basis"]
    return SolverConfig(
        lam=s["lam"],
        max_iters=s["max_iters"],
        tol=s["tol"],
        n_paths=s["n_paths"],
        seed=cfg["seed"],
        ridge=s["ridge"],
        basis=RegressionBasis(b["family"], b["degree"], b["n_bins"]),
        threads=cfg["threads"],
    )


def build_nodes(cfg: dict, clock: Clock, dim: int) -> list:
    spec = cfg.get("nodes")
    if spec is None:
        raise ConfigError("no evaluation nodes given", "nodes")
    if isinstance(spec, dict):
        nodes = [(s, x) for s in spec["s"] for x in spec["x"]]
    else:
        nodes = [(n["s"], n["x"]) for n in spec]
    if not nodes:
        raise ConfigError("node list is empty", "nodes")
    for i, (s, x) in enumerate(nodes):
        try:
            clock.index_of(s)
        except AlignmentError as exc:
            raise ConfigError(str(exc), f"nodes.{i}.s") from None
        if np.size(x) != dim:
            raise ConfigError(f"state has {np.size(x)} coordinates, model has {dim}", f"nodes.{i}.x")
    return nodes


def load_config(path: str | Path, args: argparse.Namespace) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(str(exc), "--config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "--config") from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", "<root>")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "paths", None) is not None:
        raw.setdefault("solver", {})["n_paths"] = args.paths
    if getattr(args, "threads", None) is not None:
        raw["threads"] = args.threads
    return resolve(raw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _echo(cfg: dict, out: Path) -> None:
    write_json(out / "config_echo.json", cfg)


def run_solve(cfg: dict, out: Path) -> int:
    clock = build_clock(cfg["clock"])
    model = build_model(cfg["model"], clock)
    driver = build_driver(cfg["driver"], model.dim)
    solver = build_solver_config(cfg)
    nodes = build_nodes(cfg, clock, model.dim)
    _echo(cfg, out)
    field = extract_solution(driver, model, nodes, solver)
    field.to_csv(out / "solution.csv")
    payload = {
        "nodes": [
            {
                "s": float(field.s[i]),
                "x": field.x[i].tolist(),
                "report": None if r is None else r.to_dict(),
                "error": field.errors.get(i),
            }
            for i, r in enumerate(field.reports)
        ],
        "converged": field.ok,
    }
    write_json(out / "convergence.json", payload)
    for i, msg in field.errors.items():
        print(f"node {i}: {msg}", file=sys.stderr)
    return EXIT_OK if field.ok else EXIT_FAILED


def _verify_function(vcfg: dict, dim: int, T: float) -> tuple[TestFunction, Oracle | None]:
    if "oracle" in vcfg:
        o = dict(vcfg["oracle"])
        try:
            oracle = Oracle(T=T, **o)
        except TypeError as exc:
            raise ConfigError(str(exc), "verify.oracle") from None
        u = oracle.test_function()
    elif "u" in vcfg:
        oracle = None
        u = expression_test_function(vcfg["u"], dim, "verify.u")
    else:
        raise ConfigError("verify needs 'u' or 'oracle'", "verify")
    if vcfg["shift"]:
        u = u + vcfg["shift"]
    return u, oracle


def run_verify(cfg: dict, out: Path) -> int:
    if "verify" not in cfg:
        raise ConfigError("missing verify section", "verify")
    clock = build_clock(cfg["clock"])
    model = build_model(cfg["model"], clock)
    driver = build_driver(cfg["driver"], model.dim)
    solver = build_solver_config(cfg)
    nodes = build_nodes(cfg, clock, model.dim)
    vcfg = cfg["verify"]
    u, _ = _verify_function(vcfg, model.dim, clock.T)
    start = vcfg.get("start", {"s": nodes[0][0], "x": nodes[0][1]})
    _echo(cfg, out)
    res = classical_residual(u, model, driver, nodes)
    res.to_csv(out / "residual.csv")
    residual_max = float(np.max(np.abs(res.residual)))
    residual_ok = residual_max <= vcfg["residual_tol"] and res.terminal_mismatch <= vcfg["residual_tol"]
    eq = verify_classical_vs_bsde(
        u, driver, model, (start["s"], start["x"]), solver, vcfg["path_budget"], vcfg["bracket_constant"]
    )
    report = {
        "residual_max": residual_max,
        "terminal_mismatch": res.terminal_mismatch,
        "residual_ok": residual_ok,
        "equivalence": eq.to_dict(),
    }
    passed = residual_ok and eq.passed
    if vcfg["markov"] and cfg["model"]["kind"] == "brownian":
        ens = sample_paths(model, (start["s"], start["x"]), solver.n_paths, solver.seed, threads=solver.threads)
        target = driver.terminal(ens.paths[:, -1, :])
        mk = markov_check(ens, target, (ens.start_index + clock.n_cells) // 2 + 1)
        report["markov"] = dict(mk.__dict__)
        passed = passed and mk.passed
    report["passed"] = passed
    write_json(out / "verify.json", report)
    print(f"verify: {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAILED


def run_gamma_check(cfg: dict, out: Path) -> int:
    clock = build_clock(cfg["clock"])
    model = build_model(cfg["model"], clock)
    gcfg = cfg.get("gamma_check")
    if not gcfg:
        raise ConfigError("missing gamma_check section", "gamma_check")
    dim = model.dim
    funcs = [expression_test_function(s, dim, f"gamma_check.functions.{i}") for i, s in enumerate(gcfg["functions"])]
    pts = gcfg["points"]
    _echo(cfg, out)
    header = ["t"] + [f"x_{i + 1}" for i in range(dim)] + ["phi", "psi", "a_phi", "gamma"]
    rows = []
    asym = 0.0
    for p in pts:
        t = float(p["s"])
        x = np.broadcast_to(np.asarray(p["x"], dtype=float).reshape(-1), (dim,))[None, :]
        for i, phi in enumerate(funcs):
            a_phi = float(apply_generator(model, phi, t, x)[0])
            for j, psi in enumerate(funcs):
                g = float(carre_du_champ(model, phi, psi, t, x)[0])
                if j < i:
                    asym = max(asym, abs(g - float(carre_du_champ(model, psi, phi, t, x)[0])))
                rows.append((t, *x[0], i, j, a_phi, g))
    write_csv(out / "gamma.csv", header, rows)
    write_json(out / "gamma_check.json", {"max_asymmetry": asym, "functions": gcfg["functions"]})
    return EXIT_OK


def run_decompose(a_file: str, b_file: str, out: Path) -> int:
    try:
        A = DiscreteMeasurePath.from_csv(a_file)
        B = DiscreteMeasurePath.from_csv(b_file)
    except OSError as exc:
        raise ConfigError(str(exc), "measure file") from None
    except (ValueError, DomainError) as exc:
        raise ConfigError(str(exc), "measure file") from None
    try:
        dec = lebesgue_decompose(A, B)
    except AlignmentError as exc:
        raise ConfigError(str(exc), "measure grid") from None
    except DomainError as exc:
        raise ConfigError(str(exc), "B") from None
    write_csv(out / "density.csv", ["cell_index", "density", "K"], zip(A.cells, dec.density, dec.indicator))
    dec.singular.to_csv(out / "singular.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsdelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--paths", type=int, help="override solver.n_paths")
        p.add_argument("--threads", type=int, help="worker threads for path simulation")

    common(sub.add_parser("solve", help="solve at the configured nodes"))
    common(sub.add_parser("verify", help="check a candidate classical solution"))
    common(sub.add_parser("gamma-check", help="tabulate a(phi) and Gamma(phi, psi)"))
    dec = sub.add_parser("decompose", help="Lebesgue decomposition of measure CSV files")
    dec.add_argument("A", help="measure to decompose (cell_index,pos_mass,neg_mass)")
    dec.add_argument("B", help="nonnegative reference measure")
    dec.add_argument("--out", default="out")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(CONFIG_SCHEMA, indent=2))
        return EXIT_OK
    out = Path(args.out)
    try:
        if args.command == "decompose":
            return run_decompose(args.A, args.B, out)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("must be >= 1", "--threads")
        if args.paths is not None and args.paths < 2:
            raise ConfigError("must be >= 2", "--paths")
        cfg = load_config(args.config, args)
        runner = {"solve": run_solve, "verify": run_verify, "gamma-check": run_gamma_check}[args.command]
        return runner(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
