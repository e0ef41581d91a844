"""The deterministic pair ``(u, v)`` behind Markovian BSDE solutions.

``u(s, x)`` is read off as ``Y_s`` of a solve started at ``(s, x)`` and
``v(s, x)`` as the square root of the bracket density on the first cell.
A candidate classical solution can be checked against the equation
``a(u) + f(t, x, u, sqrt(Gamma(u, u))) = 0`` directly (residual) and against
the solver on a common path ensemble.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import write_csv
from .bsde_solver import Driver, SolverConfig, solve_on_ensemble
from .errors import AlignmentError, ConvergenceError
from .forward_models import (
    ForwardModel,
    TestFunction,
    apply_generator,
    carre_du_champ,
    sample_paths,
)
from .verification import BracketReport, bracket_check


def node_seed(seed: int, index: int, replica: int = 0) -> int:
    """64-bit seed for node ``index`` derived from the run seed."""
    state = np.random.SeedSequence([int(seed), int(index), int(replica)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _node_state(x, dim: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=float).reshape(-1), (dim,)).copy()


@dataclass
class SolutionField:
    s: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    stderr_u: np.ndarray
    stderr_v: np.ndarray
    iterations: list
    errors: dict = field(default_factory=dict)
    agreement_z: list | None = None
    provenance: dict = field(default_factory=dict)
    reports: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_csv(self, path: str | Path) -> None:
        d = self.x.shape[1]
        header = ["s"] + [f"x_{i + 1}" for i in range(d)] + ["u", "v", "stderr_u"]
        rows = (
            (self.s[i], *self.x[i], self.u[i], self.v[i], self.stderr_u[i]) for i in range(self.s.size)
        )
        write_csv(path, header, rows)


def extract_solution(
    driver: Driver,
    model: ForwardModel,
    nodes: Sequence[tuple[float, object]],
    config: SolverConfig | None = None,
    independence_check: bool = False,
) -> SolutionField:
    """Solve from every node with its own derived seed and collect ``(u, v)``.

    Errors are recorded per node (``errors[i]``) rather than raised; failed
    nodes carry NaN values. Nodes at the horizon return ``u = g(x)``, ``v = 0``.
    """
    config = SolverConfig() if config is None else config
    clock = model.clock
    m = len(nodes)
    d = model.dim
    s = np.empty(m)
    xs = np.empty((m, d))
    out = {k: np.full(m, math.nan) for k in ("u", "v", "su", "sv")}
    iterations: list = [0] * m
    errors: dict = {}
    agreement: list = []
    reports: list = []
    for i, (si, xi) in enumerate(nodes):
        s[i] = si
        xs[i] = _node_state(xi, d)
        try:
            k = clock.index_of(si)
            if k == clock.n_cells:
                out["u"][i] = float(driver.terminal(xs[i][None, :])[0])
                out["v"][i] = out["su"][i] = out["sv"][i] = 0.0
                reports.append(None)
                continue
            u, se, rep = _solve_node(driver, model, si, xs[i], config, node_seed(config.seed, i))
            out["u"][i], out["su"][i] = u, se
            out["v"][i], out["sv"][i] = rep.v, rep.stderr_v
            iterations[i] = rep.iterations
            reports.append(rep)
            if independence_check:
                u2, se2, _ = _solve_node(driver, model, si, xs[i], config, node_seed(config.seed, i, 1))
                agreement.append(abs(u - u2) / math.hypot(se, se2) if se + se2 > 0 else 0.0)
        except (AlignmentError, ConvergenceError, ArithmeticError, ValueError) as exc:
            errors[i] = f"{type(exc).__name__}: {exc}"
            reports.append(getattr(exc, "report", None))
    return SolutionField(
        s,
        xs,
        out["u"],
        out["v"],
        out["su"],
        out["sv"],
        iterations,
        errors,
        agreement if independence_check else None,
        {"seed": config.seed, "n_paths": config.n_paths, "model": model.config(), "driver": driver.name},
        reports,
    )


def _solve_node(driver, model, s, x, config, seed):
    ens = sample_paths(model, (s, x), config.n_paths, seed, threads=config.threads)
    _, rep = solve_on_ensemble(driver, ens, config)
    return rep.u, rep.stderr_u, rep


@dataclass
class ResidualField:
    t: np.ndarray
    x: np.ndarray
    residual: np.ndarray
    terminal_mismatch: float
    clipped: int = 0

    def to_csv(self, path: str | Path) -> None:
        d = self.x.shape[1]
        header = ["t"] + [f"x_{i + 1}" for i in range(d)] + ["residual"]
        write_csv(path, header, ((self.t[i], *self.x[i], self.residual[i]) for i in range(self.t.size)))


def classical_residual(
    u: TestFunction, model: ForwardModel, driver: Driver, nodes: Sequence[tuple[float, object]]
) -> ResidualField:
    """``a(u) + f(t, x, u, sqrt(Gamma(u, u)))`` on nodes, plus ``max |u(T, x) - g(x)|``."""
    d = model.dim
    t = np.array([float(n[0]) for n in nodes])
    xs = np.array([_node_state(n[1], d) for n in nodes]).reshape(len(nodes), d)
    res = np.empty(t.size)
    clipped = 0
    for i in range(t.size):
        xi = xs[i : i + 1]
        au = apply_generator(model, u, t[i], xi)[0]
        gam = carre_du_champ(model, u, u, t[i], xi)[0]
        y = u(t[i], xi)
        if gam < 0:
            # rounding-level negatives are expected when grad u vanishes
            if gam < -1e-10 * (1.0 + float(y[0]) ** 2):
                clipped += 1
            gam = 0.0
        res[i] = au + driver.evaluate(t[i], xi, y, np.sqrt([gam]))[0]
    if clipped:
        warnings.warn(f"{clipped} negative Gamma(u, u) values clipped to 0", RuntimeWarning, stacklevel=2)
    T = model.clock.T
    uniq = np.unique(xs, axis=0)
    mismatch = float(np.max(np.abs(u(T, uniq) - driver.terminal(uniq)))) if uniq.size else 0.0
    return ResidualField(t, xs, res, mismatch, clipped)


@dataclass
class EquivalenceReport:
    passed: bool
    path_passed: bool
    bracket_passed: bool
    sup_mean_abs_diff: float
    stderr_at_sup: float
    path_budget: float
    worst_time: float
    bracket: BracketReport
    terminal_mismatch: float
    iterations: int

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["bracket"] = self.bracket.to_dict()
        return out


def verify_classical_vs_bsde(
    u: TestFunction,
    driver: Driver,
    model: ForwardModel,
    start: tuple[float, object],
    config: SolverConfig | None = None,
    path_budget: float = 0.05,
    bracket_constant: float = 3.0,
) -> EquivalenceReport:
    """Compare ``u(t, X_t)`` with the solver's ``Y_t`` and ``M[u]`` brackets on one ensemble.

    Path check: ``max_k (mean |u(t_k, X_k) - Y_k| - 3 SE_k) <= path_budget``.
    Bracket check: ``sum (dM[u])^2`` against ``sum Gamma(u, u) dV`` with bias
    budget ``bracket_constant * max dt * (V(T) - V(s))``.
    """
    config = SolverConfig() if config is None else config
    ens = sample_paths(model, start, config.n_paths, config.seed, threads=config.threads)
    it, rep = solve_on_ensemble(driver, ens, config, raise_on_failure=False)
    clock = model.clock
    k0 = ens.start_index
    worst, worst_se, worst_t, excess = 0.0, 0.0, float(clock.times[k0]), -math.inf
    n = ens.n_paths
    for k in range(k0, clock.n_cells + 1):
        diff = np.abs(u(clock.times[k], ens.paths[:, k, :]) - it.Y[:, k])
        mean = float(diff.mean())
        se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        if mean - 3 * se > excess:
            excess, worst, worst_se, worst_t = mean - 3 * se, mean, se, float(clock.times[k])
    path_ok = excess <= path_budget and rep.converged
    span = float(clock.values[-1] - clock.values[k0])
    budget = bracket_constant * float(np.max(clock.dt)) * span
    br = bracket_check(model, u, u, ens, budget)
    T = clock.T
    mismatch = float(np.max(np.abs(u(T, ens.paths[:, -1, :]) - driver.terminal(ens.paths[:, -1, :]))))
    return EquivalenceReport(
        path_ok and br.passed,
        path_ok,
        br.passed,
        worst,
        worst_se,
        path_budget,
        worst_t,
        br,
        mismatch,
        rep.iterations,
    )


def estimate_potential(
    model: ForwardModel,
    start: tuple[float, object],
    A: Callable,
    n_paths: int,
    seed: int,
    threads: int = 1,
) -> tuple[float, float]:
    """Mean and standard error of ``sum_k 1_A(t_k, X_k) dV_k`` over cells after ``s``.

    ``A(t, x)`` receives a time and an ``(n, d)`` array of states and returns
    a boolean (or 0/1) array of length ``n``.
    """
    ens = sample_paths(model, start, n_paths, seed, threads=threads)
    clock = model.clock
    occ = np.zeros(n_paths)
    for k in range(ens.start_index, clock.n_cells):
        hit = np.broadcast_to(np.asarray(A(clock.times[k], ens.paths[:, k, :]), dtype=float), (n_paths,))
        occ += hit * clock.increments[k]
    se = float(occ.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return float(occ.mean()), se
