"""Closed-form oracles and the statistical gates shared by the test suites."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .clock_measure import Clock
from .errors import ConfigError
from .forward_models import (
    BrownianDiffusion,
    ForwardModel,
    PathEnsemble,
    TestFunction,
    carre_du_champ,
    martingale_path,
)
from .regression import RegressionBasis, design_matrix, fit, predict

ORACLE_KINDS = ("heat_quadratic", "linear_driver_ode", "gaussian_moment")


@dataclass(frozen=True)
class Oracle:
    """Closed-form solution of a Brownian (``mu = 0``, constant ``sigma``) problem.

    * ``heat_quadratic``: ``u = x^2 + sigma^2 (T - t)``, ``f = 0``, ``g = x^2``.
    * ``linear_driver_ode``: ``f = c y``, ``g = g0 + g2 x^2``;
      ``u = e^{c (T - t)} (g0 + g2 (x^2 + sigma^2 (T - t)))``.
    * ``gaussian_moment``: ``u = E[X_T^p | X_t = x]``, ``f = 0``, ``g = x^p``.
    """

    kind: str
    T: float = 1.0
    sigma: float = 1.0
    c: float = -1.0
    g0: float = 1.0
    g2: float = 0.0
    p: int = 2
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS:
            raise ConfigError(f"unknown oracle kind {self.kind!r}", "oracle.kind")
        if self.kind == "gaussian_moment" and (self.p < 0 or int(self.p) != self.p):
            raise ConfigError("moment order must be a nonnegative integer", "oracle.p")

    # u, u_t, u_x, u_xx as scalar-array functions of (t, x)
    def _parts(self, t, x):
        s2, T = self.sigma**2, self.T
        tau = T - np.asarray(t, dtype=float)
        if self.kind == "heat_quadratic":
            return x**2 + s2 * tau, -s2 + 0 * x, 2 * x, 2 + 0 * x
        if self.kind == "linear_driver_ode":
            e = np.exp(self.c * tau)
            m = self.g0 + self.g2 * (x**2 + s2 * tau)
            u = e * m
            ut = -self.c * u - e * self.g2 * s2
            return u, ut, e * 2 * self.g2 * x, e * 2 * self.g2 + 0 * x
        p = int(self.p)
        u = ut = ux = uxx = 0 * x
        for j in range(0, p + 1, 2):
            coef = math.comb(p, j) * _double_factorial(j - 1) * s2 ** (j // 2)
            w = tau ** (j // 2)
            dw = -(j // 2) * tau ** (j // 2 - 1) if j else 0.0
            u = u + coef * w * x ** (p - j)
            ut = ut + coef * dw * x ** (p - j)
            if p - j >= 1:
                ux = ux + coef * w * (p - j) * x ** (p - j - 1)
            if p - j >= 2:
                uxx = uxx + coef * w * (p - j) * (p - j - 1) * x ** (p - j - 2)
        return u, ut, ux, uxx

    def test_function(self) -> TestFunction:
        return TestFunction(
            lambda t, x: self._parts(t, x[..., 0])[0],
            dt=lambda t, x: self._parts(t, x[..., 0])[1],
            grad=lambda t, x: self._parts(t, x[..., 0])[2][..., None],
            hess=lambda t, x: self._parts(t, x[..., 0])[3][..., None, None],
            dim=1,
            name=self.kind,
        )

    def driver(self):
        from .bsde_solver import Driver

        if self.kind == "linear_driver_ode":
            c = self.c
            return Driver(
                lambda t, x, y, z: c * y,
                lambda x: self.g0 + self.g2 * x[:, 0] ** 2,
                K_y=abs(c),
                K_z=0.0,
                name=f"linear(c={c})",
            )
        p = 2 if self.kind == "heat_quadratic" else int(self.p)
        return Driver(
            lambda t, x, y, z: np.zeros_like(y),
            lambda x: x[:, 0] ** p,
            K_y=0.0,
            K_z=0.0,
            name="zero",
            yz_free=True,
        )

    def model(self, clock: Clock) -> BrownianDiffusion:
        return BrownianDiffusion(clock, mu=0.0, sigma=self.sigma)

    def self_check(self, n_steps: int = 10, xs=(-1.5, -0.3, 0.0, 0.8, 2.0)) -> float:
        """Largest absolute PDE residual of the oracle on a small node grid."""
        from .pseudo_pde import classical_residual

        clock = Clock.uniform(self.T, n_steps)
        nodes = [(t, x) for t in clock.times[:-1] for x in xs]
        res = classical_residual(self.test_function(), self.model(clock), self.driver(), nodes)
        return max(float(np.max(np.abs(res.residual))), res.terminal_mismatch)


def _double_factorial(n: int) -> int:
    return 1 if n <= 0 else n * _double_factorial(n - 2)


def oracle_value(oracle: Oracle, t, x) -> np.ndarray | float:
    if not isinstance(oracle, Oracle):
        raise ConfigError(f"not an oracle: {oracle!r}", "oracle")
    out = oracle._parts(t, np.asarray(x, dtype=float))[0]
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class CompareReport:
    passed: bool
    entry_passed: list
    deviations: list
    worst_standardized: float
    bias_budget: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def statistical_compare(estimates, ses, truths, bias_budget: float = 0.0) -> CompareReport:
    """Gate ``|estimate - truth| <= 3 SE + bias_budget`` entry-wise (boundary inclusive).

    The bound gets a few ulps of slack so that an estimate sitting exactly on
    it is not rejected because of the rounding in ``estimate - truth``.
    ``worst_standardized`` is ``max (|est - truth| - budget)_+ / SE``.
    """
    est = np.atleast_1d(np.asarray(estimates, dtype=float))
    se = np.atleast_1d(np.asarray(ses, dtype=float))
    tru = np.atleast_1d(np.asarray(truths, dtype=float))
    if not (est.shape == se.shape == tru.shape):
        raise ValueError("estimates, standard errors and truths must have matching lengths")
    dev = np.abs(est - tru)
    slack = 4 * np.finfo(float).eps * np.maximum(np.abs(est), np.abs(tru))
    ok = dev <= 3 * se + bias_budget + slack
    excess = np.maximum(dev - bias_budget - slack, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(excess == 0, 0.0, excess / se)
    worst = float(np.max(z)) if z.size else 0.0
    return CompareReport(bool(np.all(ok)), ok.tolist(), dev.tolist(), worst, float(bias_budget))


@dataclass
class BracketReport:
    """Comparison of ``sum dM[phi] dM[psi]`` with ``sum Gamma(phi, psi) dV`` per path."""

    quadratic_variation: float
    gamma_integral: float
    difference: float
    stderr: float
    budget: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bracket_check(
    model: ForwardModel,
    phi: TestFunction,
    psi: TestFunction,
    ensemble: PathEnsemble,
    bias_budget: float,
) -> BracketReport:
    """Bracket identity on an ensemble, gated at ``3 SE + bias_budget``."""
    dMp = martingale_path(model, phi, ensemble)
    dMq = dMp if psi is phi else martingale_path(model, psi, ensemble)
    qv = np.sum(dMp * dMq, axis=1)
    clock = ensemble.clock
    gam = np.zeros_like(qv)
    for k in range(ensemble.start_index, clock.n_cells):
        dV = clock.increments[k]
        if dV > 0:
            gam += carre_du_champ(model, phi, psi, clock.times[k], ensemble.paths[:, k, :]) * dV
    diff = qv - gam
    n = diff.size
    se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    mean = float(diff.mean())
    return BracketReport(
        float(qv.mean()), float(gam.mean()), mean, se, float(bias_budget), abs(mean) <= 3 * se + bias_budget
    )


@dataclass
class MarkovReport:
    mse_state_only: float
    mse_full_history: float
    paired_z: float
    passed: bool
    level: float = 0.01


def markov_check(
    ensemble: PathEnsemble,
    target,
    k: int,
    basis: RegressionBasis | None = None,
    history: int | None = None,
    level: float = 0.01,
) -> MarkovReport:
    """Does the past beyond ``X_{t_k}`` help predict ``target``?

    Fits ``E[target | X_k]`` and ``E[target | X_1, ..., X_k]`` (affine in the
    extra history, plus ``basis`` in ``X_k``) on one half of the paths and
    compares squared prediction errors on the other half with a paired
    two-sided z-test at ``level``.
    """
    X = ensemble.paths
    n = X.shape[0]
    y = np.asarray(target, dtype=float)
    basis = RegressionBasis("polynomial", degree=2) if basis is None else basis
    lo = max(ensemble.start_index + 1, 1)
    first = lo if history is None else max(lo, k - history)
    past = X[:, first:k, :].reshape(n, -1)
    half = n // 2
    train, test = slice(0, half), slice(half, n)
    base = fit(y[train], X[train, k, :], basis, ridge=0.0)
    pred_base = predict(base, X[test, k, :])
    # joint least squares on the X_k basis plus the earlier states
    D_train = np.concatenate([design_matrix(base, X[train, k, :]), past[train]], axis=1)
    D_test = np.concatenate([design_matrix(base, X[test, k, :]), past[test]], axis=1)
    beta = np.linalg.lstsq(D_train, y[train], rcond=None)[0]
    pred_full = D_test @ beta
    e_base = (y[test] - pred_base) ** 2
    e_full = (y[test] - pred_full) ** 2
    d = e_base - e_full
    se = d.std(ddof=1) / math.sqrt(d.size)
    z = float(d.mean() / se) if se > 0 else 0.0
    crit = NormalDist().inv_cdf(1 - level / 2)
    return MarkovReport(float(e_base.mean()), float(e_full.mean()), z, abs(z) <= crit, level)
