"""Picard iteration for Markovian BSDEs driven by a clock ``V``.

On a fixed path ensemble the map ``(U, N) -> (Y, M)`` is

* ``Y_k = E[g(X_N) + sum_{j >= k} f_j dV_j | X_k]`` (regression),
* ``dM_j = Y_{j+1} - Y_j + f_j dV_j``,
* ``Z^2_j = E[dM_j^2 / dV_j | X_j]`` clipped at 0,

with ``f_j = f(t_j, X_j, U_j, sqrt(Z^2_j of N))`` evaluated at the left end of
cell ``j`` (0-based cells ``(t_j, t_{j+1}]``). Iterates start from ``(0, 0)``
and stop when the weighted squared norm of successive differences drops
below ``tol``.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .clock_measure import Clock
from .errors import ConvergenceError, DomainError, NumericError
from .forward_models import ForwardModel, PathEnsemble, sample_paths
from .regression import FittedRegression, RegressionBasis, design_matrix, fit


@dataclass
class Driver:
    """Generator ``f(t, x, y, z)`` with terminal function ``g(x)``.

    Both callables are vectorized over paths: ``x`` has shape ``(n, d)``,
    ``y`` and ``z`` shape ``(n,)``. ``yz_free`` marks drivers that ignore
    ``(y, z)``; for them one Picard step is already the fixed point.
    """

    f: Callable
    g: Callable
    K_y: float
    K_z: float
    name: str = "driver"
    yz_free: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K_y < 0 or self.K_z < 0:
            raise DomainError("Lipschitz constants must be nonnegative")

    @property
    def default_lambda(self) -> float:
        return 1.0 + 2.0 * (self.K_y**2 + self.K_z**2)

    def evaluate(self, t: float, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self.f(t, x, y, z), dtype=float), y.shape)
        bad = ~np.isfinite(out)
        if bad.any():
            i = int(np.argmax(bad))
            raise NumericError(
                f"driver {self.name} returned {out[i]} at t={t}, x={x[i].tolist()}, y={y[i]}, z={z[i]}"
            )
        return out

    def terminal(self, x: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self.g(x), dtype=float), x.shape[:1])
        if not np.all(np.isfinite(out)):
            raise NumericError(f"terminal condition of {self.name} is not finite on the sample")
        return out

    def check_lipschitz(
        self, rng: np.random.Generator, T: float = 1.0, dim: int = 1, n: int = 2000, scale: float = 3.0
    ) -> float:
        """Spot-check ``|f(y,z) - f(y',z')| <= K_y |y-y'| + K_z |z-z'|``; return the worst ratio."""
        t = rng.uniform(0, T, n)
        x = rng.normal(0, scale, (n, dim))
        y, y2 = rng.normal(0, scale, (2, n))
        z, z2 = np.abs(rng.normal(0, scale, (2, n)))
        worst = 0.0
        for i in range(n):
            xi = x[i : i + 1]
            a = self.evaluate(t[i], xi, y[i : i + 1], z[i : i + 1])[0]
            b = self.evaluate(t[i], xi, y2[i : i + 1], z2[i : i + 1])[0]
            bound = self.K_y * abs(y[i] - y2[i]) + self.K_z * abs(z[i] - z2[i])
            if abs(a - b) > bound * (1 + 1e-9) + 1e-12:
                raise DomainError(
                    f"driver {self.name} violates its Lipschitz constants at t={t[i]}, x={xi[0].tolist()}"
                )
            if bound > 0:
                worst = max(worst, abs(a - b) / bound)
        return worst


@dataclass
class SolverConfig:
    lam: float | None = None
    max_iters: int = 20
    tol: float = 1e-4
    n_paths: int = 10_000
    seed: int = 0
    ridge: float | None = None
    basis: RegressionBasis | None = None
    clip: str = "zero"
    threads: int = 1

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise DomainError("lambda must be >= 0")
        if self.tol <= 0:
            raise DomainError("tol must be > 0")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if self.clip != "zero":
            raise DomainError(f"unsupported clip policy {self.clip!r}")


@dataclass(eq=False)
class BsdeIterate:
    """One Picard iterate on a fixed ensemble.

    ``Y`` has shape ``(n, N + 1)``; ``dM`` and ``zsq`` have shape ``(n, N)``,
    column ``j`` belonging to the cell ``(t_j, t_{j+1}]``.
    """

    Y: np.ndarray
    dM: np.ndarray
    zsq: np.ndarray
    k: int = 0
    fits: list = field(default_factory=list, repr=False)
    clip_count: int = 0
    singular_mass: float = 0.0
    targets_start: np.ndarray | None = field(default=None, repr=False)
    targets_next: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zero(cls, ensemble: PathEnsemble) -> BsdeIterate:
        n, m, _ = ensemble.paths.shape
        return cls(np.zeros((n, m)), np.zeros((n, m - 1)), np.zeros((n, m - 1)))

    def __sub__(self, other: BsdeIterate) -> BsdeIterate:
        return BsdeIterate(self.Y - other.Y, self.dM - other.dM, self.zsq - other.zsq, self.k)


@dataclass
class ConvergenceReport:
    iterations: int
    norms: list
    ratios: list
    clip_counts: list
    wall_time: float
    converged: bool
    lam: float
    tol: float
    u: float = math.nan
    stderr_u: float = math.nan
    v: float = math.nan
    stderr_v: float = math.nan
    singular_mass: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def picard_step(
    prev: BsdeIterate,
    ensemble: PathEnsemble,
    driver: Driver,
    clock: Clock | None = None,
    basis: RegressionBasis | None = None,
    ridge: float | None = None,
) -> BsdeIterate:
    """Apply the Picard map once to ``prev`` on ``ensemble``."""
    clock = ensemble.clock if clock is None else clock
    if clock != ensemble.clock:
        raise DomainError("iterate and ensemble use different clocks")
    X = ensemble.paths
    n, m, d = X.shape
    N = m - 1
    k0 = ensemble.start_index
    basis = RegressionBasis.default(d) if basis is None else basis
    dV = clock.increments
    times = clock.times

    f = np.zeros((n, N))
    for j in range(k0, N):
        if dV[j] > 0:
            z = np.sqrt(np.maximum(prev.zsq[:, j], 0.0))
            f[:, j] = driver.evaluate(times[j], X[:, j, :], prev.Y[:, j], z)

    Y = np.empty((n, m))
    fits: list[FittedRegression | None] = [None] * m
    target = driver.terminal(X[:, N, :]).copy()
    Y[:, N] = target
    target_next = target.copy() if k0 == N - 1 else None
    for k in range(N - 1, k0 - 1, -1):
        if k == k0:
            target_next = target.copy()
        target += f[:, k] * dV[k]
        fk = fit(target, X[:, k, :], basis, ridge)
        fits[k] = fk
        Y[:, k] = fk.fitted
    Y[:, :k0] = Y[:, k0 : k0 + 1]

    dM = np.zeros((n, N))
    dM[:, k0:] = Y[:, k0 + 1 :] - Y[:, k0:N] + f[:, k0:] * dV[k0:]

    zsq = np.zeros((n, N))
    clips = 0
    singular = 0.0
    for j in range(k0, N):
        if dV[j] > 0:
            raw = fit(dM[:, j] ** 2 / dV[j], X[:, j, :], basis, ridge).fitted
            clips += int(np.count_nonzero(raw < 0))
            zsq[:, j] = np.maximum(raw, 0.0)
        else:
            singular += float(np.mean(dM[:, j] ** 2))
    return BsdeIterate(Y, dM, zsq, prev.k + 1, fits, clips, singular, target.copy(), target_next)


def weighted_norm(it: BsdeIterate, clock: Clock, lam: float, start_index: int = 0) -> float:
    """Squared norm ``mean_paths sum_j e^{lam V_j} (Y_j^2 dV_j + dM_j^2)`` over cells ``j >= start``."""
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    w = np.exp(lam * clock.values[:-1])
    w[:start_index] = 0.0
    per_path = (it.Y[:, :-1] ** 2 * clock.increments + it.dM**2) @ w
    return float(per_path.mean())


def solve_on_ensemble(
    driver: Driver, ensemble: PathEnsemble, config: SolverConfig | None = None, raise_on_failure: bool = True
) -> tuple[BsdeIterate, ConvergenceReport]:
    """Iterate the Picard map from ``(0, 0)`` on a given ensemble."""
    config = SolverConfig() if config is None else config
    clock = ensemble.clock
    lam = driver.default_lambda if config.lam is None else config.lam
    basis = RegressionBasis.default(ensemble.paths.shape[2]) if config.basis is None else config.basis
    t0 = time.perf_counter()
    current = BsdeIterate.zero(ensemble)
    norms: list[float] = []
    clips: list[int] = []
    converged = False
    for _ in range(config.max_iters):
        nxt = picard_step(current, ensemble, driver, clock, basis, config.ridge)
        norms.append(weighted_norm(nxt - current, clock, lam, ensemble.start_index))
        clips.append(nxt.clip_count)
        current = nxt
        if norms[-1] < config.tol or driver.yz_free:
            converged = True
            break
    ratios = [b / a if a > 0 else (0.0 if b == 0 else math.inf) for a, b in zip(norms[:-1], norms[1:])]
    report = ConvergenceReport(
        iterations=len(norms),
        norms=norms,
        ratios=ratios,
        clip_counts=clips,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        lam=lam,
        tol=config.tol,
        singular_mass=current.singular_mass,
    )
    _fill_start_values(report, current, ensemble)
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"Picard iteration did not reach tol={config.tol} in {config.max_iters} steps; "
            f"ratios {['%.3g' % r for r in ratios]}",
            report,
        )
    return current, report


def _fill_start_values(report: ConvergenceReport, it: BsdeIterate, ensemble: PathEnsemble) -> None:
    k0 = ensemble.start_index
    n = it.Y.shape[0]
    report.u = float(it.Y[:, k0].mean())
    if it.targets_start is not None:
        report.stderr_u = float(it.targets_start.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    if k0 < it.zsq.shape[1]:
        dV = ensemble.clock.increments[k0]
        z = float(it.zsq[:, k0].mean())
        report.v = math.sqrt(max(z, 0.0))
        if dV > 0 and n > 1 and report.v > 0:
            report.stderr_v = math.sqrt(_zsq_start_variance(it, ensemble, dV)) / (2 * report.v)
    else:
        report.v = 0.0
        report.stderr_v = 0.0


def _zsq_start_variance(it: BsdeIterate, ensemble: PathEnsemble, dV: float) -> float:
    """Variance of ``mean(dM_0^2) / dV`` at the start cell.

    Two sources: the sample mean itself, and the coefficient noise of the
    regression producing ``Y`` one step later. The latter dominates for small
    ``dV`` (it is a gradient estimate from states spread over ``sqrt(dV)``)
    and is propagated with a heteroskedasticity-robust sandwich covariance.
    """
    k0 = ensemble.start_index
    dM = it.dM[:, k0]
    n = dM.size
    var = float((dM**2 / dV).var(ddof=1)) / n
    fk = it.fits[k0 + 1] if k0 + 1 < len(it.fits) else None
    if fk is None or fk.constant or it.targets_next is None:
        return var
    A = design_matrix(fk, ensemble.paths[:, k0 + 1, :])
    resid = it.targets_next - fk.fitted
    bread = np.linalg.pinv(A.T @ A)
    meat = (A * resid[:, None] ** 2).T @ A
    cov = bread @ meat @ bread
    grad = 2.0 * (A - A.mean(axis=0)).T @ dM / (n * dV)
    return var + float(grad @ cov @ grad)


def solve(
    driver: Driver, model: ForwardModel, start: tuple[float, object], config: SolverConfig | None = None
) -> tuple[BsdeIterate, ConvergenceReport]:
    """Simulate ``config.n_paths`` paths from ``start`` and run the Picard iteration."""
    config = SolverConfig() if config is None else config
    ensemble = sample_paths(model, start, config.n_paths, config.seed, threads=config.threads)
    return solve_on_ensemble(driver, ensemble, config)


# ---------------------------------------------------------------------------
# bracket densities and martingale diagnostics
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class BracketDensity:
    """Per-path, per-cell densities ``(d<M>/dV, d<M'>/dV, d<M,M'>/dV)``."""

    mm: np.ndarray
    nn: np.ndarray
    mn: np.ndarray
    singular: np.ndarray  # mean (dM^2, dM'^2, dM dM') on cells with dV = 0
    clip_count: int = 0

    def determinant(self) -> np.ndarray:
        return self.mm * self.nn - self.mn**2


def _psd_project(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Nearest PSD matrix (Frobenius) to ``[[a, c], [c, b]]`` by eigenvalue clipping."""
    mats = np.stack([np.stack([a, c], -1), np.stack([c, b], -1)], -2)
    w, v = np.linalg.eigh(mats)
    clipped = int(np.count_nonzero(w < 0))
    w = np.maximum(w, 0.0)
    proj = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    pa, pb = np.maximum(proj[..., 0, 0], 0.0), np.maximum(proj[..., 1, 1], 0.0)
    bound = np.sqrt(pa * pb)
    pc = np.clip(0.5 * (proj[..., 0, 1] + proj[..., 1, 0]), -bound, bound)
    return pa, pb, pc, clipped


def estimate_bracket_density(
    dM: np.ndarray,
    dM2: np.ndarray,
    ensemble: PathEnsemble,
    clock: Clock | None = None,
    basis: RegressionBasis | None = None,
    ridge: float | None = None,
) -> BracketDensity:
    """Regress the second-moment matrix of ``(dM, dM')/sqrt(dV)`` on ``X_j`` and project to PSD."""
    clock = ensemble.clock if clock is None else clock
    dM, dM2 = np.asarray(dM, dtype=float), np.asarray(dM2, dtype=float)
    if dM.shape != dM2.shape or dM.shape[1] != clock.n_cells:
        raise DomainError("increments must share the ensemble's (paths, cells) shape")
    basis = RegressionBasis.default(ensemble.paths.shape[2]) if basis is None else basis
    n, N = dM.shape
    out = [np.zeros((n, N)) for _ in range(3)]
    singular = np.zeros(3)
    clips = 0
    dV = clock.increments
    for j in range(N):
        a, b = dM[:, j], dM2[:, j]
        if dV[j] == 0:
            singular += [np.mean(a * a), np.mean(b * b), np.mean(a * b)]
            continue
        states = ensemble.paths[:, j, :]
        raw = [fit(e / dV[j], states, basis, ridge).fitted for e in (a * a, b * b, a * b)]
        pa, pb, pc, c = _psd_project(*raw)
        clips += c
        out[0][:, j], out[1][:, j], out[2][:, j] = pa, pb, pc
    return BracketDensity(out[0], out[1], out[2], singular, clips)


@dataclass
class MartingaleDiagnostic:
    """Summary of per-cell tests of ``E[dM_j | X_j] = 0``.

    ``familywise_z`` is the two-sided normal quantile of the Sidak-corrected
    smallest per-cell p-value of the Wald statistic, so it is on the same
    scale as a single standardized deviation; ``passed`` means it is <= 3.
    ``max_standardized`` is the largest |prediction| / SE over paths and cells.
    """

    wald: list
    p_values: list
    max_standardized: float
    familywise_z: float
    passed: bool
    threshold: float = 3.0


def martingale_diagnostic(
    dM: np.ndarray, ensemble: PathEnsemble, basis: RegressionBasis | None = None, threshold: float = 3.0
) -> MartingaleDiagnostic:
    dM = np.asarray(dM, dtype=float)
    n, N = dM.shape
    basis = RegressionBasis.default(ensemble.paths.shape[2]) if basis is None else basis
    walds, pvals, max_std = [], [], 0.0
    for j in range(ensemble.start_index, N):
        y = dM[:, j]
        if not np.any(y):
            walds.append(0.0)
            pvals.append(1.0)
            continue
        states = ensemble.paths[:, j, :]
        A = fit(y, states, basis, ridge=1e-12 * n)
        D = design_matrix(A, states)
        p = D.shape[1]
        resid = y - A.fitted
        dof = max(n - p, 1)
        s2 = float(resid @ resid) / dof
        q, _ = np.linalg.qr(D)
        leverage = np.einsum("ij,ij->i", q, q)
        model_ss = float(A.fitted @ A.fitted)
        if s2 <= 1e-300 * max(1.0, float(y @ y)):
            w = math.inf
            max_std = math.inf
        else:
            w = model_ss / s2
            se = np.sqrt(s2 * leverage)
            max_std = max(max_std, float(np.max(np.abs(A.fitted) / se)))
        walds.append(w)
        pvals.append(float(chi2.sf(w, p)) if math.isfinite(w) else 0.0)
    m = len(pvals)
    if m == 0:
        return MartingaleDiagnostic([], [], 0.0, 0.0, True, threshold)
    p_min = min(pvals)
    p_fw = -math.expm1(m * math.log1p(-p_min)) if p_min < 1 else 1.0
    z = float(norm.isf(p_fw / 2)) if p_fw > 0 else math.inf
    z = max(z, 0.0)
    return MartingaleDiagnostic(walds, pvals, max_std, z, z <= threshold, threshold)
