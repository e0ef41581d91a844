"""Forward Markov models: path simulation, generator ``a`` and carre du champ ``Gamma``.

Three model families are provided, all driven by a :class:`Clock` ``V``:

* :class:`BrownianDiffusion` -- ``dX = mu dV + sigma dW_V``;
* :class:`JumpDiffusion` -- the diffusion plus finite-activity Gaussian jumps
  arriving at rate ``rate(t, x)`` per unit of ``V``;
* :class:`AlphaStable` -- symmetric one-dimensional stable process with Levy
  density ``c |y|^{-1-alpha}``, optionally truncated to ``|y| <= R``.

The generator acts on :class:`TestFunction` objects and always returns values
per unit of ``V``; its time-derivative term is divided by ``dV/dt``.

Random numbers come from one counter-based Philox stream per path, keyed by
``(seed, path_index)``, so the ensemble does not depend on how paths are split
across threads.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import roots_hermitenorm, roots_legendre
from scipy.stats import poisson

from ._io import write_csv
from .clock_measure import Clock
from .errors import AlignmentError, DomainError, NumericError, QuadratureError

_EPS = np.finfo(float).eps
_FD_STEP = _EPS ** (1.0 / 3.0)
_FD_STEP_2 = _EPS ** 0.25
_CHUNK = 8192


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------


def _as_states(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != dim:
        raise ValueError(f"state has trailing dimension {x.shape[-1]}, expected {dim}")
    return x


class TestFunction:
    """A function ``phi(t, x)`` together with its derivatives.

    ``value(t, x)`` receives ``x`` with shape ``(..., dim)`` and returns shape
    ``(...)``. Derivatives that are not supplied are computed by central
    differences (step ``eps**(1/3) * max(1, |x|)`` for first derivatives,
    ``eps**(1/4) * max(1, |x|)`` for the Hessian).
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(
        self,
        value: Callable,
        dt: Callable | None = None,
        grad: Callable | None = None,
        hess: Callable | None = None,
        dim: int = 1,
        name: str = "phi",
    ):
        self._value = value
        self._dt = dt
        self._grad = grad
        self._hess = hess
        self.dim = dim
        self.name = name

    def __call__(self, t, x) -> np.ndarray:
        x = _as_states(x, self.dim)
        return np.broadcast_to(np.asarray(self._value(t, x), dtype=float), x.shape[:-1])

    def time_derivative(self, t, x) -> np.ndarray:
        x = _as_states(x, self.dim)
        if self._dt is not None:
            return np.broadcast_to(np.asarray(self._dt(t, x), dtype=float), x.shape[:-1])
        t = np.asarray(t, dtype=float)
        h = _FD_STEP * np.maximum(1.0, np.abs(t))
        return (self(t + h, x) - self(t - h, x)) / (2 * h)

    def gradient(self, t, x) -> np.ndarray:
        x = _as_states(x, self.dim)
        if self._grad is not None:
            return np.broadcast_to(np.asarray(self._grad(t, x), dtype=float), x.shape)
        out = np.empty(x.shape)
        for i in range(self.dim):
            h = _FD_STEP * np.maximum(1.0, np.abs(x[..., i]))
            e = np.zeros(self.dim)
            e[i] = 1.0
            hp = h[..., None] * e
            out[..., i] = (self(t, x + hp) - self(t, x - hp)) / (2 * h)
        return out

    def hessian(self, t, x) -> np.ndarray:
        x = _as_states(x, self.dim)
        if self._hess is not None:
            return np.broadcast_to(
                np.asarray(self._hess(t, x), dtype=float), x.shape + (self.dim,)
            )
        d = self.dim
        out = np.empty(x.shape + (d,))
        f0 = self(t, x)
        h = _FD_STEP_2 * np.maximum(1.0, np.abs(x))
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = 1.0
            hi = h[..., i : i + 1] * ei
            out[..., i, i] = (self(t, x + hi) - 2 * f0 + self(t, x - hi)) / h[..., i] ** 2
            for j in range(i + 1, d):
                ej = np.zeros(d)
                ej[j] = 1.0
                hj = h[..., j : j + 1] * ej
                mixed = (
                    self(t, x + hi + hj)
                    - self(t, x + hi - hj)
                    - self(t, x - hi + hj)
                    + self(t, x - hi - hj)
                ) / (4 * h[..., i] * h[..., j])
                out[..., i, j] = out[..., j, i] = mixed
        return out

    # -- algebra -----------------------------------------------------------

    @classmethod
    def constant(cls, c: float, dim: int = 1) -> TestFunction:
        return cls(
            lambda t, x: np.full(np.shape(x)[:-1], float(c)),
            dt=lambda t, x: np.zeros(np.shape(x)[:-1]),
            grad=lambda t, x: np.zeros(np.shape(x)),
            hess=lambda t, x: np.zeros(np.shape(x) + (dim,)),
            dim=dim,
            name=repr(float(c)),
        )

    def _coerce(self, other) -> TestFunction:
        if isinstance(other, TestFunction):
            if other.dim != self.dim:
                raise ValueError("test functions of different dimensions")
            return other
        return TestFunction.constant(float(other), self.dim)

    def __add__(self, other) -> TestFunction:
        other = self._coerce(other)
        a, b = self, other
        return TestFunction(
            lambda t, x: a(t, x) + b(t, x),
            dt=lambda t, x: a.time_derivative(t, x) + b.time_derivative(t, x),
            grad=lambda t, x: a.gradient(t, x) + b.gradient(t, x),
            hess=lambda t, x: a.hessian(t, x) + b.hessian(t, x),
            dim=self.dim,
            name=f"({a.name} + {b.name})",
        )

    __radd__ = __add__

    def __neg__(self) -> TestFunction:
        return self.scaled(-1.0)

    def __sub__(self, other) -> TestFunction:
        return self + (-self._coerce(other))

    def scaled(self, c: float) -> TestFunction:
        a, c = self, float(c)
        return TestFunction(
            lambda t, x: c * a(t, x),
            dt=lambda t, x: c * a.time_derivative(t, x),
            grad=lambda t, x: c * a.gradient(t, x),
            hess=lambda t, x: c * a.hessian(t, x),
            dim=self.dim,
            name=f"{c}*{a.name}",
        )

    def __mul__(self, other) -> TestFunction:
        if not isinstance(other, TestFunction):
            return self.scaled(other)
        other = self._coerce(other)
        a, b = self, other

        def hess(t, x):
            ga, gb = a.gradient(t, x), b.gradient(t, x)
            cross = ga[..., :, None] * gb[..., None, :]
            return (
                a(t, x)[..., None, None] * b.hessian(t, x)
                + b(t, x)[..., None, None] * a.hessian(t, x)
                + cross
                + np.swapaxes(cross, -1, -2)
            )

        return TestFunction(
            lambda t, x: a(t, x) * b(t, x),
            dt=lambda t, x: a.time_derivative(t, x) * b(t, x) + a(t, x) * b.time_derivative(t, x),
            grad=lambda t, x: a.gradient(t, x) * b(t, x)[..., None]
            + a(t, x)[..., None] * b.gradient(t, x),
            hess=hess,
            dim=self.dim,
            name=f"({a.name} * {b.name})",
        )

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"TestFunction({self.name}, dim={self.dim})"


def coordinate(i: int = 0, dim: int = 1) -> TestFunction:
    """The coordinate map ``x -> x_i``."""

    def grad(t, x):
        g = np.zeros(np.shape(x))
        g[..., i] = 1.0
        return g

    return TestFunction(
        lambda t, x: x[..., i],
        dt=lambda t, x: np.zeros(np.shape(x)[:-1]),
        grad=grad,
        hess=lambda t, x: np.zeros(np.shape(x) + (dim,)),
        dim=dim,
        name=f"x{i + 1}",
    )


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _vector_field(value, dim: int) -> Callable:
    if callable(value):
        return value
    arr = np.broadcast_to(np.asarray(value, dtype=float), (dim,)).copy()
    return lambda t, x: np.broadcast_to(arr, np.shape(x))


def _matrix_field(value, dim: int) -> Callable:
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr * np.eye(dim)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (dim, dim):
        raise ValueError(f"sigma must be a scalar, a vector or a {dim}x{dim} matrix")
    return lambda t, x: np.broadcast_to(arr, np.shape(x) + (dim,))


def _scalar_field(value) -> Callable:
    if callable(value):
        return value
    c = float(value)
    return lambda t, x: np.full(np.shape(x)[:-1], c)


class ForwardModel:
    """Common interface; concrete models override the hooks below."""

    kind = "abstract"

    def __init__(self, clock: Clock, dim: int = 1):
        self.clock = clock
        self.dim = int(dim)

    # local (differential) part, per unit of V
    def drift(self, t, x) -> np.ndarray:
        return np.zeros(np.shape(x))

    def sigma(self, t, x) -> np.ndarray:
        return np.zeros(np.shape(x) + (self.dim,))

    def nonlocal_term(self, t, x, increment: Callable, second_order: np.ndarray):
        """Integral part and its tail estimate.

        ``increment(y)`` returns the integrand for shifts ``y`` of shape
        ``(m, dim)`` as an array ``(..., m)``; ``second_order`` is the matrix
        ``S`` such that the symmetrized integrand behaves like ``y.S.y`` near 0.
        """
        return np.zeros(np.shape(x)[:-1]), 0.0

    def increments(self, t0: float, x: np.ndarray, dV: float, noise: dict) -> np.ndarray:
        raise NotImplementedError

    def draw_noise(self, rng: np.random.Generator, n_cells: int) -> dict:
        raise NotImplementedError

    # paths needing a variable number of draws simulate one path at a time
    per_path = False

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}


class BrownianDiffusion(ForwardModel):
    """``dX = mu(t, X) dV + sigma(t, X) dW_V`` with Euler-Maruyama stepping."""

    kind = "brownian"

    def __init__(self, clock: Clock, mu=0.0, sigma=1.0, dim: int = 1):
        super().__init__(clock, dim)
        self._mu_spec, self._sigma_spec = mu, sigma
        self._mu = _vector_field(mu, self.dim)
        self._sigma = _matrix_field(sigma, self.dim)

    def drift(self, t, x):
        return self._mu(t, x)

    def sigma(self, t, x):
        return self._sigma(t, x)

    def draw_noise(self, rng, n_cells):
        return {"dW": rng.standard_normal((n_cells, self.dim))}

    def increments(self, t0, x, dV, noise):
        dW = noise["dW"]
        diffusion = np.einsum("nij,nj->ni", self.sigma(t0, x), dW)
        return self.drift(t0, x) * dV + diffusion * math.sqrt(dV)

    def config(self):
        out = super().config()
        for key, spec in (("mu", self._mu_spec), ("sigma", self._sigma_spec)):
            if not callable(spec):
                out[key] = np.asarray(spec, dtype=float).tolist()
        return out


class JumpDiffusion(BrownianDiffusion):
    """Diffusion plus Gaussian jumps ``N(jump_mean, diag(jump_std**2))`` at rate ``rate``.

    ``mu`` is the effective drift: the small-jump compensator of a general
    Levy kernel is assumed already folded into it.
    """

    kind = "jump_diffusion"

    def __init__(
        self,
        clock: Clock,
        mu=0.0,
        sigma=1.0,
        rate=1.0,
        jump_mean=0.0,
        jump_std=1.0,
        dim: int = 1,
        hermite_order: int = 24,
    ):
        super().__init__(clock, mu=mu, sigma=sigma, dim=dim)
        sig = self._sigma(0.0, np.zeros((1, self.dim)))[0]
        if np.linalg.matrix_rank(sig) < self.dim:
            raise DomainError("jump-diffusion requires an invertible sigma")
        self._rate_spec = rate
        self.rate = _scalar_field(rate)
        self.jump_mean = np.broadcast_to(np.asarray(jump_mean, dtype=float), (self.dim,)).copy()
        self.jump_std = np.broadcast_to(np.asarray(jump_std, dtype=float), (self.dim,)).copy()
        if np.any(self.jump_std < 0):
            raise DomainError("jump_std must be nonnegative")
        nodes, weights = roots_hermitenorm(hermite_order)
        weights = weights / weights.sum()
        grids = np.meshgrid(*([nodes] * self.dim), indexing="ij")
        wgrids = np.meshgrid(*([weights] * self.dim), indexing="ij")
        z = np.stack([g.ravel() for g in grids], axis=-1)
        self._jump_nodes = self.jump_mean + z * self.jump_std
        self._jump_weights = np.prod(np.stack([w.ravel() for w in wgrids], axis=-1), axis=-1)

    def nonlocal_term(self, t, x, increment, second_order):
        values = increment(self._jump_nodes)
        return self.rate(t, x) * (values @ self._jump_weights), 0.0

    def draw_noise(self, rng, n_cells):
        return {
            "dW": rng.standard_normal((n_cells, self.dim)),
            "U": rng.random(n_cells),
            "J": rng.standard_normal((n_cells, self.dim)),
        }

    def increments(self, t0, x, dV, noise):
        base = super().increments(t0, x, dV, noise)
        lam = np.maximum(self.rate(t0, x), 0.0) * dV
        counts = poisson.ppf(noise["U"], lam)
        counts = np.where(lam > 0, counts, 0.0)
        jumps = counts[:, None] * self.jump_mean + np.sqrt(counts)[:, None] * self.jump_std * noise["J"]
        return base + jumps

    def config(self):
        out = super().config()
        if not callable(self._rate_spec):
            out["rate"] = float(self._rate_spec)
        out["jump_mean"] = self.jump_mean.tolist()
        out["jump_std"] = self.jump_std.tolist()
        return out


def fractional_laplacian_constant(alpha: float) -> float:
    """Constant making ``c PV int (phi(x+y) - phi(x)) |y|^{-1-alpha} dy`` have symbol ``-|xi|^alpha``."""
    return alpha * 2 ** (alpha - 1) * gamma_fn((1 + alpha) / 2) / (math.sqrt(math.pi) * gamma_fn(1 - alpha / 2))


def stable_symbol_coefficient(alpha: float, c: float) -> float:
    """``C`` with ``E exp(i xi L_t) = exp(-t C |xi|^alpha)`` for Levy density ``c |y|^{-1-alpha}``."""
    if abs(alpha - 1.0) < 1e-12:
        return c * math.pi
    return 2 * c * gamma_fn(1 - alpha) * math.cos(math.pi * alpha / 2) / alpha


def symmetric_stable(alpha: float, rng: np.random.Generator, size) -> np.ndarray:
    """Chambers-Mallows-Stuck draw with characteristic function ``exp(-|xi|^alpha)``.

    ``alpha = 2`` is accepted and yields ``N(0, 2)``.
    """
    if not 0 < alpha <= 2:
        raise DomainError("stable index must lie in (0, 2]")
    u = rng.uniform(-math.pi / 2, math.pi / 2, size)
    w = rng.standard_exponential(size)
    if abs(alpha - 1.0) < 1e-12:
        return np.tan(u)
    return (
        np.sin(alpha * u)
        / np.cos(u) ** (1 / alpha)
        * (np.cos((1 - alpha) * u) / w) ** ((1 - alpha) / alpha)
    )


class AlphaStable(ForwardModel):
    """Symmetric one-dimensional alpha-stable process.

    With ``truncation=None`` paths use exact stable increments
    ``(C dV)^{1/alpha} S`` and the generator integral runs to
    ``quad_radius`` with a geometric tail estimate. With a finite
    ``truncation`` R the Levy density is cut to ``|y| <= R``; paths then use
    compound-Poisson jumps on ``jump_cutoff < |y| <= R`` plus a Gaussian
    stand-in with matching variance for the smaller jumps.
    """

    kind = "alpha_stable"

    def __init__(
        self,
        clock: Clock,
        alpha: float,
        scale: float | None = None,
        truncation: float | None = None,
        inner_cutoff: float = 1e-6,
        quad_radius: float | None = None,
        quad_tol: float = 1e-3,
        jump_cutoff: float = 0.05,
        points_per_octave: int = 8,
    ):
        super().__init__(clock, dim=1)
        if not 0 < alpha < 2:
            raise DomainError(f"alpha must lie strictly inside (0, 2), got {alpha}")
        self.alpha = float(alpha)
        self.scale = fractional_laplacian_constant(alpha) if scale is None else float(scale)
        if self.scale <= 0:
            raise DomainError("scale must be positive")
        self.truncation = None if truncation is None else float(truncation)
        if self.truncation is not None and self.truncation <= inner_cutoff:
            raise DomainError("truncation radius must exceed the inner cutoff")
        self.inner_cutoff = float(inner_cutoff)
        # bounded integrands leave a tail of order R^{-alpha}; default R makes it ~1e-6
        self.quad_radius = 10.0 ** max(4.0, 6.0 / alpha) if quad_radius is None else float(quad_radius)
        self.quad_tol = float(quad_tol)
        self.jump_cutoff = float(jump_cutoff)
        outer = self.truncation if self.truncation is not None else self.quad_radius
        self._radii, self._weights, self._last_octave = _radial_rule(
            self.inner_cutoff, outer, self.alpha, points_per_octave
        )
        self._weights = self._weights * self.scale
        self.per_path = self.truncation is not None

    def nonlocal_term(self, t, x, increment, second_order):
        r = self._radii
        shifts = np.concatenate([r, -r])[:, None]
        vals = increment(shifts)
        m = r.size
        paired = vals[..., :m] + vals[..., m:]
        value = paired @ self._weights
        s = second_order[..., 0, 0]
        e = self.inner_cutoff
        value = value + s * self.scale * e ** (2 - self.alpha) / (2 - self.alpha)
        tail = 0.0
        if self.truncation is None:
            last = paired[..., self._last_octave] @ self._weights[self._last_octave]
            tail_arr = np.abs(last) / (2**self.alpha - 1)
            tail = float(np.max(tail_arr)) if np.size(tail_arr) else 0.0
            ref = np.maximum(1.0, np.abs(value))
            if np.any(tail_arr > self.quad_tol * ref):
                raise QuadratureError(
                    "principal-value integral not converged at radius "
                    f"{self.quad_radius}; integrand grows too fast",
                    tail,
                )
        return value, tail

    # simulation ------------------------------------------------------------

    @property
    def _symbol(self) -> float:
        return stable_symbol_coefficient(self.alpha, self.scale)

    def draw_noise(self, rng, n_cells):
        if self.truncation is None:
            return {"S": symmetric_stable(self.alpha, rng, n_cells)}
        a, c = self.alpha, self.scale
        eps, R = self.jump_cutoff, self.truncation
        rate = 2 * c * (eps**-a - R**-a) / a
        var_small = 2 * c * eps ** (2 - a) / (2 - a)
        dV = self.clock.increments
        counts = rng.poisson(rate * dV)
        u = rng.random(counts.sum())
        sizes = (eps**-a - u * (eps**-a - R**-a)) ** (-1 / a)
        signs = np.where(rng.random(counts.sum()) < 0.5, -1.0, 1.0)
        owner = np.repeat(np.arange(n_cells), counts)
        jumps = np.bincount(owner, weights=sizes * signs, minlength=n_cells)
        gauss = rng.standard_normal(n_cells) * np.sqrt(var_small * dV)
        return {"L": jumps + gauss}

    def increments(self, t0, x, dV, noise):
        if "L" in noise:
            return noise["L"][:, None]
        return ((self._symbol * dV) ** (1 / self.alpha) * noise["S"])[:, None]

    def config(self):
        out = super().config()
        out.update(
            alpha=self.alpha,
            scale=self.scale,
            truncation=self.truncation,
            inner_cutoff=self.inner_cutoff,
            quad_radius=self.quad_radius,
            jump_cutoff=self.jump_cutoff,
        )
        return out


def _radial_rule(inner: float, outer: float, alpha: float, per_octave: int):
    """Gauss-Legendre rule in ``log r`` for ``int_inner^outer h(r) r^{-1-alpha} dr``.

    Panels are octaves ``[inner 2^k, inner 2^{k+1}]`` (the last one clipped to
    ``outer``); the returned mask selects the outermost full octave.
    """
    nodes, weights = roots_legendre(per_octave)
    edges = [math.log(inner)]
    top = math.log(outer)
    while edges[-1] < top - 1e-12:
        edges.append(min(edges[-1] + math.log(2.0), top))
    radii, wts, panel = [], [], []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        s = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        r = np.exp(s)
        radii.append(r)
        # dr = r ds, so r^{-1-alpha} dr = r^{-alpha} ds
        wts.append(0.5 * (hi - lo) * weights * r ** (-alpha))
        panel.append(np.full(per_octave, i))
    radii, wts, panel = np.concatenate(radii), np.concatenate(wts), np.concatenate(panel)
    last = panel == panel.max()
    return radii, wts, last


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def _chunked(fn, t, x: np.ndarray) -> np.ndarray:
    """Evaluate ``fn(t, x)`` over leading dims of ``x`` in bounded chunks."""
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    tt = np.broadcast_to(np.asarray(t, dtype=float), lead).reshape(-1)
    if flat.shape[0] <= _CHUNK:
        return np.asarray(fn(tt, flat)).reshape(lead)
    out = np.empty(flat.shape[0])
    for lo in range(0, flat.shape[0], _CHUNK):
        out[lo : lo + _CHUNK] = fn(tt[lo : lo + _CHUNK], flat[lo : lo + _CHUNK])
    return out.reshape(lead)


def _spatial_local(model: ForwardModel, t, x, grad, hess) -> np.ndarray:
    sig = model.sigma(t, x)
    cov = sig @ np.swapaxes(sig, -1, -2)
    return 0.5 * np.einsum("...ij,...ij->...", cov, hess) + np.einsum(
        "...i,...i->...", model.drift(t, x), grad
    )


def _spatial_generator(model: ForwardModel, phi: TestFunction, t, x, tails: list) -> np.ndarray:
    x = np.asarray(x, dtype=float)

    def fn(tt, xx):
        hess = phi.hessian(tt, xx)
        local = _spatial_local(model, tt, xx, phi.gradient(tt, xx), hess)
        base = phi(tt, xx)

        def increment(y):
            shifted = xx[:, None, :] + y[None, :, :]
            return phi(tt[:, None], shifted) - base[:, None]

        nonlocal_, tail = model.nonlocal_term(tt, xx, increment, hess)
        tails.append(tail)
        return local + nonlocal_

    return _chunked(fn, t, x)


def generator_parts(model: ForwardModel, phi: TestFunction, t, x) -> tuple[np.ndarray, np.ndarray, float]:
    """``(d phi/dt, spatial part of a(phi), quadrature tail estimate)``."""
    x = _as_states(x, model.dim)
    tails: list[float] = []
    spatial = _spatial_generator(model, phi, t, x, tails)
    return phi.time_derivative(t, x), spatial, max(tails, default=0.0)


def apply_generator(model: ForwardModel, phi: TestFunction, t, x, return_tail: bool = False):
    """``a(phi)(t, x)`` per unit of the clock ``V``.

    The time derivative is converted to clock units by dividing by ``dV/dt``
    on the cell starting at ``t``.
    """
    dphi_dt, spatial, tail = generator_parts(model, phi, t, x)
    slope = model.clock.slope(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        time_part = np.where(dphi_dt == 0, 0.0, dphi_dt / slope)
    if not np.all(np.isfinite(time_part)):
        raise NumericError("time-dependent test function on a flat clock cell (dV/dt = 0)")
    value = time_part + spatial
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite generator value for {phi!r}")
    return (value, tail) if return_tail else value


def carre_du_champ(model: ForwardModel, phi: TestFunction, psi: TestFunction, t, x) -> np.ndarray:
    """``Gamma(phi, psi) = a(phi psi) - phi a(psi) - psi a(phi)``.

    The differential part is evaluated literally from that formula (with
    product-rule derivatives of ``phi psi``); inside the jump integral the same
    combination collapses to ``(phi(x+y) - phi(x)) (psi(x+y) - psi(x))``,
    which is what gets integrated.
    """
    x = _as_states(x, model.dim)
    prod = phi * psi

    def fn(tt, xx):
        def local(f):
            return f.time_derivative(tt, xx) + _spatial_local(
                model, tt, xx, f.gradient(tt, xx), f.hessian(tt, xx)
            )

        pv, sv = phi(tt, xx), psi(tt, xx)
        loc = local(prod) - pv * local(psi) - sv * local(phi)
        gp, gs = phi.gradient(tt, xx), psi.gradient(tt, xx)
        cross = gp[..., :, None] * gs[..., None, :]
        second = cross + np.swapaxes(cross, -1, -2)

        def increment(y):
            shifted = xx[:, None, :] + y[None, :, :]
            tb = tt[:, None]
            return (phi(tb, shifted) - pv[:, None]) * (psi(tb, shifted) - sv[:, None])

        nonlocal_, _ = model.nonlocal_term(tt, xx, increment, second)
        return loc + nonlocal_

    value = _chunked(fn, t, x)
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite carre du champ value")
    return value


# ---------------------------------------------------------------------------
# path ensembles
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PathEnsemble:
    """Simulated paths ``X`` under ``P^{s,x}`` on the model clock grid.

    ``paths`` has shape ``(n_paths, N + 1, dim)``. ``x`` is ``None`` for an
    ensemble restricted to a later start (random starting states).
    """

    model: ForwardModel
    s: float
    start_index: int
    x: np.ndarray | None
    paths: np.ndarray
    seed: int

    @property
    def clock(self) -> Clock:
        return self.model.clock

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    def states(self, k: int) -> np.ndarray:
        return self.paths[:, k, :]

    def restrict(self, k: int) -> PathEnsemble:
        """Same paths viewed as starting at grid index ``k >= start_index``."""
        if k < self.start_index:
            raise AlignmentError("restriction must start at or after the original start")
        paths = self.paths.copy()
        paths[:, :k, :] = paths[:, k : k + 1, :]
        return PathEnsemble(self.model, float(self.clock.times[k]), k, None, paths, self.seed)

    def to_csv(self, path: str | Path) -> None:
        n, m, d = self.paths.shape
        header = ["path_id", "t"] + [f"x_{i + 1}" for i in range(d)]
        times = self.clock.times

        def rows():
            for i in range(n):
                for k in range(m):
                    yield (i, times[k], *self.paths[i, k])

        write_csv(path, header, rows())

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path, paths=self.paths, times=self.clock.times, V=self.clock.values, s=self.s, seed=self.seed
        )


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream for one path: Philox keyed by ``seed``, offset by ``path_index``."""
    return np.random.Generator(np.random.Philox(key=int(seed) % 2**128, counter=[0, 0, int(path_index), 0]))


def sample_paths(
    model: ForwardModel,
    start: tuple[float, object],
    n_paths: int,
    seed: int,
    threads: int = 1,
    block_size: int = 4096,
) -> PathEnsemble:
    """Simulate ``n_paths`` trajectories from ``(s, x)``; ``X_t = x`` for ``t <= s``."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    s, x0 = start
    clock = model.clock
    k0 = clock.index_of(s)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (model.dim,)).copy()
    n_cells = clock.n_cells
    dV = clock.increments
    times = clock.times
    paths = np.empty((n_paths, n_cells + 1, model.dim))
    paths[:, : k0 + 1, :] = x0

    def simulate(lo: int, hi: int) -> None:
        noises = [model.draw_noise(path_stream(seed, i), n_cells) for i in range(lo, hi)]
        noise = {key: np.stack([nz[key] for nz in noises]) for key in noises[0]}
        x = paths[lo:hi, k0, :].copy()
        for k in range(k0, n_cells):
            step = {key: val[:, k] for key, val in noise.items()}
            if dV[k] > 0:
                x = x + model.increments(times[k], x, dV[k], step)
            paths[lo:hi, k + 1, :] = x

    blocks = [(lo, min(lo + block_size, n_paths)) for lo in range(0, n_paths, block_size)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: simulate(*b), blocks))
    else:
        for b in blocks:
            simulate(*b)
    if not np.all(np.isfinite(paths)):
        raise NumericError("simulation produced non-finite states")
    return PathEnsemble(model, float(times[k0]), k0, x0, paths, int(seed))


def martingale_path(model: ForwardModel, phi: TestFunction, ensemble: PathEnsemble) -> np.ndarray:
    """Increments of ``M[phi]`` per path and cell, zero on cells before the start.

    ``dM_k = phi(t_k, X_k) - phi(t_{k-1}, X_{k-1}) - a(phi)(t_{k-1}, X_{k-1}) dV_k``
    with the generator term split as ``dphi/dt * dt_k + spatial * dV_k``.
    """
    clock = ensemble.clock
    X = ensemble.paths
    n, m, _ = X.shape
    out = np.zeros((n, m - 1))
    for k in range(ensemble.start_index + 1, m):
        t0, t1 = clock.times[k - 1], clock.times[k]
        x0 = X[:, k - 1, :]
        dphi_dt, spatial, _ = generator_parts(model, phi, t0, x0)
        drift = dphi_dt * (t1 - t0) + spatial * clock.increments[k - 1]
        out[:, k - 1] = phi(t1, X[:, k, :]) - phi(t0, x0) - drift
    return out
