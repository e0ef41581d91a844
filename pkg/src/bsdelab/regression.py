"""Least-squares estimators of conditional expectations ``E[target | X_t]``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import HermiteE, Polynomial
from numpy.polynomial.hermite_e import hermevander

from ._io import write_csv
from .errors import SingularityError

_FAMILIES = ("polynomial", "local_partition")


@dataclass(frozen=True)
class RegressionBasis:
    """Basis specification; features are built after normalizing the states.

    ``polynomial`` uses products of probabilists' Hermite polynomials of
    total degree ``<= degree`` in standardized coordinates. ``local_partition``
    splits each coordinate into ``n_bins`` quantile bins and fits an affine
    function on every cell of the resulting tensor partition.
    """

    family: str = "polynomial"
    degree: int = 2
    n_bins: int = 4

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0 or self.n_bins < 1:
            raise ValueError("degree must be >= 0 and n_bins >= 1")

    @classmethod
    def default(cls, dim: int) -> RegressionBasis:
        return cls("polynomial", degree=4 if dim == 1 else 2)

    def size(self, dim: int) -> int:
        if self.family == "polynomial":
            return len(_multi_indices(dim, self.degree))
        return self.n_bins**dim * (dim + 1)


def _multi_indices(dim: int, degree: int) -> list[tuple[int, ...]]:
    return [m for m in itertools.product(range(degree + 1), repeat=dim) if sum(m) <= degree]


@dataclass(frozen=True)
class _Normalization:
    center: np.ndarray
    scale: np.ndarray
    edges: tuple  # per-dimension interior bin edges (local_partition only)


def _normalization(basis: RegressionBasis, states: np.ndarray) -> _Normalization:
    center = states.mean(axis=0)
    scale = states.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    edges: tuple = ()
    if basis.family == "local_partition":
        qs = np.linspace(0, 1, basis.n_bins + 1)[1:-1]
        edges = tuple(np.quantile(states[:, i], qs) for i in range(states.shape[1]))
    return _Normalization(center, scale, edges)


def _design(basis: RegressionBasis, norm: _Normalization, states: np.ndarray) -> np.ndarray:
    z = (states - norm.center) / norm.scale
    n, d = z.shape
    if basis.family == "polynomial":
        vander = [hermevander(z[:, i], basis.degree) for i in range(d)]
        cols = []
        for m in _multi_indices(d, basis.degree):
            col = np.ones(n)
            for i, p in enumerate(m):
                if p:
                    col = col * vander[i][:, p]
            cols.append(col)
        return np.stack(cols, axis=1)
    # local_partition: bin index per dim, points beyond the data fall in end bins
    nb = basis.n_bins
    cell = np.zeros(n, dtype=int)
    for i in range(d):
        cell = cell * nb + np.searchsorted(norm.edges[i], states[:, i], side="right")
    affine = np.concatenate([np.ones((n, 1)), z], axis=1)
    X = np.zeros((n, nb**d, d + 1))
    X[np.arange(n), cell, :] = affine
    return X.reshape(n, -1)


@dataclass(eq=False)
class FittedRegression:
    """Coefficients of one fit plus what is needed to evaluate it elsewhere."""

    basis: RegressionBasis
    coefficients: np.ndarray
    normalization: _Normalization = field(repr=False)
    residual_norm: float
    fitted: np.ndarray = field(repr=False)
    constant: bool = False

    def predict(self, states) -> np.ndarray:
        return predict(self, states)

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, ["index", "coefficient"], enumerate(self.coefficients))

    def monomial_coefficients(self) -> np.ndarray:
        """Coefficients in ``1, x, x^2, ...`` of the raw state (1-d polynomial fits only)."""
        if self.constant:
            return self.coefficients.copy()
        if self.basis.family != "polynomial" or self.normalization.center.size != 1:
            raise ValueError("monomial form exists for one-dimensional polynomial fits only")
        m, s = float(self.normalization.center[0]), float(self.normalization.scale[0])
        in_z = HermiteE(self.coefficients).convert(kind=Polynomial)
        return in_z(Polynomial([-m / s, 1 / s])).coef


def _as_matrix(states) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    return states


def fit(targets, states, basis: RegressionBasis, ridge: float | None = None) -> FittedRegression:
    """Minimize ``sum_i (target_i - b(state_i) . c)**2 + ridge * |c'|**2``.

    ``c'`` omits the intercept so constants are reproduced exactly. With
    ``ridge=None`` the default ``1e-8 * n_paths`` is used. States with no
    spread (a deterministic start) are fitted by the sample mean alone.
    """
    y = np.asarray(targets, dtype=float).reshape(-1)
    X = _as_matrix(states)
    n = y.size
    if X.shape[0] != n:
        raise ValueError("targets and states must have the same number of paths")
    if ridge is None:
        ridge = 1e-8 * n
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    norm = _normalization(basis, X)
    if np.all(np.ptp(X, axis=0) == 0):
        mean = float(y.mean())
        fitted = np.full(n, mean)
        return FittedRegression(
            basis, np.array([mean]), norm, float(np.linalg.norm(y - fitted)), fitted, constant=True
        )
    if n < basis.size(X.shape[1]):
        raise SingularityError(f"{n} samples for {basis.size(X.shape[1])} basis functions")
    A = _design(basis, norm, X)
    if ridge == 0:
        coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
        if rank < A.shape[1]:
            raise SingularityError(
                f"design matrix has rank {rank} < {A.shape[1]}; use ridge > 0"
            )
    else:
        gram = A.T @ A
        penalty = np.full(A.shape[1], float(ridge))
        if basis.family == "polynomial":
            penalty[0] = 0.0
        # empty partition cells give zero columns; pin their coefficients to 0
        empty = np.diag(gram) == 0
        penalty[empty] = 1.0
        gram[np.diag_indices_from(gram)] += penalty
        try:
            coef = np.linalg.solve(gram, A.T @ y)
        except np.linalg.LinAlgError:
            coef = np.linalg.lstsq(gram, A.T @ y, rcond=None)[0]
    fitted = A @ coef
    return FittedRegression(basis, coef, norm, float(np.linalg.norm(y - fitted)), fitted)


def predict(fitted: FittedRegression, states) -> np.ndarray:
    X = _as_matrix(states)
    if fitted.constant:
        return np.full(X.shape[0], fitted.coefficients[0])
    return _design(fitted.basis, fitted.normalization, X) @ fitted.coefficients


def design_matrix(fitted: FittedRegression, states) -> np.ndarray:
    """Feature matrix of ``states`` under the fitted normalization."""
    X = _as_matrix(states)
    if fitted.constant:
        return np.ones((X.shape[0], 1))
    return _design(fitted.basis, fitted.normalization, X)


def conditional_expectation(targets, states, basis: RegressionBasis, ridge: float | None = None):
    """Shorthand returning in-sample predictions and the fit."""
    f = fit(targets, states, basis, ridge)
    return f.fitted, f
