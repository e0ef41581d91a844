"""Clock, atomic measures on grid cells and their Lebesgue decomposition.

Everything here is discrete: a measure is a vector of cell masses, cell ``k``
being the interval ``(t_{k-1}, t_k]`` of a :class:`Clock` grid. The
decomposition of ``A`` against a nonnegative ``B`` is then exact up to the
rounding of one division per cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import read_csv, write_csv
from .errors import AlignmentError, DomainError, NumericError

_GRID_ATOL = 1e-12


class Clock:
    """Deterministic non-decreasing clock ``V`` sampled on a time grid.

    Parameters
    ----------
    times : array_like
        Strictly increasing grid ``0 = t_0 < ... < t_N = T``.
    values : array_like
        ``V(t_k)``; must start at 0 and be non-decreasing.
    v_max : float, optional
        Declared bound on ``V(T)``. Defaults to ``V(T)``.
    """

    def __init__(self, times, values, v_max: float | None = None):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or times.size < 2:
            raise ValueError("times and values must be 1-d arrays of equal length >= 2")
        if times[0] != 0.0:
            raise ValueError("grid must start at t_0 = 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("grid must be strictly increasing")
        if values[0] != 0.0:
            raise ValueError("clock must start at V(0) = 0")
        if np.any(np.diff(values) < 0):
            raise ValueError("clock increments must be nonnegative")
        if not np.all(np.isfinite(values)):
            raise ValueError("clock values must be finite")
        self.v_max = float(values[-1]) if v_max is None else float(v_max)
        if values[-1] > self.v_max:
            raise ValueError(f"V(T) = {values[-1]} exceeds declared bound {self.v_max}")
        times.setflags(write=False)
        values.setflags(write=False)
        self.times = times
        self.values = values

    @classmethod
    def uniform(cls, T: float, n_steps: int) -> Clock:
        """``V(t) = t`` on ``n_steps`` equal cells of ``[0, T]``."""
        if n_steps < 1 or T <= 0:
            raise ValueError("need T > 0 and n_steps >= 1")
        t = np.linspace(0.0, T, n_steps + 1)
        return cls(t, t.copy())

    @classmethod
    def from_table(cls, knot_times, knot_values, n_steps: int | None = None) -> Clock:
        """Piecewise-linear clock through ``(knot_times, knot_values)``.

        With ``n_steps`` the clock is resampled on a uniform grid of the same
        horizon; otherwise the knots themselves form the grid.
        """
        kt = np.asarray(knot_times, dtype=float)
        kv = np.asarray(knot_values, dtype=float)
        if n_steps is None:
            return cls(kt, kv)
        t = np.linspace(0.0, kt[-1], n_steps + 1)
        return cls(t, np.interp(t, kt, kv))

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_cells(self) -> int:
        return self.times.size - 1

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float) -> int:
        """Grid index of ``t``; raises :class:`AlignmentError` when off-grid."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > _GRID_ATOL * max(1.0, self.T):
            raise AlignmentError(f"time {t} is not on the clock grid")
        return k

    def cell_of(self, t) -> np.ndarray:
        """Index ``k`` (0-based) of the cell ``[t_k, t_{k+1})`` holding ``t``."""
        k = np.searchsorted(self.times, t, side="right") - 1
        return np.clip(k, 0, self.n_cells - 1)

    def slope(self, t) -> np.ndarray:
        """dV/dt on the cell starting at or containing ``t``."""
        k = self.cell_of(t)
        return self.increments[k] / self.dt[k]

    def as_measure(self) -> DiscreteMeasurePath:
        return DiscreteMeasurePath(self.increments, cells=np.arange(1, self.n_cells + 1))

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, ["t", "V"], zip(self.times, self.values))

    @classmethod
    def from_csv(cls, path: str | Path) -> Clock:
        data = read_csv(path, ["t", "V"])
        return cls(data[:, 0], data[:, 1])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Clock)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self) -> int:
        return hash((self.times.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"Clock(T={self.T}, n_cells={self.n_cells}, V(T)={self.values[-1]})"


class DiscreteMeasurePath:
    """Signed atomic measure stored in minimal Jordan form.

    ``pos`` and ``neg`` are nonnegative cell masses with ``pos * neg == 0``;
    any overlap passed to the constructor is cancelled.
    """

    def __init__(self, pos, neg=None, cells=None):
        pos = np.asarray(pos, dtype=float)
        neg = np.zeros_like(pos) if neg is None else np.asarray(neg, dtype=float)
        if pos.ndim != 1 or pos.shape != neg.shape:
            raise ValueError("pos and neg must be 1-d arrays of equal length")
        if np.any(pos < 0) or np.any(neg < 0):
            raise DomainError("positive and negative parts must be nonnegative")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise DomainError("masses must be finite")
        net = pos - neg
        self.pos = np.where(net > 0, net, 0.0)
        self.neg = np.where(net < 0, -net, 0.0)
        self.cells = np.arange(1, pos.size + 1) if cells is None else np.asarray(cells, dtype=int)
        if self.cells.shape != pos.shape:
            raise ValueError("cells must label every mass")

    @classmethod
    def from_signed(cls, masses, cells=None) -> DiscreteMeasurePath:
        masses = np.asarray(masses, dtype=float)
        return cls(np.maximum(masses, 0.0), np.maximum(-masses, 0.0), cells=cells)

    @property
    def masses(self) -> np.ndarray:
        return self.pos - self.neg

    @property
    def total_variation(self) -> float:
        return float(np.sum(self.pos + self.neg))

    @property
    def is_nonnegative(self) -> bool:
        return not np.any(self.neg > 0)

    def __len__(self) -> int:
        return self.pos.size

    def __add__(self, other: DiscreteMeasurePath) -> DiscreteMeasurePath:
        _check_aligned(self, other)
        return DiscreteMeasurePath.from_signed(self.masses + other.masses, cells=self.cells)

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, ["cell_index", "pos_mass", "neg_mass"], zip(self.cells, self.pos, self.neg))

    @classmethod
    def from_csv(cls, path: str | Path) -> DiscreteMeasurePath:
        data = read_csv(path, ["cell_index", "pos_mass", "neg_mass"])
        cells = data[:, 0]
        if np.any(cells != np.round(cells)):
            raise ValueError(f"{path}: cell_index must be integral")
        return cls(data[:, 1], data[:, 2], cells=cells.astype(int))


@dataclass(frozen=True, eq=False)
class Decomposition:
    """``A = density * dB + singular`` with ``K = 1`` exactly on singular cells."""

    density: np.ndarray
    singular: DiscreteMeasurePath
    indicator: np.ndarray
    base: np.ndarray = field(repr=False)

    def absolutely_continuous(self) -> np.ndarray:
        return self.density * self.base

    def reconstruct(self) -> np.ndarray:
        return self.absolutely_continuous() + self.singular.masses


def _check_aligned(a: DiscreteMeasurePath, b: DiscreteMeasurePath) -> None:
    if a.cells.shape != b.cells.shape or not np.array_equal(a.cells, b.cells):
        raise AlignmentError("measures are not aligned to the same grid cells")


def lebesgue_decompose(A: DiscreteMeasurePath, B: DiscreteMeasurePath) -> Decomposition:
    """Split ``A`` into a part with density against ``B`` and a part singular to it.

    The density is ``a_k / dB_k`` where ``dB_k > 0`` and 0 elsewhere; every
    cell with ``dB_k = 0`` carries its mass into the singular part.
    """
    _check_aligned(A, B)
    if not B.is_nonnegative:
        raise DomainError("reference measure B must be nonnegative")
    base = B.pos
    charged = base > 0
    a = A.masses
    density = np.zeros_like(a)
    with np.errstate(over="ignore"):
        np.divide(a, base, out=density, where=charged)
    if not np.all(np.isfinite(density)):
        raise NumericError("density overflows; reference masses are too small relative to A")
    singular = DiscreteMeasurePath.from_signed(np.where(charged, 0.0, a), cells=A.cells)
    indicator = np.where(charged, 0.0, 1.0)
    return Decomposition(density=density, singular=singular, indicator=indicator, base=base.copy())


def radon_nikodym_integral(phi, A: DiscreteMeasurePath, B: DiscreteMeasurePath) -> float:
    """``sum_k phi_k (dA/dB)_k dB_k`` for a nonnegative integrand ``phi``.

    For nonnegative ``A`` the result never exceeds ``sum_k phi_k a_k``; a
    violation beyond rounding raises :class:`NumericError`.
    """
    phi = np.broadcast_to(np.asarray(phi, dtype=float), A.pos.shape)
    if np.any(phi < 0) or not np.all(np.isfinite(phi)):
        raise DomainError("integrand must be finite and nonnegative")
    dec = lebesgue_decompose(A, B)
    value = float(np.sum(phi * dec.absolutely_continuous()))
    if A.is_nonnegative:
        bound = float(np.sum(phi * A.pos))
        if value > bound + 1e-12 * max(1.0, abs(bound)):
            raise NumericError(f"domination violated: {value} > {bound}")
    return value


def martingale_split(dM, K) -> tuple[np.ndarray, np.ndarray]:
    """Route increments to the clock-continuous part (``K < 1``) or the singular part (``K = 1``)."""
    dM = np.asarray(dM, dtype=float)
    K = np.asarray(K, dtype=float)
    if np.any((K < 0) | (K > 1)):
        raise DomainError("indicator K must take values in [0, 1]")
    try:
        mask = np.broadcast_to(K < 1, dM.shape)
    except ValueError:
        raise AlignmentError(f"shape mismatch: increments {dM.shape}, indicator {K.shape}") from None
    return np.where(mask, dM, 0.0), np.where(mask, 0.0, dM)
