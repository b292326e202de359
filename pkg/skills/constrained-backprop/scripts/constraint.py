#!/usr/bin/env python3
"""
Quantization grids and sawtooth constraint functions

A grid Q = {q_1 < ... < q_nq} has medians m_i = (q_i + q_{i+1}) / 2. The
sawtooth Y(w) is zero exactly on Q and rises with slope s (2 by default)
towards each median and outside [q_1, q_nq]. The unconstrained-weight
window ucs(w) gates Y off on the half-open intervals
[m_i - h_i, m_i + h_i) with h_i = (q_{i+1} - q_i) / (2g); at g = 1 the
windows tile [q_1, q_nq) and at g = inf they vanish.

All functions accept a scalar or an array of weights and are vectorized.

Usage:
    from constraint import ConstraintKind, make_grid, constraint_cs

    grid = make_grid(ConstraintKind.parse("ternary"), scale=1.0)
    constraint_cs(0.2, grid.with_window(2))   # 0.4
"""

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from utils import DomainError

ArrayLike = Union[float, np.ndarray, Sequence[float]]

KIND_TAGS = ("binary", "ternary", "one-bit-shift", "two-bit-shift", "custom")

# Shift depth D per tag: Q = {0, +-2^-d a} for d = 0..D
SHIFT_DEPTH = {"ternary": 0, "one-bit-shift": 1, "two-bit-shift": 2}

DEFAULT_SLOPE = 2.0


@dataclass(frozen=True)
class ConstraintKind:
    """
    Which weight-precision constraint to impose

    Attributes:
        tag: binary, ternary, one-bit-shift, two-bit-shift or custom
        depth: shift depth D for the shift kinds (ternary is D = 0)
        levels: unscaled sorted levels for the custom kind
    """

    tag: str
    depth: Optional[int] = None
    levels: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.tag not in KIND_TAGS:
            raise DomainError(
                f"Unknown constraint kind '{self.tag}'; expected one of {', '.join(KIND_TAGS)}"
            )
        if self.tag in SHIFT_DEPTH and self.depth is None:
            object.__setattr__(self, "depth", SHIFT_DEPTH[self.tag])
        if self.tag == "custom" and len(self.levels) < 2:
            raise DomainError("custom constraint needs at least two levels")

    @classmethod
    def parse(cls, text: str, levels: Optional[Iterable[float]] = None) -> "ConstraintKind":
        """Build a kind from its tag; custom kinds take their levels"""
        tag = text.strip().lower().replace("_", "-")
        if tag == "custom":
            return cls(tag, levels=tuple(float(v) for v in (levels or ())))
        return cls(tag)

    @property
    def n_levels(self) -> int:
        if self.tag == "binary":
            return 2
        if self.tag == "custom":
            return len(set(self.levels))
        return 2 * (self.depth + 1) + 1

    def unit_levels(self) -> np.ndarray:
        """Grid values for scale a = 1, unsorted"""
        if self.tag == "binary":
            return np.array([-1.0, 1.0])
        if self.tag == "custom":
            return np.array(self.levels, dtype=np.float64)
        mags = [2.0 ** (-d) for d in range(self.depth + 1)]
        return np.array([0.0] + mags + [-v for v in mags])


@dataclass(frozen=True, eq=False)
class QuantGrid:
    """
    Ordered quantized values, their medians and the window variable

    Attributes:
        q: strictly increasing grid values (n_q >= 2)
        m: medians (q_i + q_{i+1}) / 2, length n_q - 1
        g: window variable, >= 1; math.inf removes every window
    """

    q: np.ndarray
    g: float = 1.0
    m: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 1 or q.size < 2:
            raise DomainError("a grid needs at least two values")
        if not np.all(np.diff(q) > 0):
            raise DomainError(f"grid values must be strictly increasing: {q.tolist()}")
        if not self.g >= 1:
            raise DomainError(f"window variable g must be >= 1, got {self.g}")
        q.setflags(write=False)
        m = (q[:-1] + q[1:]) / 2.0
        m.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "m", m)

    @classmethod
    def from_values(cls, values: Iterable[float], g: float = 1.0) -> "QuantGrid":
        q = np.asarray(list(values), dtype=np.float64)
        return cls(q=q, g=g)

    @property
    def n_q(self) -> int:
        return int(self.q.size)

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.q)

    @property
    def span(self) -> float:
        return float(self.q[-1] - self.q[0])

    @property
    def q_min(self) -> float:
        return float(self.q[0])

    @property
    def q_max(self) -> float:
        return float(self.q[-1])

    def half_widths(self) -> np.ndarray:
        """Window half-widths (q_{i+1} - q_i) / (2g); zeros when g is inf"""
        if math.isinf(self.g):
            return np.zeros(self.n_q - 1)
        return self.gaps / (2.0 * self.g)

    def with_window(self, g: float) -> "QuantGrid":
        return replace(self, g=float(g))

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "g": self.g}

    @classmethod
    def from_dict(cls, data: dict) -> "QuantGrid":
        return cls.from_values(data["q"], g=float(data.get("g", 1.0)))


def make_grid(kind: ConstraintKind, scale: float) -> QuantGrid:
    """
    Build the grid of a constraint kind for a layer scale factor a

    Args:
        kind: Constraint kind
        scale: Layer scale factor a > 0

    Returns:
        QuantGrid sorted ascending with g = 1

    Raises:
        DomainError: nonpositive or non-finite scale
    """
    if not (math.isfinite(scale) and scale > 0):
        raise DomainError(f"grid scale must be positive, got {scale}")
    levels = np.unique(kind.unit_levels() * float(scale))
    return QuantGrid.from_values(levels, g=1.0)


def _interval_index(w: np.ndarray, grid: QuantGrid) -> np.ndarray:
    """Index i with q_i <= w < q_{i+1}, clamped to the interior intervals"""
    idx = np.searchsorted(grid.q, w, side="right") - 1
    return np.clip(idx, 0, grid.n_q - 2)


def _unwrap(result: np.ndarray, w: ArrayLike):
    return float(result) if np.ndim(w) == 0 else result


def partial_sum_Y(w: ArrayLike, grid: QuantGrid, slope: float = DEFAULT_SLOPE):
    """
    Ungated sawtooth Y(w) = sum of the partial constraint functions

    Below q_1 it is s(q_1 - w), above q_nq it is s(w - q_nq), and on
    [q_i, q_{i+1}) it is s((q_{i+1} - q_i)/2 - |w - m_i|), evaluated as
    s * min(w - q_i, q_{i+1} - w) so that it is exactly zero on the grid.

    Args:
        w: weight or array of weights
        grid: quantization grid
        slope: sawtooth slope s

    Returns:
        Y(w) >= 0, same shape as w
    """
    w = np.asarray(w, dtype=np.float64)
    idx = _interval_index(w, grid)
    interior = slope * np.minimum(w - grid.q[idx], grid.q[idx + 1] - w)
    y = np.where(w < grid.q[0], slope * (grid.q[0] - w),
                 np.where(w >= grid.q[-1], slope * (w - grid.q[-1]), interior))
    return _unwrap(y, w)


def in_window(w: ArrayLike, grid: QuantGrid):
    """True where w lies inside an unconstrained-weight window"""
    w = np.asarray(w, dtype=np.float64)
    idx = _interval_index(w, grid)
    in_range = (w >= grid.q[0]) & (w < grid.q[-1])
    if grid.g == 1:
        # windows tile [q_1, q_nq) exactly
        inside = in_range
    else:
        h = grid.half_widths()[idx]
        m = grid.m[idx]
        inside = in_range & (w >= m - h) & (w < m + h)
    return bool(inside) if np.ndim(w) == 0 else inside


def window_ucs(w: ArrayLike, grid: QuantGrid):
    """
    Unconstrained-weight window gate

    Returns:
        0 inside a window [m_i - h_i, m_i + h_i), 1 elsewhere
    """
    gate = np.where(in_window(w, grid), 0.0, 1.0)
    return _unwrap(gate, w)


def constraint_cs(w: ArrayLike, grid: QuantGrid, slope: float = DEFAULT_SLOPE):
    """Gated constraint cs(w) = ucs(w) * Y(w)"""
    w = np.asarray(w, dtype=np.float64)
    cs = np.asarray(window_ucs(w, grid)) * np.asarray(partial_sum_Y(w, grid, slope))
    return _unwrap(cs, w)


def partial_sum_Y_grad(w: ArrayLike, grid: QuantGrid, slope: float = DEFAULT_SLOPE):
    """
    Subgradient of the ungated sawtooth

    -s below q_1, +s above q_nq, +s on [q_i, m_i), -s on [m_i, q_{i+1});
    0 exactly on every grid value.
    """
    w = np.asarray(w, dtype=np.float64)
    idx = _interval_index(w, grid)
    interior = np.where(w < grid.m[idx], slope, -slope)
    dy = np.where(w < grid.q[0], -slope, np.where(w >= grid.q[-1], slope, interior))
    on_grid = np.isin(w, grid.q)
    dy = np.where(on_grid, 0.0, dy)
    return _unwrap(dy, w)


def constraint_grad(w: ArrayLike, grid: QuantGrid, slope: float = DEFAULT_SLOPE):
    """
    Subgradient of cs with respect to w

    ucs is piecewise constant, so the derivative is ucs(w) * dY/dw: zero
    inside windows and on grid values, -s at an exact median.
    """
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(window_ucs(w, grid)) * np.asarray(partial_sum_Y_grad(w, grid, slope))
    return _unwrap(grad, w)


def window_boundary_hits(w: ArrayLike, grid: QuantGrid) -> int:
    """Number of weights lying exactly on a window edge |w - m_i| = h_i"""
    if math.isinf(grid.g):
        return 0
    w = np.asarray(w, dtype=np.float64).ravel()
    idx = _interval_index(w, grid)
    h = grid.half_widths()[idx]
    return int(np.count_nonzero(np.abs(w - grid.m[idx]) == h))


def cfs(weights: Union[ArrayLike, Sequence[np.ndarray]],
        grids: Union[QuantGrid, Sequence[QuantGrid]]) -> float:
    """
    Constraint-failure score: mean ungated Y over all constrained weights

    Args:
        weights: flat array for one grid, or one array per layer
        grids: one grid, or one grid per layer

    Returns:
        CFS >= 0, zero iff every weight lies on its grid

    Raises:
        DomainError: no weights
    """
    if isinstance(grids, QuantGrid):
        layers = [np.asarray(weights, dtype=np.float64).ravel()]
        grids = [grids]
    else:
        layers = [np.asarray(w, dtype=np.float64).ravel() for w in weights]
        if len(layers) != len(grids):
            raise DomainError(f"{len(layers)} weight arrays for {len(grids)} grids")

    n_w = sum(layer.size for layer in layers)
    if n_w == 0:
        raise DomainError("CFS needs at least one constrained weight")

    total = 0.0
    for layer, grid in zip(layers, grids):
        total += float(np.sum(partial_sum_Y(layer, grid)))
    return total / n_w
