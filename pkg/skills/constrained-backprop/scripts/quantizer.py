#!/usr/bin/env python3
"""
Layer-wise scale factors, the straight-through quantizer and clipping

Usage:
    from quantizer import scale_factor, ste_quantize, clip_weights

    a = scale_factor(W)                      # mean |W|
    grid = make_grid(kind, a)
    Wq = ste_quantize(W, grid)               # forward weights
    W = clip_weights(W, grid)                # keep W inside [q_1, q_nq]
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from constraint import ArrayLike, ConstraintKind, QuantGrid
from ndcore import l1_norm
from utils import DomainError

SCALE_POLICIES = ("frozen", "recompute")


@dataclass(frozen=True)
class LayerQuantConfig:
    """
    Quantization settings of one layer

    Attributes:
        exempt: layer keeps full-precision weights, no grid, no multipliers
        kind: constraint kind of the layer
        scale_policy: 'frozen' computes a once when CBP starts,
                      'recompute' rebuilds the grid every epoch
    """

    exempt: bool = False
    kind: ConstraintKind = field(default_factory=lambda: ConstraintKind("ternary"))
    scale_policy: str = "frozen"

    def __post_init__(self):
        if self.scale_policy not in SCALE_POLICIES:
            raise DomainError(
                f"Unknown scale policy '{self.scale_policy}'; expected one of "
                f"{', '.join(SCALE_POLICIES)}"
            )

    def to_dict(self) -> dict:
        return {
            "exempt": self.exempt,
            "kind": self.kind.tag,
            "levels": list(self.kind.levels),
            "scale_policy": self.scale_policy,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayerQuantConfig":
        return cls(
            exempt=bool(data["exempt"]),
            kind=ConstraintKind.parse(data["kind"], data.get("levels")),
            scale_policy=data.get("scale_policy", "frozen"),
        )


def scale_factor(W: ArrayLike) -> float:
    """
    Layer scale factor a = ||W||_1 / n

    Raises:
        DomainError: empty or all-zero matrix (the grid would collapse)
    """
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise DomainError("scale factor of an empty matrix")
    a = l1_norm(W) / W.size
    if a == 0.0:
        raise DomainError("scale factor of an all-zero matrix is zero")
    return a


def ste_quantize(w: ArrayLike, grid: QuantGrid):
    """
    Forward quantization map

    Closed form of q_1 + sum_i (q_{i+1} - q_i)(sign(w - m_i) + 1)/2 with
    sign(0) = +1: the number of medians <= w indexes the grid value, so the
    result is always an exact member of Q and ties at m_i go upward.
    """
    w = np.asarray(w, dtype=np.float64)
    wq = grid.q[np.searchsorted(grid.m, w, side="right")]
    return float(wq) if np.ndim(w) == 0 else wq


def hard_project(W: ArrayLike, grid: Optional[QuantGrid]):
    """On-grid copy of W; identity for exempt layers (grid None)"""
    if grid is None:
        return np.array(W, dtype=np.float64, copy=True)
    return ste_quantize(W, grid)


def ste_backward(upstream_grad: ArrayLike):
    """Straight-through estimator: dL/dw = dL/dw_q"""
    if np.ndim(upstream_grad) == 0:
        return float(upstream_grad)
    return np.array(upstream_grad, dtype=np.float64, copy=True)


def clip_weights(W: ArrayLike, grid: Optional[QuantGrid], exempt: bool = False):
    """
    Clamp every entry to [q_1, q_nq]

    Exempt layers (or grid None) are returned unchanged.
    """
    if exempt or grid is None:
        return np.asarray(W, dtype=np.float64)
    clipped = np.clip(np.asarray(W, dtype=np.float64), grid.q_min, grid.q_max)
    return float(clipped) if np.ndim(W) == 0 else clipped
