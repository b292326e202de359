#!/usr/bin/env python3
"""
Continuous-time model of constrained backpropagation

The weight/multiplier dynamics are integrated as an ODE:

    dW/dt      = -grad_W L / tau_w
    dlambda/dt =  cs(W) / tau_lambda
    dg/dt      =  g0 / tau_lambda        (window_mode 'vanishing' only)

with L = C + lambda^T cs. The module also reports the decomposition of
dL/dt into its descent and ascent parts, the equilibrium multipliers, the
population of weights around each grid value and the FLOP cost model.

Usage:
    from kinetics import QuadraticLoss, KineticsSystem, integrate

    system = KineticsSystem(QuadraticLoss([0.3]), make_grid(kind, 1.0), tau_w=1, tau_lambda=20)
    traj = integrate(system, [0.3], [0.0], t_end=200, dt=1e-2, method="rk4")
    equilibrium_report(system, traj)
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from cbp import window_increment
from constraint import (
    DEFAULT_SLOPE,
    ConstraintKind,
    QuantGrid,
    constraint_cs,
    constraint_grad,
    in_window,
    make_grid,
    window_boundary_hits,
)
from utils import DivergenceError, DomainError, setup_logging

logger = setup_logging(__name__)

# numpy 2 renamed trapz
_trapezoid = getattr(np, "trapezoid", None) or np.trapz

WINDOW_MODES = ("none", "vanishing")
METHODS = ("euler", "rk4")

# Reference network for the cost model: forward pass FLOPs, weight count and
# the fraction of iterations that update the multipliers
ALEXNET_FORWARD_FLOPS = 0.725e9
ALEXNET_WEIGHTS = 61_000_000
ALEXNET_UPDATE_FRACTION = 0.2


@dataclass
class QuadraticLoss:
    """C(w) = (w - w*)^T A (w - w*) / 2; A defaults to the identity"""

    w_star: np.ndarray
    A: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w_star = np.asarray(self.w_star, dtype=np.float64).ravel()
        n = self.w_star.size
        self.A = np.eye(n) if self.A is None else np.asarray(self.A, dtype=np.float64)
        if self.A.shape != (n, n):
            raise DomainError(f"A must be {n}x{n}, got {self.A.shape}")

    def value(self, w: np.ndarray) -> float:
        d = w - self.w_star
        return float(0.5 * d @ self.A @ d)

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.A @ (w - self.w_star)


@dataclass
class LogisticLoss:
    """Mean logistic loss of a linear model on fixed data, labels in {-1, +1}"""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise DomainError("logistic loss needs x of shape (n, d) and y of shape (n,)")

    @classmethod
    def random(cls, n_samples: int = 32, n_features: int = 3, seed: int = 0) -> "LogisticLoss":
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n_samples, n_features))
        w_true = rng.uniform(-1.0, 1.0, size=n_features)
        y = np.where(x @ w_true + 0.3 * rng.normal(size=n_samples) >= 0, 1.0, -1.0)
        return cls(x=x, y=y)

    def value(self, w: np.ndarray) -> float:
        margins = self.y * (self.x @ w)
        return float(np.mean(np.logaddexp(0.0, -margins)))

    def grad(self, w: np.ndarray) -> np.ndarray:
        margins = self.y * (self.x @ w)
        coef = -self.y / (1.0 + np.exp(margins))
        return self.x.T @ coef / self.x.shape[0]


Loss = Union[QuadraticLoss, LogisticLoss]


@dataclass
class KineticsSystem:
    """
    Weights, multipliers and window variable in continuous time

    Attributes:
        loss: object with value(w) and grad(w)
        grid: grid levels (its own g is ignored)
        tau_w, tau_lambda: time constants
        slope: sawtooth slope s
        window_mode: 'none' (no windows) or 'vanishing' (g grows with time)
        g_schedule: growth rate g0 of g, two-tier by default
    """

    loss: Loss
    grid: QuantGrid
    tau_w: float = 1.0
    tau_lambda: float = 10.0
    slope: float = DEFAULT_SLOPE
    window_mode: str = "none"
    g_schedule: str = "two-tier"

    def __post_init__(self):
        if not (self.tau_w > 0 and self.tau_lambda > 0):
            raise DomainError("time constants must be positive")
        if not self.slope > 0:
            raise DomainError(f"sawtooth slope must be positive, got {self.slope}")
        if self.window_mode not in WINDOW_MODES:
            raise DomainError(f"Unknown window mode '{self.window_mode}'")

    def grid_at(self, g: float) -> QuantGrid:
        return self.grid.with_window(math.inf if self.window_mode == "none" else g)

    def rhs(self, w: np.ndarray, lam: np.ndarray, g: float) -> Tuple[np.ndarray, np.ndarray, float]:
        grid = self.grid_at(g)
        dC = self.loss.grad(w)
        cs = constraint_cs(w, grid, self.slope)
        dcs = constraint_grad(w, grid, self.slope)
        dw = -(dC + lam * dcs) / self.tau_w
        dlam = cs / self.tau_lambda
        dg = 0.0
        if self.window_mode == "vanishing":
            dg = window_increment(g, self.g_schedule) / self.tau_lambda
        return dw, dlam, dg

    def lagrangian(self, w: np.ndarray, lam: np.ndarray, g: float) -> float:
        cs = constraint_cs(w, self.grid_at(g), self.slope)
        return self.loss.value(w) + float(np.dot(lam, cs))


@dataclass
class LyapunovTerms:
    dL_dt: float
    descent: float
    ascent: float
    descent_in_window: float = 0.0
    descent_out_window: float = 0.0


@dataclass
class Trajectory:
    """Time-stamped samples of an integration run"""

    t: List[float] = field(default_factory=list)
    w: List[np.ndarray] = field(default_factory=list)
    lam: List[np.ndarray] = field(default_factory=list)
    g: List[float] = field(default_factory=list)
    L: List[float] = field(default_factory=list)
    descent: List[float] = field(default_factory=list)
    ascent: List[float] = field(default_factory=list)
    cs: List[np.ndarray] = field(default_factory=list)
    boundary_hits: int = 0
    converged: bool = False

    def __len__(self) -> int:
        return len(self.t)

    def record(self, system: KineticsSystem, t: float, w, lam, g: float) -> None:
        if self.t and not t > self.t[-1]:
            raise DomainError(f"timestamps must increase: {t} after {self.t[-1]}")
        terms = lyapunov_decomposition(system, w, lam, g)
        self.t.append(float(t))
        self.w.append(np.array(w, dtype=np.float64))
        self.lam.append(np.array(lam, dtype=np.float64))
        self.g.append(float(g))
        self.L.append(system.lagrangian(w, lam, g))
        self.descent.append(terms.descent)
        self.ascent.append(terms.ascent)
        self.cs.append(constraint_cs(np.asarray(w), system.grid_at(g), system.slope))

    def arrays(self) -> dict:
        return {
            "t": np.asarray(self.t),
            "w": np.vstack(self.w),
            "lam": np.vstack(self.lam),
            "g": np.asarray(self.g),
            "L": np.asarray(self.L),
            "descent": np.asarray(self.descent),
            "ascent": np.asarray(self.ascent),
            "cs": np.vstack(self.cs),
        }


def lyapunov_decomposition(system: KineticsSystem, W, lam, g: float = 1.0) -> LyapunovTerms:
    """
    dL/dt = -sum (dC/dw + lambda dcs/dw)^2 / tau_w + sum cs^2 / tau_lambda

    Weights inside a window have cs = 0 and contribute only
    -(dC/dw)^2 / tau_w; the descent term is split accordingly. The dL/dg
    contribution is taken as zero.
    """
    w = np.asarray(W, dtype=np.float64).ravel()
    lam = np.asarray(lam, dtype=np.float64).ravel()
    grid = system.grid_at(g)
    dC = system.loss.grad(w)
    cs = np.asarray(constraint_cs(w, grid, system.slope))
    dL_dw = dC + lam * np.asarray(constraint_grad(w, grid, system.slope))
    per_weight = -(dL_dw ** 2) / system.tau_w
    inside = np.asarray(in_window(w, grid)) if system.window_mode == "vanishing" \
        else np.zeros(w.size, dtype=bool)
    descent = float(per_weight.sum())
    ascent = float(np.sum(cs ** 2) / system.tau_lambda)
    return LyapunovTerms(
        dL_dt=descent + ascent,
        descent=descent,
        ascent=ascent,
        descent_in_window=float(per_weight[inside].sum()),
        descent_out_window=float(per_weight[~inside].sum()),
    )


def _step(system: KineticsSystem, w, lam, g, dt: float, method: str):
    if method == "euler":
        dw, dlam, dg = system.rhs(w, lam, g)
        return w + dt * dw, lam + dt * dlam, g + dt * dg

    k1 = system.rhs(w, lam, g)
    k2 = system.rhs(w + 0.5 * dt * k1[0], lam + 0.5 * dt * k1[1], g + 0.5 * dt * k1[2])
    k3 = system.rhs(w + 0.5 * dt * k2[0], lam + 0.5 * dt * k2[1], g + 0.5 * dt * k2[2])
    k4 = system.rhs(w + dt * k3[0], lam + dt * k3[1], g + dt * k3[2])
    return (
        w + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        lam + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        g + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
    )


def integrate(system: KineticsSystem, w0, lambda0, t_end: float, dt: float,
              method: str = "euler", g0: float = 1.0,
              converge_tol: Optional[float] = None,
              sample_every: int = 1) -> Trajectory:
    """
    Integrate the weight/multiplier ODE from t = 0 to t_end

    Args:
        system: kinetics system
        w0, lambda0: initial weights and multipliers
        t_end: final time
        dt: step size; the last step is shortened to land on t_end
        method: euler or rk4
        g0: initial window variable
        converge_tol: stop once max |dW/dt| falls below this value
        sample_every: record every k-th step (the final state is always recorded)

    Returns:
        Trajectory

    Raises:
        DomainError: nonpositive dt or t_end, unknown method, shape mismatch
        DivergenceError: non-finite state; .state holds the partial trajectory
    """
    if not (dt > 0 and t_end > 0):
        raise DomainError(f"dt and t_end must be positive, got dt={dt}, t_end={t_end}")
    if method not in METHODS:
        raise DomainError(f"Unknown integration method '{method}'")
    w = np.asarray(w0, dtype=np.float64).ravel().copy()
    lam = np.asarray(lambda0, dtype=np.float64).ravel().copy()
    if w.shape != lam.shape:
        raise DomainError(f"w0 has {w.size} entries but lambda0 has {lam.size}")
    g = float(g0)

    traj = Trajectory()
    traj.record(system, 0.0, w, lam, g)
    t = 0.0
    step = 0
    while t < t_end:
        h = min(dt, t_end - t)
        w, lam, g = _step(system, w, lam, g, h, method)
        t = t + h if t_end - (t + h) > 1e-12 * t_end else t_end
        step += 1
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(lam)) and math.isfinite(g)):
            logger.error(f"kinetics diverged at t={t:g}")
            raise DivergenceError(f"non-finite state at t={t:g}", state=traj)
        if system.window_mode == "vanishing":
            traj.boundary_hits += window_boundary_hits(w, system.grid_at(g))

        dw = system.rhs(w, lam, g)[0]
        done = converge_tol is not None and float(np.max(np.abs(dw))) < converge_tol
        if done or t >= t_end or step % sample_every == 0:
            traj.record(system, t, w, lam, g)
        if done:
            traj.converged = True
            break

    if traj.boundary_hits:
        logger.warning(f"{traj.boundary_hits} window-edge hits; dL/dg was not zero there")
    logger.info(f"integrated to t={t:g} in {step} steps ({method}), converged={traj.converged}")
    return traj


def delta_cs(trajectory: Trajectory) -> np.ndarray:
    """Trapezoidal integral of cs(t) over the recorded samples"""
    arr = trajectory.arrays()
    if len(trajectory) < 2:
        return np.zeros(arr["cs"].shape[1])
    return _trapezoid(arr["cs"], arr["t"], axis=0)


@dataclass
class EquilibriumReport:
    lambda_star: np.ndarray
    delta_cs: np.ndarray
    predicted_lambda: np.ndarray
    identity_residual: float
    loss_grad: np.ndarray
    grad_ratio: np.ndarray


def equilibrium_report(system: KineticsSystem, trajectory: Trajectory) -> EquilibriumReport:
    """
    Compare the final multipliers with lambda(0) + delta_cs / tau_lambda

    grad_ratio is |dC/dw| / (s lambda*), which is 1 for a weight pinned to a
    grid value by a tight multiplier.
    """
    arr = trajectory.arrays()
    lam_star = arr["lam"][-1]
    dcs = delta_cs(trajectory)
    predicted = arr["lam"][0] + dcs / system.tau_lambda
    residual = float(np.max(np.abs(lam_star - predicted) / np.maximum(np.abs(lam_star), 1e-12)))
    grad = system.loss.grad(arr["w"][-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(grad) / (system.slope * lam_star)
    return EquilibriumReport(
        lambda_star=lam_star,
        delta_cs=dcs,
        predicted_lambda=predicted,
        identity_residual=residual,
        loss_grad=grad,
        grad_ratio=ratio,
    )


@dataclass
class PopulationSeries:
    """Fraction of weights near each grid value, one row per sample"""

    levels: np.ndarray
    fractions: np.ndarray
    events: List[int] = field(default_factory=list)

    @property
    def total(self) -> np.ndarray:
        return self.fractions.sum(axis=1)


def population_fractions(w, grid: QuantGrid, delta: float) -> np.ndarray:
    """Fraction of weights within delta of each grid value"""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        return np.zeros(grid.n_q)
    near = np.abs(w[:, np.newaxis] - grid.q[np.newaxis, :]) <= delta
    return near.sum(axis=0) / w.size


def population_track(samples: Union[Trajectory, Sequence[np.ndarray]], grid: QuantGrid,
                     delta: float, events: Optional[Sequence[int]] = None) -> PopulationSeries:
    """
    Population of weights around each grid value over time

    Args:
        samples: trajectory, or weight arrays one per sample (e.g. per epoch)
        grid: quantization grid
        delta: capture radius, 0 < delta < half the smallest gap
        events: sample indices where g was updated

    Raises:
        DomainError: delta out of range
    """
    half_gap = float(np.min(grid.gaps)) / 2.0
    if not (0 < delta < half_gap):
        raise DomainError(f"population delta must lie in (0, {half_gap:g}), got {delta}")
    weights = samples.w if isinstance(samples, Trajectory) else list(samples)
    rows = [population_fractions(w, grid, delta) for w in weights]
    fractions = np.vstack(rows) if rows else np.zeros((0, grid.n_q))
    return PopulationSeries(levels=grid.q.copy(), fractions=fractions, events=list(events or []))


def flop_estimate(n_w: float, forward_flops: float, p: float) -> float:
    """
    FLOPs per CBP iteration: 2 forward_flops + 2 (p + 3) n_w

    p is the fraction of iterations that update the multipliers.
    """
    if n_w < 0 or forward_flops < 0:
        raise DomainError("FLOP inputs must be nonnegative")
    if not 0 <= p <= 1:
        raise DomainError(f"multiplier update fraction must lie in [0, 1], got {p}")
    return 2.0 * forward_flops + 2.0 * (p + 3.0) * n_w


def backprop_flop_estimate(forward_flops: float) -> float:
    if forward_flops < 0:
        raise DomainError("FLOP inputs must be nonnegative")
    return 2.0 * forward_flops


def flop_ratio(n_w: float, forward_flops: float, p: float) -> float:
    """CBP cost relative to plain backprop"""
    return flop_estimate(n_w, forward_flops, p) / backprop_flop_estimate(forward_flops)


def export_csv(trajectory: Trajectory, path: Union[str, Path]) -> Path:
    """Write t, w_*, lambda_*, g, L, descent_term, ascent_term, one row per sample"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = trajectory.w[0].size if trajectory.w else 0
    header = (["t"] + [f"w_{i}" for i in range(n)] + [f"lambda_{i}" for i in range(n)]
              + ["g", "L", "descent_term", "ascent_term"])
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for k in range(len(trajectory)):
            writer.writerow(
                [repr(trajectory.t[k])]
                + [repr(float(v)) for v in trajectory.w[k]]
                + [repr(float(v)) for v in trajectory.lam[k]]
                + [repr(trajectory.g[k]), repr(trajectory.L[k]),
                   repr(trajectory.descent[k]), repr(trajectory.ascent[k])]
            )
    return path


SCENARIOS = ("quadratic-ternary", "quadratic-vanishing", "logistic")


def build_scenario(name: str, seed: int = 0) -> Tuple[KineticsSystem, np.ndarray, np.ndarray]:
    """
    Built-in systems for the command line

    quadratic-ternary:   C = (w - 0.3)^2 / 2 on the ternary grid, no window
    quadratic-vanishing: three weights, ternary grid, vanishing windows
    logistic:            fixed-data logistic loss on the ternary grid
    """
    grid = make_grid(ConstraintKind("ternary"), 1.0)
    if name == "quadratic-ternary":
        # tau_lambda >= 16 tau_w keeps the approach to w = 0 overdamped
        system = KineticsSystem(QuadraticLoss([0.3]), grid, tau_w=1.0, tau_lambda=20.0)
        return system, np.array([0.3]), np.zeros(1)
    if name == "quadratic-vanishing":
        w_star = np.array([0.3, -0.6, 0.9])
        system = KineticsSystem(QuadraticLoss(w_star), grid, tau_w=1.0, tau_lambda=10.0,
                                window_mode="vanishing")
        return system, w_star.copy(), np.zeros(3)
    if name == "logistic":
        loss = LogisticLoss.random(seed=seed)
        system = KineticsSystem(loss, grid, tau_w=1.0, tau_lambda=10.0)
        w0 = np.random.default_rng(seed).uniform(-0.9, 0.9, size=loss.x.shape[1])
        return system, w0, np.zeros(w0.size)
    raise DomainError(f"Unknown kinetics scenario '{name}'; expected one of {', '.join(SCENARIOS)}")
