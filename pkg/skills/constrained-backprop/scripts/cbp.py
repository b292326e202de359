#!/usr/bin/env python3
"""
Constrained backpropagation optimizer

Training minimizes the Lagrangian L = C + sum_i lambda_i cs_i(w_i) with
simultaneous descent on the weights and ascent on the multipliers:

- weights move every mini-batch:  W <- clip(W - eta_W grad_W L)
- multipliers and the window variable g move at most once per epoch, when
  the summed Lagrangian of the epoch did not decrease or p_max epochs
  passed without an update (quasi-static schedule)

Usage:
    from cbp import create_train_state, run_cbp

    state = create_train_state(pretrained_net, eta_w=1e-3, eta_lambda=1e-4)
    state, metrics = run_cbp(state, x_train, y_train, epochs=200, batch_size=64)
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from constraint import QuantGrid, cfs, constraint_cs, constraint_grad, make_grid
from network import Gradients, Network, accuracy, backward, forward, loss
from quantizer import clip_weights, scale_factor
from utils import ContractError, DivergenceError, DomainError, setup_logging

logger = setup_logging(__name__)

LAMBDA_OPTIMIZERS = ("adam", "raw")
TRAIN_MODES = ("cbp", "cbp-no-window", "ste-only", "full-precision")
G_SCHEDULES = ("three-tier", "two-tier")


def window_increment(g: float, schedule: str = "three-tier") -> float:
    """
    Step added to g when the window variable is updated

    three-tier: 1 below 10, 10 below 100, 100 otherwise
    two-tier:   1 below 10, 10 otherwise
    """
    if schedule not in G_SCHEDULES:
        raise DomainError(f"Unknown g schedule '{schedule}'")
    if g < 10:
        return 1.0
    if g < 100 or schedule == "two-tier":
        return 10.0
    return 100.0


@dataclass
class MultiplierState:
    """
    Lagrange multipliers of the constrained weights and their schedule

    lam, m1 and m2 hold one array per constrained layer, shaped like W.
    """

    lam: List[np.ndarray]
    m1: List[np.ndarray]
    m2: List[np.ndarray]
    eta_lambda: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    p: int = 0
    p_max: int = 20
    L_sum_prev: Optional[float] = None

    def __post_init__(self):
        if self.optimizer not in LAMBDA_OPTIMIZERS:
            raise DomainError(f"Unknown multiplier optimizer '{self.optimizer}'")
        if self.p_max < 1:
            raise DomainError(f"p_max must be >= 1, got {self.p_max}")

    @classmethod
    def zeros(cls, shapes: Sequence[Tuple[int, ...]], **kwargs) -> "MultiplierState":
        return cls(
            lam=[np.zeros(s) for s in shapes],
            m1=[np.zeros(s) for s in shapes],
            m2=[np.zeros(s) for s in shapes],
            **kwargs,
        )

    @property
    def count(self) -> int:
        return sum(lam.size for lam in self.lam)

    def l1(self) -> float:
        return float(sum(np.abs(lam).sum() for lam in self.lam))


@dataclass
class WeightOptimizerState:
    """
    Momentum SGD on the weights

    The learning rate drops by lr_decay_factor once, the first time g
    reaches lr_decay_g.
    """

    vW: List[np.ndarray]
    vb: List[np.ndarray]
    eta_w: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_g: float = 20.0
    lr_decay_factor: float = 0.1
    lr_decayed: bool = False

    @classmethod
    def for_network(cls, net: Network, **kwargs) -> "WeightOptimizerState":
        return cls(
            vW=[np.zeros_like(layer.W) for layer in net.layers],
            vb=[np.zeros_like(layer.b) for layer in net.layers],
            **kwargs,
        )

    @property
    def current_eta(self) -> float:
        return self.eta_w * self.lr_decay_factor if self.lr_decayed else self.eta_w


@dataclass
class StepStats:
    lagrangian: float
    loss: float
    constraint_term: float


@dataclass
class MetricsRow:
    """One row of the per-epoch metrics series"""

    epoch: int
    train_loss: float
    lagrangian_sum: float
    cfs: float
    eval_top1: float
    g: float
    lambda_l1: float
    multiplier_updated: bool


@dataclass
class TrainState:
    """
    Everything needed to resume training bit for bit

    grids hold the layer levels (None for exempt layers); the window variable
    in effect is self.g, or infinity in cbp-no-window mode.
    """

    network: Network
    grids: List[Optional[QuantGrid]]
    multipliers: Optional[MultiplierState]
    optimizer: WeightOptimizerState
    g: float = 1.0
    epoch: int = 0
    seed: int = 0
    mode: str = "cbp"
    g_schedule: str = "three-tier"
    rng: np.random.Generator = field(default=None, repr=False)
    initialized: bool = False
    pretrained: bool = True
    in_epoch: bool = False
    last_step: Optional[StepStats] = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise DomainError(f"Unknown training mode '{self.mode}'")
        if self.g_schedule not in G_SCHEDULES:
            raise DomainError(f"Unknown g schedule '{self.g_schedule}'")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def uses_constraint(self) -> bool:
        return self.mode in ("cbp", "cbp-no-window")

    @property
    def forward_mode(self) -> str:
        return "full-precision" if self.mode == "full-precision" else "quantized"

    def constrained_indices(self) -> List[int]:
        return [i for i, grid in enumerate(self.grids) if grid is not None]

    def effective_grids(self) -> List[Optional[QuantGrid]]:
        g = math.inf if self.mode == "cbp-no-window" else self.g
        return [grid.with_window(g) if grid is not None else None for grid in self.grids]


def build_grids(net: Network) -> List[Optional[QuantGrid]]:
    """One grid per constrained layer from its current scale factor"""
    grids: List[Optional[QuantGrid]] = []
    for layer in net.layers:
        if layer.quant.exempt:
            grids.append(None)
        else:
            grids.append(make_grid(layer.quant.kind, scale_factor(layer.W)))
    return grids


def create_train_state(
    net: Network,
    mode: str = "cbp",
    eta_w: float = 1e-3,
    eta_lambda: float = 1e-4,
    lambda_optimizer: str = "adam",
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    p_max: int = 20,
    g_schedule: str = "three-tier",
    lr_decay_g: float = 20.0,
    lr_decay_factor: float = 0.1,
    seed: int = 0,
    pretrained: bool = True,
) -> TrainState:
    """
    Fresh training state around a network

    Grids are built from the current weights (scale frozen at start);
    multipliers are allocated only for modes that use the constraint.
    """
    if eta_w <= 0 or eta_lambda < 0:
        raise DomainError("learning rates must be positive")
    grids = build_grids(net) if mode != "full-precision" else [None] * len(net.layers)
    multipliers = None
    if mode in ("cbp", "cbp-no-window"):
        shapes = [net.layers[i].W.shape for i, grid in enumerate(grids) if grid is not None]
        multipliers = MultiplierState.zeros(
            shapes,
            eta_lambda=eta_lambda,
            optimizer=lambda_optimizer,
            p_max=p_max,
        )
    optimizer = WeightOptimizerState.for_network(
        net,
        eta_w=eta_w,
        momentum=momentum,
        weight_decay=weight_decay,
        lr_decay_g=lr_decay_g,
        lr_decay_factor=lr_decay_factor,
    )
    return TrainState(
        network=net,
        grids=grids,
        multipliers=multipliers,
        optimizer=optimizer,
        seed=seed,
        mode=mode,
        g_schedule=g_schedule,
        pretrained=pretrained,
    )


def _multiplier_arrays(multipliers, n_constrained: int) -> List[np.ndarray]:
    if multipliers is None:
        return []
    lam = multipliers.lam if isinstance(multipliers, MultiplierState) else list(multipliers)
    if len(lam) != n_constrained:
        raise ContractError(
            f"{len(lam)} multiplier arrays for {n_constrained} constrained layers"
        )
    return lam


def constraint_values(net: Network, grids: Sequence[Optional[QuantGrid]]) -> List[np.ndarray]:
    """cs(W) for every constrained layer, using the grids as given"""
    return [constraint_cs(net.layers[i].W, grid)
            for i, grid in enumerate(grids) if grid is not None]


def lagrangian(net: Network, batch, labels, multipliers,
               grids: Sequence[Optional[QuantGrid]],
               mode: str = "quantized") -> Tuple[float, float, float]:
    """
    Lagrangian of one batch

    Args:
        net: network
        batch, labels: mini-batch
        multipliers: MultiplierState, list of per-layer arrays, or None
        grids: per-layer grids carrying the window variable in effect
        mode: forward mode for the loss (quantized uses the STE forward)

    Returns:
        (L, C, lambda^T cs); the constraint term uses the real-valued weights

    Raises:
        ContractError: multiplier count or shape mismatch
    """
    logits, _ = forward(net, batch, mode, grids)
    c = loss(logits, labels)
    term = 0.0
    constrained = [i for i, grid in enumerate(grids) if grid is not None]
    lam = _multiplier_arrays(multipliers, len(constrained)) if multipliers is not None else []
    for lam_l, i in zip(lam, constrained):
        W = net.layers[i].W
        if lam_l.shape != W.shape:
            raise ContractError(
                f"multipliers of layer {i} have shape {lam_l.shape}, weights {W.shape}"
            )
        term += float(np.sum(lam_l * constraint_cs(W, grids[i])))
    return c + term, c, term


def lagrangian_gradient(net: Network, batch, labels, multipliers,
                        grids: Sequence[Optional[QuantGrid]],
                        mode: str = "quantized") -> Tuple[Gradients, StepStats]:
    """
    grad_W L = dC/dW (straight-through in quantized mode) + lambda * dcs/dW

    Biases receive the loss gradient only.
    """
    logits, trace = forward(net, batch, mode, grids)
    c = loss(logits, labels)
    grads = backward(net, trace, labels)
    constrained = [i for i, grid in enumerate(grids) if grid is not None]
    lam = _multiplier_arrays(multipliers, len(constrained)) if multipliers is not None else []
    term = 0.0
    for lam_l, i in zip(lam, constrained):
        W = net.layers[i].W
        if lam_l.shape != W.shape:
            raise ContractError(
                f"multipliers of layer {i} have shape {lam_l.shape}, weights {W.shape}"
            )
        term += float(np.sum(lam_l * constraint_cs(W, grids[i])))
        grads.dW[i] = grads.dW[i] + lam_l * constraint_grad(W, grids[i])
    return grads, StepStats(lagrangian=c + term, loss=c, constraint_term=term)


def bdmm_weight_update(W: np.ndarray, dC: np.ndarray, velocity: np.ndarray, eta: float,
                       momentum: float = 0.0, weight_decay: float = 0.0,
                       lam: Optional[np.ndarray] = None, grid: Optional[QuantGrid] = None,
                       clip: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    One descent step on a weight matrix

    Momentum and weight decay act on the loss component only; the
    constraint component lam * dcs/dW is applied directly.

    Returns:
        (new W, new velocity)
    """
    velocity = momentum * velocity + (dC + weight_decay * W)
    step = velocity
    if lam is not None and grid is not None:
        step = velocity + lam * constraint_grad(W, grid)
    W_new = W - eta * step
    if clip and grid is not None:
        W_new = clip_weights(W_new, grid)
    return W_new, velocity


def weight_step(state: TrainState, batch, labels) -> TrainState:
    """
    One mini-batch update of weights and biases

    The Lagrangian evaluated before the update is stored in state.last_step.

    Raises:
        DivergenceError: non-finite gradient, with the layer index
    """
    net = state.network
    opt = state.optimizer
    grids = state.effective_grids()
    mode = state.forward_mode

    logits, trace = forward(net, batch, mode, grids)
    c = loss(logits, labels)
    grads = backward(net, trace, labels)

    lam_by_layer = {}
    if state.uses_constraint:
        constrained = state.constrained_indices()
        lam = _multiplier_arrays(state.multipliers, len(constrained))
        lam_by_layer = dict(zip(constrained, lam))

    # backward order, so the reported layer is where the gradient first broke
    for i in reversed(range(len(net.layers))):
        if not (np.all(np.isfinite(grads.dW[i])) and np.all(np.isfinite(grads.db[i]))):
            raise DivergenceError(f"non-finite gradient in layer {i}", layer=i)

    term = 0.0
    eta = opt.current_eta
    for i, layer in enumerate(net.layers):
        grid = grids[i]
        lam_l = lam_by_layer.get(i)
        if lam_l is not None:
            term += float(np.sum(lam_l * constraint_cs(layer.W, grid)))
        layer.W, opt.vW[i] = bdmm_weight_update(
            layer.W, grads.dW[i], opt.vW[i], eta,
            momentum=opt.momentum,
            weight_decay=opt.weight_decay,
            lam=lam_l,
            grid=grid,
            clip=grid is not None,
        )
        opt.vb[i] = opt.momentum * opt.vb[i] + grads.db[i]
        layer.b = layer.b - eta * opt.vb[i]

    net.touch()
    state.last_step = StepStats(lagrangian=c + term, loss=c, constraint_term=term)
    return state


def multiplier_step(state: TrainState,
                    epoch_cs_values: Optional[Sequence[np.ndarray]] = None) -> TrainState:
    """
    Gradient ascent on the multipliers: lambda <- lambda + eta_lambda * cs

    adam mode feeds cs through bias-corrected first and second moments; raw
    mode adds eta_lambda * cs directly.

    Args:
        state: training state at an epoch boundary
        epoch_cs_values: cs per constrained layer; computed from the current
                         weights and window when omitted

    Raises:
        ContractError: called mid-epoch, no multipliers, or shape mismatch
    """
    if state.in_epoch:
        raise ContractError("multiplier_step may only run at an epoch boundary")
    mult = state.multipliers
    if mult is None:
        raise ContractError(f"mode '{state.mode}' has no Lagrange multipliers")
    if epoch_cs_values is None:
        epoch_cs_values = constraint_values(state.network, state.effective_grids())
    if len(epoch_cs_values) != len(mult.lam):
        raise ContractError(
            f"{len(epoch_cs_values)} constraint arrays for {len(mult.lam)} multiplier arrays"
        )

    mult.steps += 1
    for k, cs in enumerate(epoch_cs_values):
        cs = np.asarray(cs, dtype=np.float64)
        if cs.shape != mult.lam[k].shape:
            raise ContractError(
                f"constraint array {k} has shape {cs.shape}, multipliers {mult.lam[k].shape}"
            )
        if mult.optimizer == "raw":
            mult.lam[k] = mult.lam[k] + mult.eta_lambda * cs
            continue
        mult.m1[k] = mult.beta1 * mult.m1[k] + (1.0 - mult.beta1) * cs
        mult.m2[k] = mult.beta2 * mult.m2[k] + (1.0 - mult.beta2) * cs * cs
        m_hat = mult.m1[k] / (1.0 - mult.beta1 ** mult.steps)
        v_hat = mult.m2[k] / (1.0 - mult.beta2 ** mult.steps)
        mult.lam[k] = mult.lam[k] + mult.eta_lambda * m_hat / (np.sqrt(v_hat) + mult.eps)
    return state


def epoch_scheduler(state: TrainState, L_sum: float) -> bool:
    """
    End-of-epoch update of g and the multipliers

    Fires when L_sum >= previous L_sum or p reaches p_max: g grows by its
    schedule step, the multipliers ascend on cs at the new g, p resets.
    Otherwise only the previous sum is replaced.

    Returns:
        True when the update fired
    """
    mult = state.multipliers
    if mult is None:
        return False

    mult.p += 1
    prev = mult.L_sum_prev
    fire = (prev is not None and L_sum >= prev) or mult.p >= mult.p_max
    if not fire:
        mult.L_sum_prev = L_sum
        return False

    state.g = state.g + window_increment(state.g, state.g_schedule)
    multiplier_step(state)
    mult.p = 0
    # the next comparison is against this epoch's sum
    mult.L_sum_prev = L_sum
    logger.info(f"multiplier update: g={state.g:g}, |lambda|_1={mult.l1():.6g}")

    opt = state.optimizer
    if not opt.lr_decayed and state.g >= opt.lr_decay_g:
        opt.lr_decayed = True
        logger.info(
            f"weight learning rate decayed to {opt.current_eta:g} at g={state.g:g}"
        )
    return True


def refresh_grids(state: TrainState) -> None:
    """Rebuild grids of layers whose scale policy is 'recompute'"""
    for i, layer in enumerate(state.network.layers):
        if state.grids[i] is not None and layer.quant.scale_policy == "recompute":
            state.grids[i] = make_grid(layer.quant.kind, scale_factor(layer.W))


def state_cfs(state: TrainState) -> float:
    """CFS over every constrained layer (0.0 when nothing is constrained)"""
    constrained = state.constrained_indices()
    if not constrained:
        return 0.0
    return cfs([state.network.layers[i].W for i in constrained],
               [state.grids[i] for i in constrained])


def evaluate(state: TrainState, x, y, mode: Optional[str] = None) -> float:
    """Top-1 accuracy of the state's network"""
    mode = mode or state.forward_mode
    grids = state.effective_grids() if mode == "quantized" else None
    logits, _ = forward(state.network, x, mode, grids)
    return accuracy(logits, y)


def train_epochs(state: TrainState, x, y, epochs: int, batch_size: int,
                 eval_x=None, eval_y=None,
                 on_epoch: Optional[Callable[[TrainState, MetricsRow], None]] = None
                 ) -> Tuple[TrainState, List[MetricsRow]]:
    """
    Epoch loop shared by pre-training and every post-training mode

    Raises:
        DivergenceError: non-finite Lagrangian or gradient; .state holds the
                         state as of the start of the failing epoch
    """
    if batch_size < 1:
        raise DomainError(f"batch size must be >= 1, got {batch_size}")
    metrics: List[MetricsRow] = []
    if epochs <= 0:
        return state, metrics

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    if n == 0:
        raise DomainError("training set is empty")
    if eval_x is None:
        eval_x, eval_y = x, y

    if state.uses_constraint and not state.initialized:
        multiplier_step(state)
        state.initialized = True
        logger.info(f"initial multiplier update: |lambda|_1={state.multipliers.l1():.6g}")

    for _ in range(epochs):
        snapshot = copy.deepcopy(state)
        refresh_grids(state)
        state.in_epoch = True
        order = state.rng.permutation(n)
        L_sum = 0.0
        loss_sum = 0.0
        n_batches = 0
        try:
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                weight_step(state, x[idx], y[idx])
                step = state.last_step
                if not math.isfinite(step.lagrangian):
                    raise DivergenceError(
                        f"non-finite Lagrangian at epoch {state.epoch + 1}"
                    )
                L_sum += step.lagrangian
                loss_sum += step.loss
                n_batches += 1
        except DivergenceError as exc:
            logger.error(f"training diverged: {exc}")
            raise DivergenceError(str(exc), layer=exc.layer, state=snapshot) from exc
        state.in_epoch = False

        updated = epoch_scheduler(state, L_sum)
        state.epoch += 1

        row = MetricsRow(
            epoch=state.epoch,
            train_loss=loss_sum / n_batches,
            lagrangian_sum=L_sum,
            cfs=state_cfs(state),
            eval_top1=evaluate(state, eval_x, eval_y),
            g=state.g,
            lambda_l1=state.multipliers.l1() if state.multipliers is not None else 0.0,
            multiplier_updated=updated,
        )
        metrics.append(row)
        logger.info(
            f"epoch {row.epoch}: loss={row.train_loss:.5f} L_sum={row.lagrangian_sum:.5f} "
            f"cfs={row.cfs:.3e} acc={row.eval_top1:.4f} g={row.g:g} "
            f"updated={row.multiplier_updated}"
        )
        if on_epoch is not None:
            on_epoch(state, row)
    return state, metrics


def run_cbp(state: TrainState, x, y, epochs: int, batch_size: int,
            eval_x=None, eval_y=None, allow_untrained: bool = False,
            on_epoch: Optional[Callable[[TrainState, MetricsRow], None]] = None
            ) -> Tuple[TrainState, List[MetricsRow]]:
    """
    Post-train a pre-trained network under the weight constraints

    Runs the initial multiplier update, per-batch weight steps and the
    per-epoch scheduler; 0 epochs returns the state untouched.

    Args:
        state: state built with create_train_state
        x, y: training set
        epochs: number of epochs N
        batch_size: mini-batch size
        eval_x, eval_y: evaluation set for the accuracy column (train set if omitted)
        allow_untrained: accept a network that was not pre-trained
        on_epoch: callback after every epoch

    Returns:
        (state, metrics series)
    """
    if state.mode == "full-precision":
        raise ContractError("run_cbp needs a quantized mode; use train_epochs to pre-train")
    if not state.pretrained:
        if not allow_untrained:
            raise ContractError(
                "network is not pre-trained; pass allow_untrained=True to train from scratch"
            )
        logger.warning("CBP on an untrained network rarely reaches pre-trained accuracy")
    return train_epochs(state, x, y, epochs, batch_size, eval_x, eval_y, on_epoch)
