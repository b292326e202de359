#!/usr/bin/env python3
"""
Experiment harness for constrained backpropagation

Loads datasets, pre-trains full-precision networks, runs CBP post-training
and its ablations, writes metrics/histograms/checkpoints and exposes the
command line.

Usage:
    python3 harness.py pretrain --config moons.cfg
    python3 harness.py train --config moons.cfg --set constraint=ternary
    python3 harness.py eval runs/cbp/final.ckpt
    python3 harness.py inspect runs/cbp/final.ckpt
    python3 harness.py inspect --help-config
    python3 harness.py kinetics --set kinetics_scenario=quadratic-ternary
"""

import argparse
import csv
import json
import struct
import sys
import time
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values

from cbp import (
    G_SCHEDULES,
    LAMBDA_OPTIMIZERS,
    TRAIN_MODES,
    MetricsRow,
    MultiplierState,
    TrainState,
    WeightOptimizerState,
    build_grids,
    create_train_state,
    run_cbp,
    state_cfs,
    train_epochs,
)
from constraint import ConstraintKind, QuantGrid, cfs
from kinetics import (
    METHODS,
    SCENARIOS,
    build_scenario,
    equilibrium_report,
    export_csv,
    integrate,
    population_fractions,
)
from network import ACTIVATIONS, DenseLayer, Network, forward, accuracy, init_network
from quantizer import SCALE_POLICIES, LayerQuantConfig
from utils import (
    CBPError,
    CheckpointVersionError,
    ConfigError,
    DivergenceError,
    DomainError,
    ParseError,
    ShapeError,
    __version__,
    sanitize_error_message,
    setup_logging,
    validate_file_path,
)

logger = setup_logging(__name__)

DATASETS = ("two-moons", "blobs", "csv", "idx")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _opt(default, help_text: str):
    return field(default=default, metadata={"help": help_text})


@dataclass
class ExperimentConfig:
    """
    Flat experiment configuration

    Defaults describe the two-moons toy setup; file values override them and
    --set values override the file.
    """

    dataset: str = _opt("two-moons", "two-moons, blobs, csv or idx")
    dataset_path: Optional[str] = _opt(None, "csv file, or idx image file")
    labels_path: Optional[str] = _opt(None, "idx label file")
    eval_path: Optional[str] = _opt(None, "evaluation csv file or idx image file")
    eval_labels_path: Optional[str] = _opt(None, "evaluation idx label file")
    eval_fraction: float = _opt(0.2, "held-out fraction when no evaluation file is given")
    n_train: int = _opt(2000, "synthetic training samples")
    n_eval: int = _opt(500, "synthetic evaluation samples")
    noise: float = _opt(0.1, "two-moons gaussian noise")
    n_classes: int = _opt(3, "blobs class count")
    blob_std: float = _opt(0.5, "blobs standard deviation")
    seed: int = _opt(7, "seed of data, initialization and shuffling")
    layers: str = _opt("2,16,16,2", "layer widths, input first")
    activation: str = _opt("relu", "hidden activation: relu or none")
    quantize_first_last: bool = _opt(False, "also constrain the first and last layers")
    constraint: str = _opt("ternary", "binary, ternary, one-bit-shift, two-bit-shift or custom")
    custom_levels: str = _opt("", "comma-separated unit levels of the custom constraint")
    scale_policy: str = _opt("frozen", "frozen or recompute")
    mode: str = _opt("cbp", "cbp, cbp-no-window, ste-only or full-precision")
    pretrain_epochs: int = _opt(100, "full-precision pre-training epochs")
    pretrain_eta_w: float = _opt(0.05, "pre-training learning rate")
    epochs: int = _opt(200, "post-training epochs")
    eta_w: float = _opt(0.002, "post-training weight learning rate")
    eta_lambda: float = _opt(0.005, "multiplier learning rate; tuned for the toy MLP, large networks use 1e-4")
    lambda_optimizer: str = _opt("adam", "adam or raw")
    momentum: float = _opt(0.9, "weight momentum")
    weight_decay: float = _opt(0.0, "weight decay on the loss term")
    batch_size: int = _opt(64, "mini-batch size")
    p_max: int = _opt(5, "epochs without multiplier update before a forced update; tuned for the toy MLP, large networks use 20")
    g_schedule: str = _opt("three-tier", "three-tier (1/10/100) or two-tier (1/10)")
    lr_decay_g: float = _opt(20.0, "window value that triggers the learning-rate decay")
    lr_decay_factor: float = _opt(0.1, "learning-rate decay factor")
    histogram_bins: int = _opt(201, "weight histogram bins")
    population_delta: float = _opt(0.02, "population capture radius as a fraction of the grid span")
    checkpoint: Optional[str] = _opt(None, "checkpoint to start from")
    output_dir: str = _opt("runs/cbp", "directory of metrics, histograms and checkpoints")
    kinetics_scenario: str = _opt("quadratic-ternary", ", ".join(SCENARIOS))
    kinetics_t_end: float = _opt(200.0, "kinetics final time")
    kinetics_dt: float = _opt(0.01, "kinetics step size")
    kinetics_method: str = _opt("rk4", "euler or rk4")

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ExperimentConfig":
        """
        Build a config from string (or typed) values

        Raises:
            ConfigError: unknown key or value of the wrong type
        """
        hints = typing.get_type_hints(cls)
        valid = cls.keys()
        values = {}
        for key, raw in mapping.items():
            key = key.strip()
            if key not in hints:
                raise ConfigError(f"Unknown configuration key '{key}'", valid)
            values[key] = _coerce(key, raw, hints[key])
        config = cls(**values)
        config.validate()
        return config

    def validate(self) -> None:
        choices = {
            "dataset": DATASETS,
            "activation": ACTIVATIONS,
            "scale_policy": SCALE_POLICIES,
            "mode": TRAIN_MODES,
            "lambda_optimizer": LAMBDA_OPTIMIZERS,
            "g_schedule": G_SCHEDULES,
            "kinetics_scenario": SCENARIOS,
            "kinetics_method": METHODS,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(
                    f"Invalid value for '{key}': {getattr(self, key)!r} "
                    f"(expected one of {', '.join(allowed)})"
                )
        for key in ("eta_w", "pretrain_eta_w", "kinetics_t_end", "kinetics_dt",
                    "lr_decay_factor", "population_delta"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"Invalid value for '{key}': must be positive")
        if self.eta_lambda < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("eta_lambda, momentum and weight_decay must be nonnegative")
        if self.batch_size < 1 or self.p_max < 1 or self.histogram_bins < 1:
            raise ConfigError("batch_size, p_max and histogram_bins must be >= 1")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in [0, 1)")
        try:
            self.kind()
            sizes = self.layer_sizes()
        except (DomainError, ValueError) as e:
            raise ConfigError(f"Invalid network or constraint setting: {sanitize_error_message(e)}")
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError(f"Invalid value for 'layers': {self.layers!r}")

    def layer_sizes(self) -> List[int]:
        return [int(v) for v in self.layers.split(",") if v.strip()]

    def kind(self) -> ConstraintKind:
        levels = [float(v) for v in self.custom_levels.split(",") if v.strip()]
        return ConstraintKind.parse(self.constraint, levels)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(key: str, raw: Any, hint) -> Any:
    optional = type(None) in typing.get_args(hint)
    target = next((t for t in typing.get_args(hint) if t is not type(None)), hint)
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        if optional:
            return None
        if target is str:
            return ""
        raise ConfigError(f"Missing value for '{key}'")
    if not isinstance(raw, str):
        return target(raw)
    text = raw.strip()
    try:
        if target is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return target(text)
    except ValueError:
        raise ConfigError(f"Invalid value for '{key}': {text!r} is not a {target.__name__}")


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Defaults < key=value file < --set overrides

    Args:
        path: flat key=value file with # comments
        overrides: "key=value" strings

    Raises:
        ConfigError: unknown key or malformed value
        FileNotFoundError: config file missing
    """
    values: Dict[str, Any] = {}
    if path:
        resolved = validate_file_path(path)
        for key, value in dotenv_values(resolved).items():
            if value is None:
                raise ConfigError(f"Line for '{key}' in {path} has no '=value'")
            values[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        values[key.strip()] = value
    return ExperimentConfig.from_mapping(values)


def help_config() -> str:
    """One line per key: name, type, default and help"""
    hints = typing.get_type_hints(ExperimentConfig)
    lines = []
    for f in fields(ExperimentConfig):
        hint = hints[f.name]
        target = next((t for t in typing.get_args(hint) if t is not type(None)), hint)
        default = "" if f.default is None else f.default
        lines.append(f"{f.name} ({target.__name__}, default: {default}) - {f.metadata['help']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ShapeError(f"dataset with x {self.x.shape} and y {self.y.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def make_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """
    Two interleaved half circles

    Outer arc (cos t, sin t) is class 0, inner arc (1 - cos t, 0.5 - sin t)
    class 1, t uniform on [0, pi], plus gaussian noise of std `noise`.
    """
    rng = np.random.default_rng(seed)
    n_outer = n // 2
    n_inner = n - n_outer
    t_outer = rng.uniform(0.0, np.pi, n_outer)
    t_inner = rng.uniform(0.0, np.pi, n_inner)
    x = np.vstack([
        np.column_stack([np.cos(t_outer), np.sin(t_outer)]),
        np.column_stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)]),
    ])
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    x = x + rng.normal(scale=noise, size=x.shape)
    order = rng.permutation(n)
    return Dataset(x[order], y[order])


def make_blobs(n: int, n_classes: int = 3, std: float = 0.5, seed: int = 0) -> Dataset:
    """Gaussian blobs centred on a circle of radius 3, balanced classes"""
    if n_classes < 2:
        raise DomainError(f"blobs need at least two classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centres = 3.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    y = np.arange(n) % n_classes
    x = centres[y] + rng.normal(scale=std, size=(n, 2))
    order = rng.permutation(n)
    return Dataset(x[order], y[order])


# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """
    Parse an IDX file: 0x00 0x00, type byte, dimension count, then one
    big-endian u32 per dimension and the raw values

    Raises:
        ParseError: bad magic, truncated header or payload (with byte offset)
    """
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ParseError("truncated IDX magic", offset=len(raw), path=path)
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise ParseError(f"bad IDX magic 0x{raw[:4].hex()}", offset=0, path=path)
    if type_code not in IDX_DTYPES:
        raise ParseError(f"unknown IDX type code 0x{type_code:02x}", offset=2, path=path)
    if ndim == 0:
        raise ParseError("IDX file with zero dimensions", offset=3, path=path)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ParseError("truncated IDX dimensions", offset=len(raw), path=path)
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = IDX_DTYPES[type_code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    available = len(raw) - header_end
    if available < expected:
        raise ParseError(
            f"IDX payload holds {available} bytes, shape {shape} needs {expected}",
            offset=len(raw), path=path,
        )
    if available > expected:
        raise ParseError("trailing bytes after IDX payload",
                         offset=header_end + expected, path=path)
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(shape)


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """Images flattened per sample; unsigned bytes are scaled to [0, 1]"""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise ParseError(f"label file has {labels.ndim} dimensions", offset=3, path=str(labels_path))
    if labels.shape[0] != images.shape[0]:
        raise DomainError(
            f"{images.shape[0]} images but {labels.shape[0]} labels "
            f"({images_path}, {labels_path})"
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.dtype(">u1"):
        x /= 255.0
    return Dataset(x, labels.astype(np.int64))


def load_csv_dataset(path) -> Dataset:
    """
    CSV with header label,f0,f1,... and one sample per row

    Raises:
        ParseError: bad header or malformed row (line number in the message)
    """
    path = str(path)
    labels, rows = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ParseError("CSV header must start with 'label'", offset=0, path=path)
        n_features = len(header) - 1
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_features + 1:
                raise ParseError(
                    f"line {line_no} has {len(row) - 1} features, header declares {n_features}",
                    path=path,
                )
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError(f"line {line_no} is not numeric", path=path)
    if not rows:
        raise ParseError("CSV file has no data rows", offset=0, path=path)
    x = np.asarray(rows, dtype=np.float64).reshape(len(rows), n_features)
    return Dataset(x, np.asarray(labels, dtype=np.int64))


def _load_file(config: ExperimentConfig, data_path, labels_path) -> Dataset:
    if config.dataset == "csv":
        return load_csv_dataset(validate_file_path(data_path, [".csv"]))
    if not labels_path:
        raise ConfigError("idx datasets need 'labels_path' (and 'eval_labels_path')")
    return load_idx_dataset(validate_file_path(data_path), validate_file_path(labels_path))


def load_dataset(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """
    Training and evaluation sets for a config

    Synthetic sets draw n_train + n_eval samples from one seeded generator;
    file sets use eval_path, else a seeded eval_fraction split.

    Raises:
        DomainError: labels do not fit the network's output width
    """
    if config.dataset == "two-moons":
        full = make_moons(config.n_train + config.n_eval, config.noise, config.seed)
    elif config.dataset == "blobs":
        full = make_blobs(config.n_train + config.n_eval, config.n_classes,
                          config.blob_std, config.seed)
    else:
        if not config.dataset_path:
            raise ConfigError(f"dataset '{config.dataset}' needs 'dataset_path'")
        full = _load_file(config, config.dataset_path, config.labels_path)

    if config.dataset in ("two-moons", "blobs"):
        train = full.subset(slice(0, config.n_train))
        held = full.subset(slice(config.n_train, None))
    elif config.eval_path:
        train = full
        held = _load_file(config, config.eval_path, config.eval_labels_path)
    else:
        order = np.random.default_rng(config.seed).permutation(len(full))
        n_eval = int(round(config.eval_fraction * len(full)))
        train = full.subset(order[n_eval:])
        held = full.subset(order[:n_eval])

    n_out = config.layer_sizes()[-1]
    for name, data in (("training", train), ("evaluation", held)):
        if len(data) and data.y.max() >= n_out:
            raise DomainError(
                f"{name} labels reach {data.y.max()} but the network has {n_out} outputs"
            )
        if len(data) and data.y.min() < 0:
            raise DomainError(f"{name} labels must be nonnegative")
    logger.info(f"dataset {config.dataset}: {len(train)} train / {len(held)} eval samples")
    return train, held


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def apply_quant_config(net: Network, config: ExperimentConfig) -> Network:
    """Set every layer's quantization settings from the config"""
    kind = config.kind()
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        edge = i == 0 or i == last
        layer.quant = LayerQuantConfig(
            exempt=edge and not config.quantize_first_last,
            kind=kind,
            scale_policy=config.scale_policy,
        )
    return net


def pretrain(config: ExperimentConfig, train: Optional[Dataset] = None,
             held: Optional[Dataset] = None) -> Tuple[Network, List[MetricsRow]]:
    """
    Full-precision momentum SGD from a seeded initialization

    Raises:
        DivergenceError: training produced non-finite values
    """
    if train is None:
        train, held = load_dataset(config)
    sizes = config.layer_sizes()
    if train.n_features != sizes[0]:
        raise ShapeError(f"dataset has {train.n_features} features, layers start at {sizes[0]}")
    net = init_network(
        sizes,
        seed=config.seed,
        activation=config.activation,
        kind=config.kind(),
        scale_policy=config.scale_policy,
        quantize_first_last=config.quantize_first_last,
    )
    state = create_train_state(
        net,
        mode="full-precision",
        eta_w=config.pretrain_eta_w,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        seed=config.seed,
        pretrained=False,
    )
    held = held if held is not None and len(held) else train
    state, metrics = train_epochs(state, train.x, train.y, config.pretrain_epochs,
                                  config.batch_size, held.x, held.y)
    if metrics:
        logger.info(f"pre-training done: accuracy {metrics[-1].eval_top1:.4f}")
    return state.network, metrics


def build_state(config: ExperimentConfig, net: Network, pretrained: bool = True) -> TrainState:
    """Post-training state for the configured mode"""
    apply_quant_config(net, config)
    return create_train_state(
        net,
        mode=config.mode,
        eta_w=config.eta_w,
        eta_lambda=config.eta_lambda,
        lambda_optimizer=config.lambda_optimizer,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        p_max=config.p_max,
        g_schedule=config.g_schedule,
        lr_decay_g=config.lr_decay_g,
        lr_decay_factor=config.lr_decay_factor,
        seed=config.seed,
        pretrained=pretrained,
    )


def evaluation_grids(state: TrainState) -> List[Optional[QuantGrid]]:
    """Grids for quantized evaluation; built from the weights when the state has none"""
    if any(grid is not None for grid in state.grids):
        return list(state.grids)
    return build_grids(state.network)


def evaluate_network(state: TrainState, data: Dataset) -> Dict[str, float]:
    """Quantized-forward and full-precision-forward top-1 accuracy, plus CFS"""
    grids = evaluation_grids(state)
    logits_q, _ = forward(state.network, data.x, "quantized", grids)
    logits_fp, _ = forward(state.network, data.x, "full-precision")
    constrained = [i for i, grid in enumerate(grids) if grid is not None]
    score = cfs([state.network.layers[i].W for i in constrained],
                [grids[i] for i in constrained]) if constrained else 0.0
    return {
        "quantized_top1": accuracy(logits_q, data.y),
        "full_precision_top1": accuracy(logits_fp, data.y),
        "cfs": score,
    }


def weight_histogram(W: np.ndarray, grid: QuantGrid, bins: int = 201) -> np.ndarray:
    """Bin counts over [q_1 - 0.1 span, q_nq + 0.1 span]"""
    margin = 0.1 * grid.span
    counts, _ = np.histogram(np.asarray(W).ravel(), bins=bins,
                             range=(grid.q_min - margin, grid.q_max + margin))
    return counts


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CBPCKPT1"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct(">II")


def save_checkpoint(path, state: TrainState, config: Optional[ExperimentConfig] = None) -> Path:
    """
    Write a training state: magic, u32 version, u32 header length, JSON
    header, then the float64 little-endian arrays listed in the header
    """
    path = Path(path)
    arrays: List[Tuple[str, np.ndarray]] = []
    net = state.network
    for i, layer in enumerate(net.layers):
        arrays += [(f"W{i}", layer.W), (f"b{i}", layer.b),
                   (f"vW{i}", state.optimizer.vW[i]), (f"vb{i}", state.optimizer.vb[i])]
    mult = state.multipliers
    mult_header = None
    if mult is not None:
        for k in range(len(mult.lam)):
            arrays += [(f"lam{k}", mult.lam[k]), (f"m1_{k}", mult.m1[k]), (f"m2_{k}", mult.m2[k])]
        mult_header = {
            "count": len(mult.lam),
            "eta_lambda": mult.eta_lambda,
            "optimizer": mult.optimizer,
            "beta1": mult.beta1,
            "beta2": mult.beta2,
            "eps": mult.eps,
            "steps": mult.steps,
            "p": mult.p,
            "p_max": mult.p_max,
            "L_sum_prev": mult.L_sum_prev,
        }
    opt = state.optimizer
    index, offset = [], 0
    for name, arr in arrays:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size

    header = {
        "generator": f"constrained-backprop {__version__}",
        "config": config.to_dict() if config is not None else {},
        "mode": state.mode,
        "g_schedule": state.g_schedule,
        "g": state.g,
        "epoch": state.epoch,
        "seed": state.seed,
        "initialized": state.initialized,
        "pretrained": state.pretrained,
        "layers": [{"activation": layer.activation, "quant": layer.quant.to_dict()}
                   for layer in net.layers],
        "grids": [grid.to_dict() if grid is not None else None for grid in state.grids],
        "optimizer": {
            "eta_w": opt.eta_w,
            "momentum": opt.momentum,
            "weight_decay": opt.weight_decay,
            "lr_decay_g": opt.lr_decay_g,
            "lr_decay_factor": opt.lr_decay_factor,
            "lr_decayed": opt.lr_decayed,
        },
        "multipliers": mult_header,
        "rng": state.rng.bit_generator.state,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_PREAMBLE.pack(CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    logger.info(f"checkpoint written: {path}")
    return path


def load_checkpoint(path) -> Tuple[TrainState, Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        (state, config echo)

    Raises:
        ParseError: bad magic or truncated content (with byte offset)
        CheckpointVersionError: written by a newer format version
    """
    path = str(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ParseError("not a constrained-backprop checkpoint", offset=0, path=path)
    start = len(CHECKPOINT_MAGIC)
    if len(raw) < start + _PREAMBLE.size:
        raise ParseError("truncated checkpoint preamble", offset=len(raw), path=path)
    version, header_len = _PREAMBLE.unpack_from(raw, start)
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is newer than supported {CHECKPOINT_VERSION}",
            offset=start, path=path,
        )
    header_start = start + _PREAMBLE.size
    payload_start = header_start + header_len
    if len(raw) < payload_start:
        raise ParseError("truncated checkpoint header", offset=len(raw), path=path)
    try:
        header = json.loads(raw[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"unreadable checkpoint header: {e}", offset=header_start, path=path)

    payload = raw[payload_start:]
    n_values = sum(int(np.prod(a["shape"], dtype=np.int64)) for a in header["arrays"])
    if len(payload) != 8 * n_values:
        raise ParseError(
            f"checkpoint payload holds {len(payload)} bytes, header lists {8 * n_values}",
            offset=len(raw), path=path,
        )
    values = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = values[entry["offset"]:entry["offset"] + size] \
            .reshape(entry["shape"]).astype(np.float64)

    layers = []
    for i, entry in enumerate(header["layers"]):
        layers.append(DenseLayer(
            W=arrays[f"W{i}"],
            b=arrays[f"b{i}"],
            activation=entry["activation"],
            quant=LayerQuantConfig.from_dict(entry["quant"]),
        ))
    net = Network(layers=layers)

    opt_h = header["optimizer"]
    optimizer = WeightOptimizerState(
        vW=[arrays[f"vW{i}"] for i in range(len(layers))],
        vb=[arrays[f"vb{i}"] for i in range(len(layers))],
        **opt_h,
    )
    mult = None
    mult_h = header["multipliers"]
    if mult_h is not None:
        count = mult_h.pop("count")
        mult = MultiplierState(
            lam=[arrays[f"lam{k}"] for k in range(count)],
            m1=[arrays[f"m1_{k}"] for k in range(count)],
            m2=[arrays[f"m2_{k}"] for k in range(count)],
            **mult_h,
        )
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state = TrainState(
        network=net,
        grids=[QuantGrid.from_dict(g) if g is not None else None for g in header["grids"]],
        multipliers=mult,
        optimizer=optimizer,
        g=float(header["g"]),
        epoch=int(header["epoch"]),
        seed=int(header["seed"]),
        mode=header["mode"],
        g_schedule=header["g_schedule"],
        rng=rng,
        initialized=bool(header["initialized"]),
        pretrained=bool(header["pretrained"]),
    )
    return state, header["config"]


def inspect_checkpoint(state: TrainState, bins: int = 201) -> Dict[str, Any]:
    """Summary of a state: g, multiplier statistics and per-layer grid, CFS, histogram"""
    mult = state.multipliers
    lam_all = np.concatenate([lam.ravel() for lam in mult.lam]) if mult and mult.lam else np.zeros(0)
    layers = []
    for i, layer in enumerate(state.network.layers):
        entry = {"layer": i, "shape": list(layer.W.shape)}
        grid = state.grids[i]
        if layer.quant.exempt or grid is None:
            entry["grid"] = "exempt"
        else:
            entry["grid"] = {"kind": layer.quant.kind.tag, "levels": grid.n_q,
                             "values": [float(v) for v in grid.q]}
            entry["cfs"] = cfs(layer.W, grid)
            entry["histogram"] = weight_histogram(layer.W, grid, bins).tolist()
        layers.append(entry)
    return {
        "mode": state.mode,
        "epoch": state.epoch,
        "g": state.g,
        "lambda_l1": float(np.abs(lam_all).sum()),
        "lambda_min": float(lam_all.min()) if lam_all.size else 0.0,
        "lambda_max": float(lam_all.max()) if lam_all.size else 0.0,
        "lambda_mean": float(lam_all.mean()) if lam_all.size else 0.0,
        "cfs": state_cfs(state),
        "layers": layers,
    }


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    state: TrainState
    metrics: List[MetricsRow]
    summary: Dict[str, Any]
    output_dir: Path


class _ArtifactWriter:
    """Per-epoch metrics, histogram and population rows, flushed every epoch"""

    METRIC_FIELDS = [f.name for f in fields(MetricsRow)]

    def __init__(self, output_dir: Path, config: ExperimentConfig, append: bool = False):
        self.config = config
        self.append = append
        self.appended = False
        self._files = []
        self.metrics = self._open(output_dir / "metrics.csv", self.METRIC_FIELDS)
        self.histograms = self._open(output_dir / "histograms.csv",
                                     ["epoch", "layer"] + [f"bin_{k}" for k in range(config.histogram_bins)])
        self.populations = self._open(output_dir / "populations.csv",
                                      ["epoch", "layer", "g_updated", "level", "value", "fraction"])

    def _open(self, path: Path, header: List[str]):
        # a resumed run continues the rows of the run it resumes
        existing = self.append and path.exists() and path.stat().st_size > 0
        f = open(path, "a" if existing else "w", newline="")
        self._files.append(f)
        writer = csv.writer(f)
        if existing:
            self.appended = True
        else:
            writer.writerow(header)
        return writer

    def snapshot(self, state: TrainState, epoch: int, updated: bool) -> None:
        for i in state.constrained_indices():
            W, grid = state.network.layers[i].W, state.grids[i]
            self.histograms.writerow([epoch, i] + weight_histogram(W, grid, self.config.histogram_bins).tolist())
            delta = self.config.population_delta * grid.span
            for k, frac in enumerate(population_fractions(W, grid, delta)):
                self.populations.writerow([epoch, i, int(updated), k, repr(float(grid.q[k])), repr(float(frac))])

    def row(self, row: MetricsRow) -> None:
        values = asdict(row)
        values["multiplier_updated"] = int(row.multiplier_updated)
        self.metrics.writerow([values[name] for name in self.METRIC_FIELDS])

    def flush(self) -> None:
        for f in self._files:
            f.flush()

    def close(self) -> None:
        for f in self._files:
            f.close()


def run_experiment(config: ExperimentConfig, state: Optional[TrainState] = None,
                   data: Optional[Tuple[Dataset, Dataset]] = None) -> ExperimentResult:
    """
    Post-train a network and write every artifact to config.output_dir

    The starting point is, in order: the given state, config.checkpoint, or
    a network pre-trained here. Writes metrics.csv, histograms.csv,
    populations.csv, final.ckpt and summary.json.

    Raises:
        DivergenceError: after writing diverged.ckpt with the last finite state
    """
    started = time.perf_counter()
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    train, held = data if data is not None else load_dataset(config)

    pretrain_top1 = None
    if state is None and config.checkpoint:
        state, _ = load_checkpoint(validate_file_path(config.checkpoint))
        if state.epoch == 0 and not state.initialized:
            state = build_state(config, state.network, pretrained=state.pretrained)
    if state is None:
        net, pre_metrics = pretrain(config, train, held)
        pretrain_top1 = pre_metrics[-1].eval_top1 if pre_metrics else None
        state = build_state(config, net, pretrained=config.pretrain_epochs > 0)

    writer = _ArtifactWriter(output_dir, config, append=state.epoch > 0)
    if not writer.appended:
        writer.snapshot(state, state.epoch, False)
    writer.flush()

    def on_epoch(st: TrainState, row: MetricsRow) -> None:
        writer.row(row)
        writer.snapshot(st, row.epoch, row.multiplier_updated)
        writer.flush()

    try:
        if state.mode == "full-precision":
            state, metrics = train_epochs(state, train.x, train.y, config.epochs, config.batch_size,
                                          held.x, held.y, on_epoch)
        else:
            state, metrics = run_cbp(state, train.x, train.y, config.epochs, config.batch_size,
                                     held.x, held.y, allow_untrained=True, on_epoch=on_epoch)
    except DivergenceError as e:
        if e.state is not None:
            save_checkpoint(output_dir / "diverged.ckpt", e.state, config)
        raise
    finally:
        writer.close()

    save_checkpoint(output_dir / "final.ckpt", state, config)
    scores = evaluate_network(state, held)
    summary = {
        "mode": state.mode,
        "epochs": len(metrics),
        "final_cfs": scores["cfs"],
        "quantized_top1": scores["quantized_top1"],
        "full_precision_top1": scores["full_precision_top1"],
        "pretrain_top1": pretrain_top1,
        "g": state.g,
        "lambda_l1": state.multipliers.l1() if state.multipliers is not None else 0.0,
        "wall_time_s": time.perf_counter() - started,
    }
    with open(output_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    logger.info(f"experiment done: {json.dumps(summary, sort_keys=True)}")
    return ExperimentResult(state=state, metrics=metrics, summary=summary, output_dir=output_dir)


def run_kinetics(config: ExperimentConfig, output: Optional[str] = None) -> Dict[str, Any]:
    """Integrate a built-in kinetics scenario and export its trajectory"""
    system, w0, lam0 = build_scenario(config.kinetics_scenario, seed=config.seed)
    traj = integrate(system, w0, lam0, t_end=config.kinetics_t_end, dt=config.kinetics_dt,
                     method=config.kinetics_method, converge_tol=1e-8)
    csv_path = export_csv(traj, output or Path(config.output_dir) / "kinetics.csv")
    report = equilibrium_report(system, traj)
    return {
        "scenario": config.kinetics_scenario,
        "t_final": traj.t[-1],
        "converged": traj.converged,
        "boundary_hits": traj.boundary_hits,
        "w_final": traj.w[-1].tolist(),
        "lambda_star": report.lambda_star.tolist(),
        "delta_cs": report.delta_cs.tolist(),
        "identity_residual": report.identity_residual,
        "trajectory_csv": str(csv_path),
    }


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="flat key=value config file")
    common.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    parser = argparse.ArgumentParser(
        description="Constrained backpropagation - weight-constrained post-training",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Pre-train the two-moons MLP and save a checkpoint
  python3 harness.py pretrain --output runs/pretrained.ckpt

  # Ternary CBP post-training from that checkpoint
  python3 harness.py train --set checkpoint=runs/pretrained.ckpt --set constraint=ternary

  # Ablation without the unconstrained-weight window
  python3 harness.py train --set mode=cbp-no-window

  # Accuracy of a checkpoint (quantized and full-precision forward)
  python3 harness.py eval runs/cbp/final.ckpt

  # Checkpoint summary and the config key list
  python3 harness.py inspect runs/cbp/final.ckpt
  python3 harness.py inspect --help-config

  # Continuous-time equilibrium scenario
  python3 harness.py kinetics --set kinetics_scenario=quadratic-ternary
"""
    )
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    pre = subparsers.add_parser("pretrain", parents=[common], help="Full-precision pre-training")
    pre.add_argument("--output", "-o", help="checkpoint path (default <output_dir>/pretrained.ckpt)")

    subparsers.add_parser("train", parents=[common], help="CBP post-training and ablations")

    ev = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("checkpoint_path", nargs="?", help="checkpoint (default: config 'checkpoint')")

    kin = subparsers.add_parser("kinetics", parents=[common], help="Run a kinetics scenario")
    kin.add_argument("--output", "-o", help="trajectory CSV (default <output_dir>/kinetics.csv)")

    ins = subparsers.add_parser("inspect", parents=[common], help="Summarize a checkpoint")
    ins.add_argument("checkpoint_path", nargs="?", help="checkpoint (default: config 'checkpoint')")
    ins.add_argument("--help-config", action="store_true", help="list every config key")
    return parser


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False))


def _checkpoint_arg(args, config: ExperimentConfig) -> str:
    path = args.checkpoint_path or config.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (positional argument or 'checkpoint' key)")
    return str(validate_file_path(path))


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Command-line entry point

    Returns:
        0 on success, 1 on usage or configuration errors, 2 on runtime errors
    """
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1

    if not args.command:
        parser.print_help()
        return 1

    try:
        if args.command == "inspect" and args.help_config:
            print(help_config())
            return 0

        config = load_config(args.config, args.set)

        if args.command == "pretrain":
            net, metrics = pretrain(config)
            state = build_state(config, net, pretrained=config.pretrain_epochs > 0)
            output = args.output or Path(config.output_dir) / "pretrained.ckpt"
            path = save_checkpoint(output, state, config)
            _print_json({
                "checkpoint": str(path),
                "epochs": len(metrics),
                "eval_top1": metrics[-1].eval_top1 if metrics else None,
            })

        elif args.command == "train":
            result = run_experiment(config)
            _print_json(result.summary)

        elif args.command == "eval":
            state, _ = load_checkpoint(_checkpoint_arg(args, config))
            _, held = load_dataset(config)
            _print_json(evaluate_network(state, held))

        elif args.command == "kinetics":
            _print_json(run_kinetics(config, args.output))

        elif args.command == "inspect":
            state, _ = load_checkpoint(_checkpoint_arg(args, config))
            _print_json(inspect_checkpoint(state, config.histogram_bins))

        return 0

    except ConfigError as e:
        print(f"Error: {sanitize_error_message(e)}", file=sys.stderr)
        return 1
    except (CBPError, OSError) as e:
        print(f"Error: {sanitize_error_message(e)}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
