#!/usr/bin/env python3
"""
Dense array support for the constrained-backprop scripts

A Matrix is a 2-D float64 numpy array in row-major (C) order. The helpers
here validate shapes explicitly; nothing relies on numpy broadcasting except
per-row bias addition.

Usage:
    from ndcore import as_matrix, matmul, l1_norm

    a = as_matrix([[1, 2]])
    b = as_matrix([[3], [4]])
    matmul(a, b)          # [[11.]]
    l1_norm([[1, -2]])    # 3.0
"""

from typing import Any

import numpy as np

from utils import ShapeError

Matrix = np.ndarray

DTYPE = np.float64


def as_matrix(data: Any, copy: bool = False) -> Matrix:
    """
    Coerce data to a 2-D float64 row-major matrix

    Args:
        data: Nested sequence or array; 1-D input becomes a single row
        copy: Always return a fresh array

    Returns:
        C-contiguous float64 array with ndim == 2
    """
    arr = np.array(data, dtype=DTYPE, copy=True, order="C") if copy else \
        np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {arr.shape}")
    return arr


def as_vector(data: Any) -> np.ndarray:
    """Coerce data to a 1-D float64 array"""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim != 1:
        raise ShapeError(f"Expected a vector, got shape {arr.shape}")
    return arr


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=DTYPE)


def matmul(a: Any, b: Any) -> Matrix:
    """
    Matrix product with an explicit shape check

    Args:
        a: rows x k matrix
        b: k x cols matrix

    Returns:
        rows x cols matrix

    Raises:
        ShapeError: a.cols != b.rows
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} by "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def add_row_bias(a: Any, bias: Any) -> Matrix:
    """Add a bias vector to every row of a"""
    a = as_matrix(a)
    bias = as_vector(bias)
    if bias.shape[0] != a.shape[1]:
        raise ShapeError(
            f"bias length {bias.shape[0]} does not match {a.shape[1]} columns"
        )
    return a + bias[np.newaxis, :]


def l1_norm(a: Any) -> float:
    """Sum of absolute values of all entries"""
    return float(np.abs(np.asarray(a, dtype=DTYPE)).sum())


def is_finite(a: Any) -> bool:
    return bool(np.all(np.isfinite(a)))
