"""Dense numeric kernel.

Matrices are plain 2-D ``numpy.ndarray`` objects (float64 unless the caller
opts into float32).  Every function here is pure: inputs are never mutated.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join("x".join(str(s) for s in shape) for shape in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class EmptyInputError(ValueError):
    pass


def as_matrix(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    m = np.asarray(data, dtype=dtype)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError("as_matrix", m.shape)
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize each row over the feature axis, then scale and shift."""
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    if eps == 0.0:
        # zero-variance rows would divide by zero; they normalize to 0
        std = np.sqrt(var)
        xhat = np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)
    else:
        xhat = centered / np.sqrt(var + eps)
    return xhat * gain + bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mean_rows(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("mean_rows needs at least one row")
    return x.mean(axis=0)


def max_elementwise(vs: Sequence[np.ndarray]) -> np.ndarray:
    if len(vs) == 0:
        raise EmptyInputError("max_elementwise needs at least one vector")
    first = np.asarray(vs[0])
    for v in vs[1:]:
        if np.shape(v) != first.shape:
            raise ShapeError("max_elementwise", first.shape, np.shape(v))
    return np.max(np.stack([np.asarray(v) for v in vs]), axis=0)
