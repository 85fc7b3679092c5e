"""Tensor helpers and power-of-two fixed-point quantization.

Float tensors are plain numpy arrays (float32 for training and inference,
float64 for gradient checks). Integer tensors carry their scale exponent in
a :class:`QuantTensor`: ``real = data * 2**(-scale_exp)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_QMIN, WEIGHT_QMAX = -127, 127
ACT_QMIN, ACT_QMAX = -128, 127


class ShapeError(ValueError):
    """Raised when tensor extents do not agree."""


def reshape(t: np.ndarray, new_shape) -> np.ndarray:
    new_shape = tuple(int(s) for s in np.atleast_1d(new_shape))
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return t


def round_half_away(x):
    """Round to nearest integer, ties away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_to_grid(values, multiplier: float, qmin: int = WEIGHT_QMIN, qmax: int = WEIGHT_QMAX):
    """Return ``(ints, n_saturated)`` for ``clamp(round(v * multiplier))``.

    ``multiplier`` is the inverse of the quantization step; power-of-two
    callers pass ``2**scale_exp``.
    """
    scaled = round_half_away(np.asarray(values, dtype=np.float64) * multiplier)
    saturated = int(np.count_nonzero((scaled < qmin) | (scaled > qmax)))
    return np.clip(scaled, qmin, qmax).astype(np.int8), saturated


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray  # int8, any shape
    scale_exp: int
    zero_point: int = 0
    saturated: int = 0

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise TypeError(f"QuantTensor data must be int8, got {self.data.dtype}")
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization (zero_point 0) is supported")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def step(self) -> float:
        return 2.0 ** (-self.scale_exp)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def quantize(t, scale_exp: int, qmin: int = WEIGHT_QMIN, qmax: int = WEIGHT_QMAX) -> QuantTensor:
    """Quantize to int8 with step ``2**(-scale_exp)``.

    Weights use the symmetric range [-127, 127]; pass ``qmin=ACT_QMIN`` for
    activations. Values beyond the range saturate and are counted in
    ``QuantTensor.saturated``.
    """
    data, sat = quantize_to_grid(t, 2.0 ** scale_exp, qmin, qmax)
    return QuantTensor(data=data, scale_exp=int(scale_exp), saturated=sat)


def dequantize(q: QuantTensor, dtype=np.float32) -> np.ndarray:
    return (q.data.astype(np.float64) * 2.0 ** (-q.scale_exp)).astype(dtype)


def fake_quantize(x: np.ndarray, scale_exp: int, qmin: int = ACT_QMIN, qmax: int = ACT_QMAX) -> np.ndarray:
    """Quantize-dequantize in float, keeping ``x``'s dtype."""
    step = 2.0 ** scale_exp
    q = np.clip(round_half_away(x * step), qmin, qmax)
    return (q / step).astype(x.dtype)


def rshift_round(v, shift):
    """Arithmetic right shift of int64 values, rounding half away from zero."""
    v = np.asarray(v, dtype=np.int64)
    shift = np.asarray(shift, dtype=np.int64)
    half = np.where(shift > 0, np.left_shift(np.int64(1), np.maximum(shift - 1, 0)), 0)
    mag = np.right_shift(np.abs(v) + half, shift)
    return np.where(v < 0, -mag, mag)
