"""Tensor containers for the float reference side and the integer side.

Float tensors are plain ``float32`` numpy arrays (NCHW activations, OIHW conv
weights).  Integer tensors are :class:`QTensor`: an integer array plus the
single :class:`QuantParams` that governs every element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .fixedpoint import (
    QuantParams,
    dequantize_array,
    quantize_array,
    rescale_array,
)

FTensor = np.ndarray


def as_ftensor(x) -> FTensor:
    t = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(t)):
        raise DomainError("tensor contains non-finite values")
    return t


@dataclass(frozen=True, eq=False)
class QTensor:
    raw: np.ndarray
    params: QuantParams

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.dtype != object and not np.issubdtype(raw.dtype, np.integer):
            raise DomainError(f"QTensor raw must be integer, got {raw.dtype}")
        if raw.size and (raw.min() < self.params.lo or raw.max() > self.params.hi):
            raise DomainError(f"raw values outside range of {self.params}")
        if raw.dtype != np.int64:
            raw = raw.astype(np.int64)
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.raw.shape

    def equals(self, other: "QTensor") -> bool:
        return self.params == other.params and np.array_equal(self.raw, other.raw)

    def __repr__(self):
        return f"QTensor(shape={self.shape}, params={self.params})"


def quantize_tensor(t, p: QuantParams) -> QTensor:
    return QTensor(quantize_array(as_ftensor(t), p), p)


def dequantize_tensor(q: QTensor) -> FTensor:
    return dequantize_array(q.raw, q.params).astype(np.float32)


def rescale_tensor(q: QTensor, p: QuantParams) -> QTensor:
    return QTensor(rescale_array(q.raw, q.params.fl, p), p)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if k < 1 or stride < 1 or pad < 0 or span < 0:
        raise ShapeError(f"invalid conv geometry: size={size} k={k} stride={stride} pad={pad}")
    return span // stride + 1


def im2col_array(x: np.ndarray, kernel, stride=(1, 1), pad=(0, 0)) -> np.ndarray:
    """Unroll NCHW ``x`` into a (C*kh*kw, N*OH*OW) matrix.

    Row ``c*kh*kw + i*kw + j`` matches an OIHW weight reshaped to (O, C*kh*kw);
    column ``n*OH*OW + oh*OW + ow`` is one output position.  Padding is zero.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return cols.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * oh * ow)


def im2col(q: QTensor, kernel, stride=(1, 1), pad=(0, 0)) -> QTensor:
    return QTensor(im2col_array(q.raw, kernel, stride, pad), q.params)
