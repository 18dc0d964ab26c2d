"""Fixed-point conversion primitives.

A value is stored as a signed integer ``raw`` together with a word length
``wl`` (total bits, sign included) and a fraction length ``fl``; the real
value is ``raw * 2**-fl``.  Rounding is always half away from zero and
saturation always clamps to the two's-complement range of ``wl`` bits.

Scalar functions work on Python ints/floats.  The ``*_array`` variants take
numpy arrays; integer arrays are either ``int64`` or ``object`` (Python ints)
when the values may not fit in 63 bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

MAX_WL = 63


@dataclass(frozen=True, order=True)
class QuantParams:
    """Word length / fraction length pair for one tensor."""

    wl: int
    fl: int

    def __post_init__(self):
        if isinstance(self.wl, bool) or not isinstance(self.wl, (int, np.integer)):
            raise DomainError(f"wl must be an integer, got {self.wl!r}")
        if isinstance(self.fl, bool) or not isinstance(self.fl, (int, np.integer)):
            raise DomainError(f"fl must be an integer, got {self.fl!r}")
        object.__setattr__(self, "wl", int(self.wl))
        object.__setattr__(self, "fl", int(self.fl))
        if not 2 <= self.wl <= MAX_WL:
            raise DomainError(f"wl={self.wl} outside [2, {MAX_WL}]")

    @property
    def lo(self) -> int:
        return -(1 << (self.wl - 1))

    @property
    def hi(self) -> int:
        return (1 << (self.wl - 1)) - 1

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.fl)

    @property
    def max_value(self) -> float:
        return math.ldexp(float(self.hi), -self.fl)

    @property
    def min_value(self) -> float:
        return math.ldexp(float(self.lo), -self.fl)

    def __str__(self):
        return f"Q{self.wl}.{self.fl}"


@dataclass(frozen=True)
class FixedScalar:
    raw: int
    params: QuantParams

    def __post_init__(self):
        object.__setattr__(self, "raw", int(self.raw))
        if not self.params.lo <= self.raw <= self.params.hi:
            raise DomainError(f"raw {self.raw} outside range of {self.params}")

    @property
    def value(self) -> float:
        return dequantize(self)


def clamp(x: int, lo: int, hi: int) -> int:
    if lo > hi:
        raise DomainError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    if x <= lo:
        return lo
    if x >= hi:
        return hi
    return x


def round_half_away(x: float) -> int:
    """Round a finite float to the nearest integer, ties away from zero."""
    if not math.isfinite(x):
        raise DomainError(f"cannot round non-finite value {x!r}")
    t = math.trunc(x)
    # x - t is exact for binary floats
    if abs(x - t) >= 0.5:
        t += 1 if x > 0 else -1
    return int(t)


def quantize(x: float, p: QuantParams) -> FixedScalar:
    x = float(x)
    if not math.isfinite(x):
        raise DomainError(f"cannot quantize non-finite value {x!r}")
    try:
        scaled = math.ldexp(x, p.fl)
    except OverflowError:
        return FixedScalar(p.hi if x > 0 else p.lo, p)
    return FixedScalar(clamp(round_half_away(scaled), p.lo, p.hi), p)


def dequantize(s: FixedScalar) -> float:
    return math.ldexp(float(s.raw), -s.params.fl)


def rescale(s: FixedScalar, new: QuantParams) -> FixedScalar:
    """Move ``s`` to another format using shifts only."""
    raw = shift_round(s.raw, new.fl - s.params.fl)
    return FixedScalar(clamp(raw, new.lo, new.hi), new)


def shift_round(raw: int, shift: int) -> int:
    """``raw * 2**shift`` rounded half away from zero (exact, integer only)."""
    if shift >= 0:
        return raw << shift
    s = -shift
    a = abs(raw)
    q = (a >> s) + ((a >> (s - 1)) & 1)
    return -q if raw < 0 else q


# ---------------------------------------------------------------------------
# array variants


def _is_object(a: np.ndarray) -> bool:
    return a.dtype == object


def int_dtype_for(bits: int):
    """Smallest integer dtype able to hold signed values of ``bits`` bits exactly."""
    return np.int64 if bits <= 63 else object


def round_half_away_array(y: np.ndarray) -> np.ndarray:
    t = np.trunc(y)
    finite = np.isfinite(y)
    frac = np.where(finite, y - np.where(finite, t, 0.0), 0.0)
    return t + np.sign(y) * (np.abs(frac) >= 0.5)


def quantize_array(x, p: QuantParams) -> np.ndarray:
    """Elementwise quantize to ``int64`` raws."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot quantize non-finite values")
    with np.errstate(over="ignore", under="ignore"):
        y = np.ldexp(x, p.fl)
    r = round_half_away_array(y)
    # float bounds first so the int64 cast cannot overflow
    r = np.clip(r, float(p.lo), float(p.hi))
    out = r.astype(np.int64)
    return np.clip(out, p.lo, p.hi)


def dequantize_array(raw: np.ndarray, p: QuantParams) -> np.ndarray:
    raw = np.asarray(raw)
    if _is_object(raw):
        return np.array([math.ldexp(float(v), -p.fl) for v in raw.ravel()],
                        dtype=np.float64).reshape(raw.shape)
    return np.ldexp(raw.astype(np.float64), -p.fl)


def clamp_array(raw: np.ndarray, lo: int, hi: int) -> np.ndarray:
    if lo > hi:
        raise DomainError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    if _is_object(raw):
        return np.minimum(np.maximum(raw, lo), hi)
    return np.clip(raw, lo, hi)


def shift_round_array(raw: np.ndarray, shift: int) -> np.ndarray:
    """Right shift with round-half-away; ``shift`` must be <= 0 here."""
    if shift > 0:
        raise ValueError("use saturating_shift_left for positive shifts")
    if shift == 0:
        return raw
    s = -shift
    if _is_object(raw):
        return np.vectorize(lambda v: shift_round(int(v), shift), otypes=[object])(raw)
    if s >= 64:
        return np.zeros_like(raw)
    a = np.abs(raw)
    q = (a >> s) + ((a >> (s - 1)) & 1)
    return np.where(raw < 0, -q, q)


def rescale_array(raw: np.ndarray, from_fl: int, p: QuantParams) -> np.ndarray:
    """Integer rescale of raws at ``from_fl`` into format ``p`` with saturation.

    Result dtype is ``int64`` (``p.wl`` <= 63 always fits).
    """
    raw = np.asarray(raw)
    d = p.fl - from_fl
    if d <= 0:
        out = clamp_array(shift_round_array(raw, d), p.lo, p.hi)
    else:
        # saturate before shifting so the shift cannot overflow
        hi_lim = p.hi >> d
        lo_lim = -((-p.lo) >> d)
        if _is_object(raw):
            out = np.vectorize(lambda v: clamp(int(v) << d, p.lo, p.hi), otypes=[object])(raw)
        elif d >= 63:
            out = np.where(raw > 0, p.hi, np.where(raw < 0, p.lo, 0))
        else:
            inner = np.clip(raw, lo_lim, hi_lim) << d
            out = np.where(raw > hi_lim, p.hi, np.where(raw < lo_lim, p.lo, inner))
    return np.asarray(out).astype(np.int64)


def saturates(raw: np.ndarray, p: QuantParams) -> np.ndarray:
    """Mask of elements that lie outside the range of ``p``."""
    return (raw < p.lo) | (raw > p.hi)
