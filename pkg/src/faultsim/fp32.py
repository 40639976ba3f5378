"""IEEE-754 binary32 primitives on numpy arrays.

Every function takes and returns ``float32`` arrays (or scalars) and is used by
both the SIMT simulator and the sequential reference, so the two agree on
rounding by construction.  All operations round to nearest, ties to even.
"""
from __future__ import annotations

import struct

import numpy as np

F32 = np.float32
F64 = np.float64
U32 = np.uint32

LOG2E_BITS = 0x3FB8AA3B
LOG2E = np.uint32(LOG2E_BITS).view(F32)


def f2b(x: float) -> int:
    """Bit pattern of ``x`` rounded to binary32."""
    return struct.unpack("<I", struct.pack("<f", x))[0]


def b2f(bits: int) -> float:
    return struct.unpack("<f", struct.pack("<I", bits & 0xFFFFFFFF))[0]


def fma(a, b, c):
    """Fused multiply-add ``a*b + c`` with a single rounding to binary32.

    The product of two binary32 values is exact in binary64.  The binary64 sum
    is then corrected with its exact TwoSum error term whenever it lands on a
    binary32 rounding midpoint, which is the only case where rounding twice
    differs from rounding once.
    """
    a = np.asarray(a, F32)
    b = np.asarray(b, F32)
    c = np.asarray(c, F32)
    with np.errstate(all="ignore"):
        p = a.astype(F64) * b.astype(F64)
        c64 = c.astype(F64)
        s = p + c64
        bb = s - p
        err = (p - (s - bb)) + (c64 - bb)
        r = s.astype(F32)
        r64 = r.astype(F64)
        suspect = np.isfinite(s) & (err != 0) & (r64 != s)
        if not np.any(suspect):
            return r
        toward = np.where(s > r64, np.inf, -np.inf).astype(F32)
        n = np.nextafter(r, toward)
        n64 = np.where(np.isinf(n), np.copysign(2.0**128, s), n.astype(F64))
        r64_fin = np.where(np.isinf(r), np.copysign(2.0**128, s), r64)
        midpoint = suspect & ((r64_fin + n64) / 2.0 == s)
        if not np.any(midpoint):
            return r
        # exact value lies strictly on the side of s given by err's sign
        up = err > 0
        pick_n = np.where(up, n64 > r64_fin, n64 < r64_fin)
        out = np.where(midpoint & pick_n, n, r)
        return out.astype(F32)


def fmax(a, b):
    """Maximum; a NaN operand yields the other operand, ties return ``a``."""
    a = np.asarray(a, F32)
    b = np.asarray(b, F32)
    return np.where(np.isnan(a), b, np.where(np.isnan(b), a, np.where(b > a, b, a))).astype(F32)


def fmin(a, b):
    a = np.asarray(a, F32)
    b = np.asarray(b, F32)
    return np.where(np.isnan(a), b, np.where(np.isnan(b), a, np.where(b < a, b, a))).astype(F32)


def add(a, b):
    with np.errstate(all="ignore"):
        return (np.asarray(a, F32) + np.asarray(b, F32)).astype(F32)


def mul(a, b):
    with np.errstate(all="ignore"):
        return (np.asarray(a, F32) * np.asarray(b, F32)).astype(F32)


# Special-function unit: evaluated in binary64, rounded once to binary32.

def rcp(x):
    with np.errstate(all="ignore"):
        return (1.0 / np.asarray(x, F32).astype(F64)).astype(F32)


def rsqrt(x):
    with np.errstate(all="ignore"):
        return (1.0 / np.sqrt(np.asarray(x, F32).astype(F64))).astype(F32)


def exp2(x):
    with np.errstate(all="ignore"):
        return np.exp2(np.asarray(x, F32).astype(F64)).astype(F32)


def log2(x):
    with np.errstate(all="ignore"):
        return np.log2(np.asarray(x, F32).astype(F64)).astype(F32)


def i2f(bits):
    """Signed 32-bit integer pattern to nearest binary32."""
    return np.asarray(bits, U32).view(np.int32).astype(F32)


def f2i(x):
    """Truncate toward zero, saturating; NaN converts to 0."""
    x = np.asarray(x, F32).astype(F64)
    with np.errstate(all="ignore"):
        t = np.trunc(np.nan_to_num(x, nan=0.0, posinf=2.0**31, neginf=-(2.0**31)))
    t = np.clip(t, -(2.0**31), 2.0**31 - 1)
    return t.astype(np.int64).astype(np.int32).view(U32)
