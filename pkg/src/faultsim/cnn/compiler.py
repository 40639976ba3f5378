"""Compile CNN layers to mini-SASS kernels.

Every kernel computes one output element per thread.  Reductions are fully
unrolled in ascending index order, so the generated code is branch-free and
its rounding sequence matches :mod:`faultsim.cnn.reference` exactly.
Registers are allocated densely from R0: the thread index lives in R0, the
pointers and accumulator in R1-R3 and the operand staging registers in R4-R9.
Padding flags, when needed, use R10 upward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import UnsupportedShape
from ..fp32 import LOG2E_BITS, f2b
from ..isa import Cmp, Imm, Instruction, Kernel, Opcode, Predicate, Reg, SpecialReg
from ..simt import LaunchConfig
from .model import Conv, Dense, LayerSpec, MaxPool, Relu, Softmax, output_shape, param_counts

BLOCK_THREADS = 128
STAGE = 3  # taps loaded per group before their multiply-adds


@dataclass(frozen=True)
class Region:
    base: int    # in 32-bit words
    length: int

    @property
    def byte(self) -> int:
        return self.base * 4

    @property
    def end(self) -> int:
        return self.base + self.length


@dataclass(frozen=True)
class LayerLayout:
    input: Region
    output: Region
    weights: Region | None = None
    bias: Region | None = None
    scratch: Region | None = None

    @property
    def words(self) -> int:
        return max(r.end for r in (self.input, self.output, self.weights, self.bias, self.scratch)
                   if r is not None)


@dataclass(frozen=True)
class CompiledLayer:
    layer: LayerSpec
    input_shape: tuple
    output_shape: tuple
    kernels: tuple  # ((Kernel, LaunchConfig), ...)
    layout: LayerLayout


def launch_for(total: int) -> LaunchConfig:
    if total <= BLOCK_THREADS:
        return LaunchConfig(1, total)
    return LaunchConfig(-(-total // BLOCK_THREADS), BLOCK_THREADS)


def div_magic(d: int, nmax: int) -> tuple[int, int]:
    """Return ``(m, s)`` with ``(n * m) >> s == n // d`` for all ``0 <= n <= nmax``
    and no 32-bit overflow in ``n * m``."""
    n = np.arange(nmax + 1, dtype=np.uint64)
    for s in range(32):
        m = -(-(1 << s) // d)
        if nmax * m >= 1 << 32:
            break
        if np.array_equal((n * np.uint64(m)) >> np.uint64(s), n // np.uint64(d)):
            return m, s
    raise UnsupportedShape(f"no 32-bit reciprocal for division by {d} up to {nmax}")


class _Asm:
    def __init__(self, name: str):
        self.name = name
        self.code: list[Instruction] = []

    def __call__(self, op: Opcode, dst=None, *srcs, pred=None, pdst=None, cmp=None):
        srcs = tuple(Imm(s) if isinstance(s, int) else s for s in srcs)
        self.code.append(Instruction(len(self.code), op, dst, srcs, pred, None, pdst, cmp))

    def ld(self, dst: int, base: int, off: int, pred=None):
        self(Opcode.LD, dst, Reg(base), off, pred=pred)

    def st(self, base: int, off: int, val: int):
        self(Opcode.ST, None, Reg(base), off, Reg(val))

    def kernel(self) -> Kernel:
        return Kernel(self.name, tuple(self.code), {})


def _prologue(a: _Asm, launch: LaunchConfig, total: int) -> None:
    """R0 <- global thread index; surplus threads exit."""
    if launch.grid_blocks == 1:
        a(Opcode.MOV, 0, SpecialReg.TID_X)
    else:
        a(Opcode.MOV, 0, SpecialReg.CTAID_X)
        a(Opcode.MOV, 1, SpecialReg.NTID_X)
        a(Opcode.MOV, 2, SpecialReg.TID_X)
        a(Opcode.IMAD, 0, Reg(0), Reg(1), Reg(2))
    if launch.total_threads > total:
        a(Opcode.ISETP, None, Reg(0), total, pdst=0, cmp=Cmp.GE)
        a(Opcode.EXIT, pred=Predicate(0))


def _divmod(a: _Asm, q: int, r: int, n: int, d: int, nmax: int) -> None:
    """R[q] <- R[n] // d and R[r] <- R[n] % d for 0 <= R[n] <= nmax."""
    if nmax < d:
        a(Opcode.MOVI, q, 0)
        a(Opcode.MOV, r, Reg(n))
        return
    if d & (d - 1) == 0:
        a(Opcode.SHR, q, Reg(n), d.bit_length() - 1)
    else:
        m, s = div_magic(d, nmax)
        a(Opcode.IMUL, q, Reg(n), m)
        a(Opcode.SHR, q, Reg(q), s)
    a(Opcode.IMAD, r, Reg(q), -d, Reg(n))


def _store_and_exit(a: _Asm, out: Region, val: int) -> None:
    a(Opcode.SHL, 0, Reg(0), 2)
    a.st(0, out.byte, val)
    a(Opcode.EXIT)


def _mac_taps(a: _Asm, acc: int, taps: list, and_reg: int | None = None) -> None:
    """Accumulate ``acc += w * x`` over ``taps`` in order.

    Each tap is ``(w_base_reg, w_off, x_base_reg, x_off, flag)``.  ``flag`` is
    None, a register, or ``("and", r1, r2)``; the input reads as 0.0 when the
    flag is zero.
    """
    for g in range(0, len(taps), STAGE):
        group = taps[g:g + STAGE]
        for j, (wb, wo, _, _, _) in enumerate(group):
            a.ld(4 + j, wb, wo)
        for j, (_, _, xb, xo, flag) in enumerate(group):
            if flag is None:
                a.ld(7 + j, xb, xo)
            else:
                if isinstance(flag, tuple):
                    a(Opcode.AND, and_reg, Reg(flag[1]), Reg(flag[2]))
                    flag = and_reg
                a(Opcode.ISETP, None, Reg(flag), 0, pdst=1, cmp=Cmp.NE)
                a(Opcode.MOVI, 7 + j, 0)
                a.ld(7 + j, xb, xo, pred=Predicate(1))
        for j in range(len(group)):
            a(Opcode.FFMA, acc, Reg(4 + j), Reg(7 + j), Reg(acc))


def _load_bias(a: _Asm, acc: int, index_reg: int, tmp: int, bias: Region | None) -> None:
    if bias is None:
        a(Opcode.MOVI, acc, 0)
        return
    a(Opcode.SHL, tmp, Reg(index_reg), 2)
    a.ld(acc, tmp, bias.byte)


def _conv(a: _Asm, layer: Conv, ishape, oshape, L: LayerLayout, launch) -> None:
    cin, h, w = ishape
    co, ho, wo = oshape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    total = co * ho * wo
    _prologue(a, launch, total)
    _divmod(a, 1, 2, 0, ho * wo, total - 1)     # R1 = out channel, R2 = pixel
    _divmod(a, 3, 4, 2, wo, ho * wo - 1)        # R3 = y, R4 = x

    row_flag, col_flag = {}, {}
    if p:
        nxt = 10
        for axis, coord_reg, extent, flags in ((0, 3, h, row_flag), (1, 4, w, col_flag)):
            span = ho if axis == 0 else wo
            for kk in range(k):
                if kk - p >= 0 and (span - 1) * s + kk - p < extent:
                    continue
                tmp = 10 + 2 * k
                a(Opcode.IMAD, tmp, Reg(coord_reg), s, kk - p)
                a(Opcode.ISETP, None, Reg(tmp), extent, pdst=1, cmp=Cmp.LTU)
                a(Opcode.MOVI, nxt, 0)
                a(Opcode.MOVI, nxt, 1, pred=Predicate(1))
                flags[kk] = nxt
                nxt += 1

    a(Opcode.IMUL, 2, Reg(3), s * w * 4)
    a(Opcode.IMAD, 2, Reg(4), s * 4, Reg(2))     # R2 = input window origin (bytes)
    _load_bias(a, 3, 1, 3, L.bias)               # R3 = accumulator
    a(Opcode.IMUL, 1, Reg(1), cin * k * k * 4)   # R1 = weight row (bytes)

    taps = []
    and_reg = 10 + 2 * k
    for ci in range(cin):
        for ky in range(k):
            for kx in range(k):
                t = (ci * k + ky) * k + kx
                x_off = L.input.byte + ((ci * h + ky - p) * w + (kx - p)) * 4
                rf, cf = row_flag.get(ky), col_flag.get(kx)
                flag = rf if cf is None else cf if rf is None else ("and", rf, cf)
                taps.append((1, L.weights.byte + t * 4, 2, x_off, flag))
    _mac_taps(a, 3, taps, and_reg)
    _store_and_exit(a, L.output, 3)


def _dense(a: _Asm, layer: Dense, ishape, L: LayerLayout, launch) -> None:
    n = int(np.prod(ishape))
    _prologue(a, launch, layer.out_features)
    _load_bias(a, 3, 0, 1, L.bias)               # R3 = accumulator
    a(Opcode.IMUL, 1, Reg(0), n * 4)             # R1 = weight row (bytes)
    a(Opcode.MOVI, 2, 0)                         # R2 = input base
    taps = [(1, L.weights.byte + i * 4, 2, L.input.byte + i * 4, None) for i in range(n)]
    _mac_taps(a, 3, taps)
    _store_and_exit(a, L.output, 3)


def _maxpool(a: _Asm, layer: MaxPool, ishape, oshape, L: LayerLayout, launch) -> None:
    c, h, w = ishape
    _, ho, wo = oshape
    k, s = layer.size, layer.stride
    total = c * ho * wo
    _prologue(a, launch, total)
    _divmod(a, 1, 2, 0, ho * wo, total - 1)
    _divmod(a, 3, 4, 2, wo, ho * wo - 1)
    a(Opcode.IMUL, 2, Reg(1), h * w * 4)
    a(Opcode.IMAD, 2, Reg(3), s * w * 4, Reg(2))
    a(Opcode.IMAD, 2, Reg(4), s * 4, Reg(2))
    a.ld(3, 2, L.input.byte)
    for ky in range(k):
        for kx in range(k):
            if ky == kx == 0:
                continue
            a.ld(4, 2, L.input.byte + (ky * w + kx) * 4)
            a(Opcode.FMAX, 3, Reg(3), Reg(4))
    _store_and_exit(a, L.output, 3)


def _relu(a: _Asm, ishape, L: LayerLayout, launch) -> None:
    _prologue(a, launch, int(np.prod(ishape)))
    a(Opcode.SHL, 0, Reg(0), 2)
    a.ld(1, 0, L.input.byte)
    a(Opcode.FMAX, 1, Reg(1), f2b(0.0))
    a.st(0, L.output.byte, 1)
    a(Opcode.EXIT)


def _softmax(name: str, ishape, L: LayerLayout, launch) -> list[Kernel]:
    n = int(np.prod(ishape))
    # pass 1: e_i = exp2((x_i - max x) * log2(e))
    a = _Asm(f"{name}_exp")
    _prologue(a, launch, n)
    a(Opcode.MOVI, 2, 0)
    a.ld(3, 2, L.input.byte)
    for j in range(1, n):
        a.ld(4, 2, L.input.byte + 4 * j)
        a(Opcode.FMAX, 3, Reg(3), Reg(4))
    a(Opcode.SHL, 1, Reg(0), 2)
    a.ld(4, 1, L.input.byte)
    a(Opcode.FFMA, 4, Reg(3), f2b(-1.0), Reg(4))
    a(Opcode.FMUL, 4, Reg(4), LOG2E_BITS)
    a(Opcode.FEXP2, 4, Reg(4))
    a.st(1, L.scratch.byte, 4)
    a(Opcode.EXIT)
    k1 = a.kernel()
    # pass 2: p_i = e_i * rcp(sum e)
    a = _Asm(f"{name}_norm")
    _prologue(a, launch, n)
    a(Opcode.MOVI, 2, 0)
    a.ld(3, 2, L.scratch.byte)
    for j in range(1, n):
        a.ld(4, 2, L.scratch.byte + 4 * j)
        a(Opcode.FADD, 3, Reg(3), Reg(4))
    a(Opcode.FRCP, 3, Reg(3))
    a(Opcode.SHL, 1, Reg(0), 2)
    a.ld(4, 1, L.scratch.byte)
    a(Opcode.FMUL, 4, Reg(4), Reg(3))
    a.st(1, L.output.byte, 4)
    a(Opcode.EXIT)
    return [k1, a.kernel()]


def default_layout(layer: LayerSpec, input_shape: tuple, bias: bool = True) -> LayerLayout:
    """Standalone layout: input, weights, bias, scratch, output, packed from word 0."""
    oshape = output_shape(layer, input_shape)
    nw, nb = param_counts(layer, input_shape)
    cursor = 0

    def take(n):
        nonlocal cursor
        r = Region(cursor, n)
        cursor += n
        return r

    inp = take(int(np.prod(input_shape)))
    weights = take(nw) if nw else None
    b = take(nb) if nb and bias else None
    scratch = take(int(np.prod(oshape))) if isinstance(layer, Softmax) else None
    out = take(int(np.prod(oshape)))
    return LayerLayout(inp, out, weights, b, scratch)


def compile_layer(layer: LayerSpec, input_shape: tuple, layout: LayerLayout | None = None,
                  name: str | None = None) -> CompiledLayer:
    """Kernels and launch configurations computing ``layer`` over ``layout``."""
    input_shape = tuple(input_shape)
    oshape = output_shape(layer, input_shape)
    L = layout or default_layout(layer, input_shape)
    name = name or layer.kind
    total = int(np.prod(oshape))
    launch = launch_for(total)
    if isinstance(layer, Softmax):
        kernels = [(k, launch) for k in _softmax(name, input_shape, L, launch)]
    else:
        a = _Asm(name)
        if isinstance(layer, Conv):
            _conv(a, layer, input_shape, oshape, L, launch)
        elif isinstance(layer, Dense):
            _dense(a, layer, input_shape, L, launch)
        elif isinstance(layer, MaxPool):
            _maxpool(a, layer, input_shape, oshape, L, launch)
        elif isinstance(layer, Relu):
            _relu(a, input_shape, L, launch)
        else:
            raise UnsupportedShape(f"cannot compile {layer!r}")
        kernels = [(a.kernel(), launch)]
    return CompiledLayer(layer, input_shape, oshape, tuple(kernels), L)
