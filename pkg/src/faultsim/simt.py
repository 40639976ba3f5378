"""Deterministic functional simulator of a multi-SM SIMT device.

Reference semantics: blocks run in ascending block id, the warps of a block in
ascending warp index, each warp to completion, its 32 lanes in lockstep with
per-lane predication.  Every general-purpose register write passes through an
optional write hook before it is committed, which is where fault injectors
attach.

For speed, a launch is first executed with all of its warps in lockstep.  That
is observationally identical to the warp-by-warp order as long as no warp
reads or overwrites a word another warp wrote (or overwrites a word another warp
read), no trap fires and control flow stays identical across warps.  When any
of these is detected the launch is rolled back and replayed warp by warp.
"""
from __future__ import annotations

import enum
import weakref
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Protocol

import numpy as np

from . import fp32
from .errors import ConfigError, DivergenceError, KernelError, Trap
from .isa import (NUM_PREDICATES, Cmp, Imm, Instruction, Kernel, Opcode, Reg,
                  SpecialReg, validate_kernel)

U32 = np.uint32
F32 = np.float32
WARP_SIZE = 32


@dataclass(frozen=True)
class DeviceConfig:
    num_sms: int = 2
    max_resident_warps_per_sm: int = 8
    warp_size: int = WARP_SIZE
    regs_per_thread: int = 32
    global_mem_words: int = 1 << 14
    instr_budget: int = 1_000_000

    def __post_init__(self):
        if self.warp_size != WARP_SIZE:
            raise ConfigError("warp_size must be 32")
        if self.num_sms < 1 or self.max_resident_warps_per_sm < 1:
            raise ConfigError("num_sms and max_resident_warps_per_sm must be >= 1")
        if not 16 <= self.regs_per_thread <= 64:
            raise ConfigError("regs_per_thread must be in [16, 64]")
        if self.global_mem_words < 1:
            raise ConfigError("global_mem_words must be >= 1")
        if self.instr_budget <= 0:
            raise ConfigError("instr_budget must be > 0")

    @property
    def resident_threads_per_sm(self) -> int:
        return self.max_resident_warps_per_sm * WARP_SIZE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad device config: {e}") from None


@dataclass(frozen=True)
class LaunchConfig:
    grid_blocks: int
    threads_per_block: int

    def __post_init__(self):
        if self.grid_blocks < 1 or self.threads_per_block < 1:
            raise ConfigError("grid_blocks and threads_per_block must be >= 1")

    @property
    def warps_per_block(self) -> int:
        return -(-self.threads_per_block // WARP_SIZE)

    @property
    def total_threads(self) -> int:
        return self.grid_blocks * self.threads_per_block


@dataclass(frozen=True)
class ResidentThreadCoord:
    sm_id: int
    resident_thread_id: int

    @property
    def lane(self) -> int:
        return self.resident_thread_id % WARP_SIZE

    @property
    def warp_slot(self) -> int:
        return self.resident_thread_id // WARP_SIZE


class TrapKind(enum.Enum):
    OUT_OF_BOUNDS = "OutOfBoundsAccess"
    MISALIGNED = "MisalignedAccess"
    TIMEOUT = "Timeout"


class WriteHook(Protocol):
    """``(coord, instr, written_value) -> value`` applied before each commit.

    Hooks may also provide ``apply_lanes(instr, sm_ids, resident_ids, values)``
    operating on uint32 arrays, which the simulator prefers.  A hook whose
    result depends on the order of writes across warps must set
    ``lockstep_safe = False``; hooks are otherwise assumed pure.
    """

    def __call__(self, coord: ResidentThreadCoord, instr: Instruction, value: int) -> int: ...


@dataclass
class ExecStats:
    instructions_executed: int = 0
    reg_write_counts: list = field(default_factory=list)
    register_writes: int = 0
    corrupted_writes: int = 0
    warp_retired: list = field(default_factory=list)

    @classmethod
    def empty(cls, regs: int) -> "ExecStats":
        return cls(reg_write_counts=[0] * regs)

    def merge(self, other: "ExecStats") -> "ExecStats":
        n = max(len(self.reg_write_counts), len(other.reg_write_counts))
        pad = lambda xs: list(xs) + [0] * (n - len(xs))  # noqa: E731
        return ExecStats(
            self.instructions_executed + other.instructions_executed,
            [a + b for a, b in zip(pad(self.reg_write_counts), pad(other.reg_write_counts))],
            self.register_writes + other.register_writes,
            self.corrupted_writes + other.corrupted_writes,
            self.warp_retired + other.warp_retired,
        )

    def to_json(self) -> dict:
        return {"instructions_executed": self.instructions_executed,
                "reg_write_counts": list(self.reg_write_counts)}


@dataclass
class ExecResult:
    memory: np.ndarray
    stats: ExecStats


def schedule_blocks(launch: LaunchConfig, device: DeviceConfig) -> dict[int, tuple[int, int]]:
    """Map each block to ``(sm_id, warp_slot_base)``.

    Blocks go round-robin over SMs; on each SM successive blocks take
    consecutive warp slots, wrapping modulo the resident-warp capacity.
    """
    wpb = launch.warps_per_block
    if wpb > device.max_resident_warps_per_sm:
        raise ConfigError(
            f"block of {launch.threads_per_block} threads needs {wpb} warp slots, "
            f"SM has {device.max_resident_warps_per_sm}")
    out = {}
    for b in range(launch.grid_blocks):
        arrival = b // device.num_sms
        out[b] = (b % device.num_sms, (arrival * wpb) % device.max_resident_warps_per_sm)
    return out


@dataclass(frozen=True)
class _Geometry:
    num_warps: int
    valid: np.ndarray
    sm: np.ndarray
    rt: np.ndarray
    tid: np.ndarray
    ctaid: np.ndarray
    ntid: np.ndarray
    gtid: np.ndarray


@lru_cache(maxsize=256)
def _geometry(launch: LaunchConfig, device: DeviceConfig) -> _Geometry:
    sched = schedule_blocks(launch, device)
    wpb = launch.warps_per_block
    nw = launch.grid_blocks * wpb
    g = np.arange(nw * WARP_SIZE)
    warp = g // WARP_SIZE
    lane = g % WARP_SIZE
    block = warp // wpb
    w_in_block = warp % wpb
    tid = w_in_block * WARP_SIZE + lane
    sm = np.array([sched[b][0] for b in range(launch.grid_blocks)])[block]
    base = np.array([sched[b][1] for b in range(launch.grid_blocks)])[block]
    slot = (base + w_in_block) % device.max_resident_warps_per_sm
    arrays = dict(
        valid=tid < launch.threads_per_block,
        sm=sm.astype(np.int64),
        rt=(slot * WARP_SIZE + lane).astype(np.int64),
        tid=tid.astype(U32),
        ctaid=block.astype(U32),
        ntid=np.full(g.shape, launch.threads_per_block, U32),
        gtid=(block * launch.threads_per_block + tid).astype(np.int64),
    )
    for a in arrays.values():
        a.setflags(write=False)
    return _Geometry(nw, **arrays)


# --- operational semantics ---------------------------------------------------

def _f(x):
    return np.asarray(x, U32).view(F32)


def _u(x):
    return np.asarray(x, F32).view(U32)


def alu(op: Opcode, a=None, b=None, c=None, cmp: Cmp | None = None):
    """Evaluate a register-writing or predicate-writing opcode on uint32 lanes.

    Returns uint32 values, or booleans for ISETP/FSETP.
    """
    with np.errstate(all="ignore"):
        if op is Opcode.IADD:
            return (a + b).astype(U32)
        if op is Opcode.ISUB:
            return (a - b).astype(U32)
        if op is Opcode.IMUL:
            return (a * b).astype(U32)
        if op is Opcode.IMAD:
            return (a * b + c).astype(U32)
        if op is Opcode.SHL:
            return (a << (b & U32(31))).astype(U32)
        if op is Opcode.SHR:
            return (a >> (b & U32(31))).astype(U32)
        if op is Opcode.AND:
            return (a & b).astype(U32)
        if op is Opcode.OR:
            return (a | b).astype(U32)
        if op is Opcode.XOR:
            return (a ^ b).astype(U32)
        if op in (Opcode.MOV, Opcode.MOVI):
            return np.asarray(a, U32)
        if op is Opcode.FADD:
            return _u(fp32.add(_f(a), _f(b)))
        if op is Opcode.FMUL:
            return _u(fp32.mul(_f(a), _f(b)))
        if op is Opcode.FFMA:
            return _u(fp32.fma(_f(a), _f(b), _f(c)))
        if op is Opcode.FMAX:
            return _u(fp32.fmax(_f(a), _f(b)))
        if op is Opcode.FMIN:
            return _u(fp32.fmin(_f(a), _f(b)))
        if op is Opcode.FRCP:
            return _u(fp32.rcp(_f(a)))
        if op is Opcode.FRSQ:
            return _u(fp32.rsqrt(_f(a)))
        if op is Opcode.FEXP2:
            return _u(fp32.exp2(_f(a)))
        if op is Opcode.FLOG2:
            return _u(fp32.log2(_f(a)))
        if op is Opcode.I2F:
            return _u(fp32.i2f(a))
        if op is Opcode.F2I:
            return fp32.f2i(_f(a))
        if op is Opcode.ISETP:
            if cmp in (Cmp.LTU, Cmp.GEU):
                x, y = np.asarray(a, U32), np.asarray(b, U32)
                return x < y if cmp is Cmp.LTU else x >= y
            return _compare(np.asarray(a, U32).view(np.int32), np.asarray(b, U32).view(np.int32), cmp)
        if op is Opcode.FSETP:
            return _compare(_f(a), _f(b), cmp)
    raise ValueError(f"{op} is not an ALU opcode")


def _compare(x, y, cmp: Cmp):
    if cmp is Cmp.LT:
        return x < y
    if cmp is Cmp.LE:
        return x <= y
    if cmp is Cmp.GT:
        return x > y
    if cmp is Cmp.GE:
        return x >= y
    if cmp is Cmp.EQ:
        return x == y
    if cmp is Cmp.NE:
        return x != y
    raise ValueError(f"comparison {cmp} not valid here")


@dataclass
class ThreadState:
    regs: np.ndarray
    preds: np.ndarray
    active: bool = True
    global_tid: int = 0
    tid: int = 0
    ctaid: int = 0
    ntid: int = 1

    @classmethod
    def fresh(cls, regs_per_thread: int = 32, **kw) -> "ThreadState":
        return cls(np.zeros(regs_per_thread, U32), np.zeros(NUM_PREDICATES, bool), **kw)


@dataclass(frozen=True)
class Effect:
    """Result of one instruction on one thread.

    kind is one of ``write``, ``pred``, ``store``, ``branch``, ``exit``,
    ``skip`` (predicated off).
    """

    kind: str
    target: int | None = None
    value: int | None = None


def _check_address(addr: int, words: int, instr: Instruction, kernel_name: str) -> int:
    if addr & 3:
        raise Trap(TrapKind.MISALIGNED, kernel_name, instr.seq_no, f"address 0x{addr:08X}")
    if addr >> 2 >= words:
        raise Trap(TrapKind.OUT_OF_BOUNDS, kernel_name, instr.seq_no, f"address 0x{addr:08X}")
    return addr >> 2


def eval_instruction(instr: Instruction, thread: ThreadState, memory: np.ndarray,
                     kernel_name: str = "?") -> Effect:
    """Single-thread semantics of ``instr``; does not mutate its inputs."""
    if instr.predicate is not None:
        if bool(thread.preds[instr.predicate.index]) == instr.predicate.negated:
            return Effect("skip")

    def val(o):
        if isinstance(o, Reg):
            return U32(thread.regs[o.index])
        if isinstance(o, Imm):
            return U32(o.bits)
        return U32({SpecialReg.TID_X: thread.tid, SpecialReg.CTAID_X: thread.ctaid,
                    SpecialReg.NTID_X: thread.ntid}[o])

    op = instr.opcode
    if op is Opcode.EXIT:
        return Effect("exit")
    if op is Opcode.BRA:
        return Effect("branch", value=1)
    if op in (Opcode.LD, Opcode.ST):
        addr = int((np.array([val(instr.srcs[0])], U32) + U32(instr.srcs[1].bits))[0])
        word = _check_address(addr, len(memory), instr, kernel_name)
        if op is Opcode.LD:
            return Effect("write", instr.dst, int(memory[word]))
        return Effect("store", word, int(val(instr.srcs[2])))
    args = [np.array([val(s)], U32) for s in instr.srcs]
    out = alu(op, *args, cmp=instr.cmp)
    if instr.pdst is not None:
        return Effect("pred", instr.pdst, int(bool(out[0])))
    return Effect("write", instr.dst, int(out[0]))


# --- execution engine --------------------------------------------------------

class _Replay(Exception):
    """Lockstep execution may diverge from warp order; rerun warp by warp."""


class _Hazards:
    """Cross-warp memory conflict detection for lockstep batches."""

    def __init__(self, words: int):
        self.writer = np.full(words, -1, np.int64)
        self.reader = np.full(words, -1, np.int64)

    def load(self, words, warps):
        w = self.writer[words]
        if np.any((w != -1) & (w != warps)):
            raise _Replay
        r = self.reader[words]
        new = np.where((r == -1) | (r == warps), warps, -2)
        self.reader[words] = new
        clash = self.reader[words] != new
        if np.any(clash):
            self.reader[words[clash]] = -2

    def store(self, words, warps):
        w = self.writer[words]
        r = self.reader[words]
        if np.any((w != -1) & (w != warps)) or np.any((r != -1) & (r != warps)):
            raise _Replay
        self.writer[words] = warps
        if np.any(self.writer[words] != warps):
            raise _Replay


class _Budget:
    def __init__(self, limit: int):
        self.limit = limit
        self.count = 0


_DECODED: "weakref.WeakKeyDictionary[Kernel, list]" = weakref.WeakKeyDictionary()
_VALIDATED: "weakref.WeakSet[Kernel]" = weakref.WeakSet()


def _decode(kernel: Kernel) -> list:
    dec = _DECODED.get(kernel)
    if dec is None:
        dec = []
        for ins in kernel.instructions:
            srcs = []
            for s in ins.srcs:
                if isinstance(s, Reg):
                    srcs.append(("r", s.index))
                elif isinstance(s, Imm):
                    srcs.append(("i", U32(s.bits)))
                else:
                    srcs.append(("s", s))
            target = kernel.labels[ins.branch_target] if ins.branch_target else None
            dec.append((ins.opcode, ins.dst, srcs, ins.predicate, target, ins.pdst, ins.cmp, ins))
        _DECODED[kernel] = dec
    return dec


def _hook_lanes(hook, instr, sm, rt, vals):
    fast = getattr(hook, "apply_lanes", None)
    if fast is not None:
        return np.asarray(fast(instr, sm, rt, vals), U32)
    out = vals.copy()
    for i in range(vals.size):
        coord = ResidentThreadCoord(int(sm[i]), int(rt[i]))
        out[i] = int(hook(coord, instr, int(vals[i]))) & 0xFFFFFFFF
    return out


def _run_batch(kernel: Kernel, dec: list, geo: _Geometry, w0: int, w1: int,
               mem: np.ndarray, hook, stats: ExecStats, budget: _Budget,
               hazards: _Hazards | None, regs_per_thread: int) -> None:
    lockstep = hazards is not None
    sel = slice(w0 * WARP_SIZE, w1 * WARP_SIZE)
    nw = w1 - w0
    T = nw * WARP_SIZE
    sm, rt = geo.sm[sel], geo.rt[sel]
    special = {SpecialReg.TID_X: geo.tid[sel], SpecialReg.CTAID_X: geo.ctaid[sel],
               SpecialReg.NTID_X: geo.ntid[sel]}
    warp_of = np.arange(T) // WARP_SIZE
    regs = np.zeros((regs_per_thread, T), U32)
    preds = np.zeros((NUM_PREDICATES, T), bool)
    active = geo.valid[sel].copy()
    live = active.reshape(nw, WARP_SIZE).any(axis=1)
    nlive = int(live.sum())
    retired = np.zeros(nw, np.int64)
    words_total = mem.shape[0]
    counts = stats.reg_write_counts
    name = kernel.name
    n = len(dec)
    pc = 0

    def fetch(s):
        kind, v = s
        if kind == "r":
            if v >= regs_per_thread:
                raise ConfigError(f"R{v} exceeds regs_per_thread={regs_per_thread}")
            return regs[v]
        if kind == "i":
            return v
        return special[v]

    def trap(kind, ins, lanes, addrs):
        if lockstep:
            raise _Replay
        first = int(np.flatnonzero(lanes)[0])
        raise Trap(kind, name, ins.seq_no, f"lane {first % WARP_SIZE} address 0x{int(addrs[first]):08X}")

    def addresses(ins, base, off, guard):
        addr = (np.broadcast_to(base, (T,)) + off).astype(U32)
        mis = guard & ((addr & U32(3)) != 0)
        oob = guard & ((addr >> U32(2)) >= words_total)
        bad = mis | oob
        if bad.any():
            first = int(np.flatnonzero(bad)[0])
            trap(TrapKind.MISALIGNED if mis[first] else TrapKind.OUT_OF_BOUNDS, ins, bad, addr)
        return (addr[guard] >> U32(2)).astype(np.int64)

    def commit(ins, dst, v, guard, full):
        # v holds one value per guarded lane (all T lanes when full)
        if dst >= regs_per_thread:
            raise ConfigError(f"R{dst} exceeds regs_per_thread={regs_per_thread}")
        if v.size == 0:
            return
        if hook is not None:
            h = _hook_lanes(hook, ins, sm if full else sm[guard], rt if full else rt[guard], v)
            stats.corrupted_writes += int(np.count_nonzero(h != v))
            v = h
        if full:
            regs[dst] = v
        else:
            regs[dst, guard] = v
        counts[dst] += int(v.size)
        stats.register_writes += int(v.size)

    try:
        while nlive:
            if pc >= n:
                break
            op, dst, srcs, pred, target, pdst, cmp, ins = dec[pc]
            retired += live
            budget.count += nlive
            if budget.count > budget.limit:
                if lockstep:
                    raise _Replay
                raise Trap(TrapKind.TIMEOUT, name, ins.seq_no,
                           f"executed {budget.count} > budget {budget.limit}")
            if pred is None:
                guard = active
            else:
                guard = active & (~preds[pred.index] if pred.negated else preds[pred.index])
            pc += 1

            if op is Opcode.EXIT:
                active = active & ~guard
                live = active.reshape(nw, WARP_SIZE).any(axis=1)
                nlive = int(live.sum())
            elif op is Opcode.BRA:
                g = guard.reshape(nw, WARP_SIZE)
                a = active.reshape(nw, WARP_SIZE)
                taken = g.any(axis=1)
                if np.any(taken & (g != a).any(axis=1)):
                    if lockstep:
                        raise _Replay
                    raise DivergenceError(name, ins.seq_no, "(predicate non-uniform across active lanes)")
                t_live = taken[live]
                if t_live.size and t_live.any():
                    if not t_live.all():
                        raise _Replay  # only reachable with several warps
                    pc = target
            elif op is Opcode.LD:
                if not guard.any():
                    continue
                words = addresses(ins, fetch(srcs[0]), srcs[1][1], guard)
                if lockstep:
                    hazards.load(words, warp_of[guard] + w0)
                commit(ins, dst, mem[words], guard, words.size == T)
            elif op is Opcode.ST:
                if not guard.any():
                    continue
                words = addresses(ins, fetch(srcs[0]), srcs[1][1], guard)
                vals = np.broadcast_to(fetch(srcs[2]), (T,))[guard]
                if lockstep:
                    hazards.store(words, warp_of[guard] + w0)
                if np.unique(words).size != words.size:
                    # lanes store in ascending order: keep the last write per word
                    rev = words[::-1]
                    _, idx = np.unique(rev, return_index=True)
                    keep = words.size - 1 - idx
                    words, vals = words[keep], vals[keep]
                mem[words] = vals
            else:
                args = [fetch(s) for s in srcs]
                if any(isinstance(x, np.ndarray) for x in args):
                    args = [np.broadcast_to(x, (T,)) if not isinstance(x, np.ndarray) else x for x in args]
                else:
                    args = [np.full(T, x, U32) for x in args]
                out = alu(op, *args, cmp=cmp)
                if pdst is not None:
                    preds[pdst] = np.where(guard, out, preds[pdst])
                elif guard.all():
                    commit(ins, dst, out, guard, True)
                else:
                    commit(ins, dst, out[guard], guard, False)
    finally:
        stats.warp_retired.extend(int(x) for x in retired)
        stats.instructions_executed += int(retired.sum())


def execute_kernel(kernel: Kernel, launch: LaunchConfig, device: DeviceConfig,
                   memory: np.ndarray, hook: WriteHook | Callable | None = None,
                   *, lockstep: bool = True) -> ExecResult:
    """Run one kernel launch on a copy of ``memory``.

    Raises :class:`Trap` on out-of-bounds or misaligned accesses and when the
    launch retires more than ``device.instr_budget`` warp instructions; the
    trap carries the partial stats.  Raises :class:`DivergenceError` when a
    branch is not uniform across the active lanes of a warp.
    """
    if kernel not in _VALIDATED:
        bad = validate_kernel(kernel)
        if bad:
            raise KernelError(f"kernel {kernel.name} is invalid: {bad}")
        _VALIDATED.add(kernel)
    geo = _geometry(launch, device)
    src = np.asarray(memory, U32)
    if src.shape != (device.global_mem_words,):
        raise ConfigError(f"memory image has {src.size} words, device has {device.global_mem_words}")
    dec = _decode(kernel)
    regs = device.regs_per_thread

    if lockstep and geo.num_warps > 1 and getattr(hook, "lockstep_safe", True):
        mem = src.copy()
        stats = ExecStats.empty(regs)
        try:
            _run_batch(kernel, dec, geo, 0, geo.num_warps, mem, hook, stats,
                       _Budget(device.instr_budget), _Hazards(mem.size), regs)
            return ExecResult(mem, stats)
        except _Replay:
            pass

    mem = src.copy()
    stats = ExecStats.empty(regs)
    budget = _Budget(device.instr_budget)
    try:
        for w in range(geo.num_warps):
            _run_batch(kernel, dec, geo, w, w + 1, mem, hook, stats, budget, None, regs)
    except Trap as t:
        t.stats = stats
        raise
    return ExecResult(mem, stats)


def load_memory_image(path, words: int | None = None) -> np.ndarray:
    """Read a raw little-endian 32-bit word image."""
    data = np.fromfile(path, dtype="<u4").astype(U32)
    if words is not None and data.size != words:
        raise ConfigError(f"{path}: {data.size} words, expected {words}")
    return data


def save_memory_image(path, memory: np.ndarray) -> None:
    np.asarray(memory, U32).astype("<u4").tofile(path)
