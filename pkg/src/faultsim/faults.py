"""Permanent and transient fault models, their write hooks, and fault lists."""
from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConstraintError, FormatError
from .isa import FAULT_TARGET_UNITS, Instruction, UnitClass, unit_class
from .simt import WARP_SIZE, DeviceConfig, ResidentThreadCoord

U32 = np.uint32
ALL_LANES = "all"


class Mode(enum.Enum):
    FLIP = "flip"
    STUCK_AT_0 = "stuck_at_0"
    STUCK_AT_1 = "stuck_at_1"


class TransientMode(enum.Enum):
    SINGLE_BIT_FLIP = "single_bit_flip"
    TWO_ADJACENT_BIT_FLIP = "two_adjacent_bit_flip"
    RANDOM_VALUE = "random_value"
    ALL_ZERO = "all_zero"


class FaultKind(enum.Enum):
    REGISTER = "register"
    UNIT = "unit"


@dataclass(frozen=True)
class RegisterFault:
    """Stuck-at bit in one register of one resident thread of one SM."""

    sm_id: int
    thread_id: int
    register: int
    bit: int
    stuck_at: int

    @property
    def mask(self) -> int:
        return 1 << self.bit

    @property
    def mode(self) -> Mode:
        return Mode.STUCK_AT_1 if self.stuck_at else Mode.STUCK_AT_0


@dataclass(frozen=True)
class UnitFault:
    """Corrupted output bit of one functional-unit class on one SM.

    ``lane`` is ``ALL_LANES`` or a single lane index, modelling one faulty SP.
    """

    sm_id: int
    unit: UnitClass
    bit: int
    mode: Mode = Mode.FLIP
    lane: Union[int, str] = ALL_LANES


@dataclass(frozen=True)
class TransientFault:
    """One-shot corruption of the ``occurrence``-th register write (0-based,
    counted over the whole run) at one resident thread."""

    mode: TransientMode
    sm_id: int
    thread_id: int
    occurrence: int = 0
    bit: int = 0
    seed: int = 0


Fault = Union[RegisterFault, UnitFault, TransientFault]


@dataclass(frozen=True)
class FaultSpec:
    id: str
    fault: Fault


# --- corruption --------------------------------------------------------------

def corrupt_value(value: int, bit: int, mode: Mode) -> int:
    if not 0 <= bit <= 31:
        raise ValueError(f"bit {bit} outside [0, 31]")
    m = 1 << bit
    value &= 0xFFFFFFFF
    if mode is Mode.FLIP:
        return value ^ m
    if mode is Mode.STUCK_AT_1:
        return value | m
    return value & ~m & 0xFFFFFFFF


def corrupt_lanes(values: np.ndarray, bit: int, mode: Mode) -> np.ndarray:
    m = U32(1 << bit)
    if mode is Mode.FLIP:
        return values ^ m
    if mode is Mode.STUCK_AT_1:
        return values | m
    return values & ~m


def _fault(spec) -> Fault:
    return spec.fault if isinstance(spec, FaultSpec) else spec


def matches(spec, coord: ResidentThreadCoord, instr: Instruction) -> bool:
    """Whether a write by ``instr`` at ``coord`` is a target of ``spec``."""
    f = _fault(spec)
    if not instr.writes_register:
        return False
    if isinstance(f, RegisterFault):
        return (coord.sm_id == f.sm_id and coord.resident_thread_id == f.thread_id
                and instr.dst == f.register)
    if isinstance(f, UnitFault):
        return (coord.sm_id == f.sm_id
                and (f.lane == ALL_LANES or coord.lane == f.lane)
                and unit_class(instr.opcode) is f.unit)
    return coord.sm_id == f.sm_id and coord.resident_thread_id == f.thread_id


class PermanentHook:
    """Write hook for register and unit faults; pure, so freely shareable."""

    def __init__(self, fault: RegisterFault | UnitFault):
        self.fault = fault

    def _targets(self, instr: Instruction) -> bool:
        f = self.fault
        if isinstance(f, RegisterFault):
            return instr.dst == f.register
        return unit_class(instr.opcode) is f.unit

    def __call__(self, coord: ResidentThreadCoord, instr: Instruction, value: int) -> int:
        if matches(self.fault, coord, instr):
            return corrupt_value(value, self.fault.bit, self.fault.mode)
        return value

    def apply_lanes(self, instr, sm_ids, resident_ids, values):
        f = self.fault
        if not self._targets(instr):
            return values
        if isinstance(f, RegisterFault):
            hit = (sm_ids == f.sm_id) & (resident_ids == f.thread_id)
        elif f.lane == ALL_LANES:
            hit = sm_ids == f.sm_id
        else:
            hit = (sm_ids == f.sm_id) & (resident_ids % WARP_SIZE == f.lane)
        if not hit.any():
            return values
        out = values.copy()
        out[hit] = corrupt_lanes(values[hit], f.bit, f.mode)
        return out


class TransientHook:
    """Fires once, on the chosen write occurrence at the chosen thread.

    Occurrences are counted in warp order, so the simulator must not batch
    warps while this hook is installed.
    """

    lockstep_safe = False

    def __init__(self, fault: TransientFault):
        self.fault = fault
        self.seen = 0
        self.fired = False

    def _corrupt(self, value: int) -> int:
        f = self.fault
        if f.mode is TransientMode.SINGLE_BIT_FLIP:
            return value ^ (1 << f.bit)
        if f.mode is TransientMode.TWO_ADJACENT_BIT_FLIP:
            return value ^ (0b11 << min(f.bit, 30))
        if f.mode is TransientMode.RANDOM_VALUE:
            return random.Random(f.seed).getrandbits(32)
        return 0

    def __call__(self, coord, instr, value: int) -> int:
        if self.fired or not matches(self.fault, coord, instr):
            return value
        if self.seen == self.fault.occurrence:
            self.fired = True
            return self._corrupt(value)
        self.seen += 1
        return value

    def apply_lanes(self, instr, sm_ids, resident_ids, values):
        f = self.fault
        if self.fired:
            return values
        hit = np.flatnonzero((sm_ids == f.sm_id) & (resident_ids == f.thread_id))
        if hit.size == 0:
            return values
        k = f.occurrence - self.seen
        if k >= hit.size:
            self.seen += hit.size
            return values
        out = values.copy()
        out[hit[k]] = self._corrupt(int(values[hit[k]]))
        self.fired = True
        return out


def make_hook(spec) -> PermanentHook | TransientHook:
    """Hook injecting ``spec`` into every matching write of a run."""
    f = _fault(spec)
    if isinstance(f, TransientFault):
        return TransientHook(f)
    return PermanentHook(f)


def validate_fault(spec, device: DeviceConfig) -> None:
    """Raise :class:`ConstraintError` if ``spec`` does not fit ``device``."""
    f = _fault(spec)
    if not 0 <= f.sm_id < device.num_sms:
        raise ConstraintError(f"sm {f.sm_id} outside device ({device.num_sms} SMs)")
    if not 0 <= f.bit <= 31:
        raise ConstraintError(f"bit {f.bit} outside [0, 31]")
    if isinstance(f, (RegisterFault, TransientFault)):
        if not 0 <= f.thread_id < device.resident_threads_per_sm:
            raise ConstraintError(f"thread {f.thread_id} outside resident range")
    if isinstance(f, RegisterFault):
        if not 0 <= f.register < device.regs_per_thread:
            raise ConstraintError(f"R{f.register} outside register file")
        if f.stuck_at not in (0, 1):
            raise ConstraintError("stuck_at must be 0 or 1")
    if isinstance(f, UnitFault):
        if f.unit not in FAULT_TARGET_UNITS:
            raise ConstraintError(f"{f.unit.value} is not a fault target")
        if f.lane != ALL_LANES and not (isinstance(f.lane, int) and 0 <= f.lane < WARP_SIZE):
            raise ConstraintError(f"lane {f.lane!r} invalid")


# --- fault lists -------------------------------------------------------------

@dataclass
class FaultConstraints:
    sm_ids: Sequence[int] = (0,)
    registers: Sequence[int] = tuple(range(10))
    threads: Sequence[int] | None = None  # default: every resident thread
    bits: Sequence[int] = tuple(range(32))
    stuck_at: Sequence[int] = (0, 1)
    units: Sequence[UnitClass] = FAULT_TARGET_UNITS
    lanes: Sequence[Union[int, str]] = (ALL_LANES,)
    modes: Sequence[Mode] = (Mode.FLIP,)


def generate_fault_list(seed: int, n: int, kind: FaultKind | str,
                        constraints: FaultConstraints | None = None,
                        device: DeviceConfig | None = None) -> list[FaultSpec]:
    """Sample ``n`` distinct faults, each dimension uniform and independent."""
    kind = FaultKind(kind)
    c = constraints or FaultConstraints()
    device = device or DeviceConfig()
    if n < 1:
        raise ConstraintError("n must be >= 1")
    threads = list(range(device.resident_threads_per_sm)) if c.threads is None else list(c.threads)
    if kind is FaultKind.REGISTER:
        dims = [list(c.sm_ids), threads, list(c.registers), list(c.bits), list(c.stuck_at)]
        build = lambda s, t, r, b, v: RegisterFault(s, t, r, b, v)  # noqa: E731
    else:
        dims = [list(c.sm_ids), list(c.units), list(c.bits), list(c.modes), list(c.lanes)]
        build = lambda s, u, b, m, ln: UnitFault(s, UnitClass(u), b, Mode(m), ln)  # noqa: E731
    for d in dims:
        if not d:
            raise ConstraintError(f"empty constraint dimension for {kind.value} faults")
    capacity = 1
    for d in dims:
        capacity *= len(set(d))
    if n > capacity:
        raise ConstraintError(f"{n} distinct faults requested, only {capacity} exist")

    rng = random.Random(seed)
    seen: set = set()
    out: list[FaultSpec] = []
    while len(out) < n:
        f = build(*(rng.choice(d) for d in dims))
        if f in seen:
            continue
        validate_fault(f, device)
        seen.add(f)
        out.append(FaultSpec(f"F{len(out) + 1:06d}", f))
    return out


def fault_to_dict(spec: FaultSpec) -> dict:
    f = spec.fault
    if isinstance(f, RegisterFault):
        return {"id": spec.id, "kind": "register", "sm": f.sm_id, "thread": f.thread_id,
                "reg": f.register, "bit": f.bit, "stuck_at": f.stuck_at}
    if isinstance(f, UnitFault):
        return {"id": spec.id, "kind": "unit", "sm": f.sm_id, "lane": f.lane,
                "unit": f.unit.value, "bit": f.bit, "mode": f.mode.value}
    return {"id": spec.id, "kind": "transient", "mode": f.mode.value, "sm": f.sm_id,
            "thread": f.thread_id, "occurrence": f.occurrence, "bit": f.bit, "seed": f.seed}


def fault_from_dict(d: dict) -> FaultSpec:
    try:
        kind = d["kind"]
        if kind == "register":
            f = RegisterFault(int(d["sm"]), int(d["thread"]), int(d["reg"]), int(d["bit"]),
                              int(d["stuck_at"]))
        elif kind == "unit":
            lane = d.get("lane", ALL_LANES)
            f = UnitFault(int(d["sm"]), UnitClass(d["unit"]), int(d["bit"]),
                          Mode(d.get("mode", "flip")), lane if lane == ALL_LANES else int(lane))
        elif kind == "transient":
            f = TransientFault(TransientMode(d["mode"]), int(d["sm"]), int(d["thread"]),
                               int(d.get("occurrence", 0)), int(d.get("bit", 0)),
                               int(d.get("seed", 0)))
        else:
            raise FormatError(f"unknown fault kind {kind!r}")
        return FaultSpec(str(d["id"]), f)
    except (KeyError, ValueError, TypeError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"bad fault record {d!r}: {e}") from None


def dump_fault_list(specs: Iterable[FaultSpec], path) -> None:
    with open(path, "w") as fh:
        for s in specs:
            fh.write(json.dumps(fault_to_dict(s), separators=(",", ":")) + "\n")


def load_fault_list(path) -> list[FaultSpec]:
    specs = []
    ids = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
        spec = fault_from_dict(d)
        if spec.id in ids:
            raise FormatError(f"{path}:{lineno}: duplicate fault id {spec.id}")
        ids.add(spec.id)
        specs.append(spec)
    return specs
