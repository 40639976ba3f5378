"""Mini-SASS instruction set: opcodes, unit classes, kernels, text format.

Grammar, one instruction per line::

    [label:] [@P<n>|@!P<n>] MNEMONIC[.CMP] dst, src1[, src2[, src3]]   # comment

Registers are ``R<n>``, predicate registers ``P<n>``, immediates ``0x``-hex,
decimal or ``f:<float>``, special registers ``%tid.x``, ``%ctaid.x`` and
``%ntid.x``.  Memory operands are ``[R<n>]`` or ``[R<n>+imm]``; ``LD`` reads
``LD Rd, [Ra+off]`` and ``ST`` writes ``ST [Ra+off], Rv``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

from .errors import AssemblySyntaxError, DuplicateLabel, UnresolvedLabel
from .fp32 import f2b

MAX_REGISTERS = 64
NUM_PREDICATES = 8


class Opcode(enum.Enum):
    # integer
    IADD = "IADD"
    ISUB = "ISUB"
    IMUL = "IMUL"
    IMAD = "IMAD"
    SHL = "SHL"
    SHR = "SHR"
    AND = "AND"
    OR = "OR"
    XOR = "XOR"
    ISETP = "ISETP"
    # floating point
    FADD = "FADD"
    FMUL = "FMUL"
    FFMA = "FFMA"
    FMAX = "FMAX"
    FMIN = "FMIN"
    FSETP = "FSETP"
    # special function
    FRCP = "FRCP"
    FRSQ = "FRSQ"
    FEXP2 = "FEXP2"
    FLOG2 = "FLOG2"
    # memory
    LD = "LD"
    ST = "ST"
    # control
    BRA = "BRA"
    EXIT = "EXIT"
    # data movement
    MOV = "MOV"
    MOVI = "MOVI"
    I2F = "I2F"
    F2I = "F2I"


class UnitClass(enum.Enum):
    INT_CORE = "INT_CORE"
    FP_CORE = "FP_CORE"
    SFU = "SFU"
    MEM = "MEM"
    CTRL = "CTRL"


FAULT_TARGET_UNITS = (UnitClass.INT_CORE, UnitClass.FP_CORE, UnitClass.SFU)

_UNIT_OF = {
    **{op: UnitClass.INT_CORE for op in (
        Opcode.IADD, Opcode.ISUB, Opcode.IMUL, Opcode.IMAD, Opcode.SHL, Opcode.SHR,
        Opcode.AND, Opcode.OR, Opcode.XOR, Opcode.ISETP, Opcode.I2F, Opcode.F2I,
        Opcode.MOV, Opcode.MOVI)},
    **{op: UnitClass.FP_CORE for op in (
        Opcode.FADD, Opcode.FMUL, Opcode.FFMA, Opcode.FMAX, Opcode.FMIN, Opcode.FSETP)},
    **{op: UnitClass.SFU for op in (Opcode.FRCP, Opcode.FRSQ, Opcode.FEXP2, Opcode.FLOG2)},
    Opcode.LD: UnitClass.MEM,
    Opcode.ST: UnitClass.MEM,
    Opcode.BRA: UnitClass.CTRL,
    Opcode.EXIT: UnitClass.CTRL,
}


def unit_class(op: Opcode) -> UnitClass:
    """Functional unit that executes ``op``."""
    return _UNIT_OF[op]


class Cmp(enum.Enum):
    """Comparison carried by ISETP/FSETP as a mnemonic suffix."""

    LT = "LT"
    LE = "LE"
    GT = "GT"
    GE = "GE"
    EQ = "EQ"
    NE = "NE"
    LTU = "LTU"  # unsigned, ISETP only
    GEU = "GEU"


UNSIGNED_CMPS = (Cmp.LTU, Cmp.GEU)


class SpecialReg(enum.Enum):
    TID_X = "%tid.x"
    CTAID_X = "%ctaid.x"
    NTID_X = "%ntid.x"


@dataclass(frozen=True)
class Reg:
    index: int

    def __str__(self) -> str:
        return f"R{self.index}"


@dataclass(frozen=True)
class Imm:
    bits: int

    def __post_init__(self):
        object.__setattr__(self, "bits", self.bits & 0xFFFFFFFF)

    def __str__(self) -> str:
        return f"0x{self.bits:X}"


Operand = Union[Reg, Imm, SpecialReg]


@dataclass(frozen=True)
class Predicate:
    index: int
    negated: bool = False

    def __str__(self) -> str:
        return f"@{'!' if self.negated else ''}P{self.index}"


# opcode -> (number of sources, destination kind)
_SHAPE: dict[Opcode, tuple[int, str | None]] = {
    **{op: (2, "reg") for op in (
        Opcode.IADD, Opcode.ISUB, Opcode.IMUL, Opcode.SHL, Opcode.SHR, Opcode.AND,
        Opcode.OR, Opcode.XOR, Opcode.FADD, Opcode.FMUL, Opcode.FMAX, Opcode.FMIN)},
    Opcode.IMAD: (3, "reg"),
    Opcode.FFMA: (3, "reg"),
    Opcode.ISETP: (2, "pred"),
    Opcode.FSETP: (2, "pred"),
    **{op: (1, "reg") for op in (
        Opcode.FRCP, Opcode.FRSQ, Opcode.FEXP2, Opcode.FLOG2,
        Opcode.MOV, Opcode.MOVI, Opcode.I2F, Opcode.F2I)},
    Opcode.LD: (2, "reg"),     # address register, offset immediate
    Opcode.ST: (3, None),      # address register, offset immediate, value
    Opcode.BRA: (0, None),
    Opcode.EXIT: (0, None),
}


@dataclass(frozen=True)
class Instruction:
    seq_no: int
    opcode: Opcode
    dst: int | None = None
    srcs: tuple = ()
    predicate: Predicate | None = None
    branch_target: str | None = None
    pdst: int | None = None
    cmp: Cmp | None = None

    @property
    def writes_register(self) -> bool:
        return self.dst is not None

    @property
    def unit(self) -> UnitClass:
        return unit_class(self.opcode)


@dataclass(frozen=True, eq=False)
class Kernel:
    name: str
    instructions: tuple
    labels: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Kernel):
            return NotImplemented
        return (self.name == other.name and self.instructions == other.instructions
                and self.labels == other.labels)

    __hash__ = object.__hash__

    def __len__(self) -> int:
        return len(self.instructions)

    @cached_property
    def branch_index(self) -> dict:
        return {i.seq_no: self.labels[i.branch_target]
                for i in self.instructions if i.opcode is Opcode.BRA}


# --- validation --------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    seq_no: int
    rule: str
    detail: str = ""


def validate_kernel(k: Kernel) -> list[Violation]:
    """Check the structural invariants of ``k``; an empty list means valid."""
    out: list[Violation] = []
    n = len(k.instructions)
    if n == 0:
        return [Violation(-1, "MissingExit", "empty kernel")]
    for label, idx in k.labels.items():
        if not 0 <= idx < n:
            out.append(Violation(-1, "LabelOutOfBounds", f"{label} -> {idx}"))
    for pos, ins in enumerate(k.instructions):
        if ins.seq_no != pos:
            out.append(Violation(ins.seq_no, "SeqNoGap", f"expected {pos}"))
        nsrc, dkind = _SHAPE[ins.opcode]
        if len(ins.srcs) != nsrc:
            out.append(Violation(ins.seq_no, "BadOperands", f"{len(ins.srcs)} sources, expected {nsrc}"))
        if (ins.dst is not None) != (dkind == "reg"):
            out.append(Violation(ins.seq_no, "BadDestination", "register destination"))
        if (ins.pdst is not None) != (dkind == "pred") or (ins.cmp is not None) != (dkind == "pred"):
            out.append(Violation(ins.seq_no, "BadDestination", "predicate destination"))
        if ins.opcode is Opcode.FSETP and ins.cmp in UNSIGNED_CMPS:
            out.append(Violation(ins.seq_no, "BadCompare", ins.cmp.value))
        if ins.dst is not None and not 0 <= ins.dst < MAX_REGISTERS:
            out.append(Violation(ins.seq_no, "BadRegister", f"R{ins.dst}"))
        for s in ins.srcs:
            if isinstance(s, Reg) and not 0 <= s.index < MAX_REGISTERS:
                out.append(Violation(ins.seq_no, "BadRegister", str(s)))
        preds = [p for p in (ins.pdst, ins.predicate.index if ins.predicate else None) if p is not None]
        if any(not 0 <= p < NUM_PREDICATES for p in preds):
            out.append(Violation(ins.seq_no, "BadPredicate"))
        if ins.opcode in (Opcode.LD, Opcode.ST) and len(ins.srcs) >= 2:
            if not isinstance(ins.srcs[0], Reg) or not isinstance(ins.srcs[1], Imm):
                out.append(Violation(ins.seq_no, "BadOperands", "memory operand must be [Rn+imm]"))
        if ins.opcode is Opcode.MOVI and ins.srcs and not isinstance(ins.srcs[0], Imm):
            out.append(Violation(ins.seq_no, "BadOperands", "MOVI takes an immediate"))
        if ins.opcode is Opcode.BRA:
            if ins.branch_target is None:
                out.append(Violation(ins.seq_no, "MissingTarget"))
            elif ins.branch_target not in k.labels:
                out.append(Violation(ins.seq_no, "UnresolvedLabel", ins.branch_target))
        elif ins.branch_target is not None:
            out.append(Violation(ins.seq_no, "UnexpectedTarget", ins.branch_target))
    last = k.instructions[-1]
    if last.opcode is not Opcode.EXIT or last.predicate is not None:
        out.append(Violation(last.seq_no, "MissingExit"))
    return out


# --- text format -------------------------------------------------------------

def _fmt_mem(base: Operand, off: Operand) -> str:
    if isinstance(off, Imm) and off.bits == 0:
        return f"[{base}]"
    return f"[{base}+{off}]"


def _fmt_operand(o: Operand) -> str:
    return o.value if isinstance(o, SpecialReg) else str(o)


def format_instruction(ins: Instruction) -> str:
    parts = []
    if ins.predicate is not None:
        parts.append(str(ins.predicate))
    mnem = ins.opcode.value + (f".{ins.cmp.value}" if ins.cmp is not None else "")
    parts.append(mnem)
    ops: list[str] = []
    if ins.opcode is Opcode.BRA:
        ops.append(ins.branch_target or "")
    elif ins.opcode is Opcode.LD:
        ops = [f"R{ins.dst}", _fmt_mem(*ins.srcs[:2])]
    elif ins.opcode is Opcode.ST:
        ops = [_fmt_mem(*ins.srcs[:2]), _fmt_operand(ins.srcs[2])]
    else:
        if ins.dst is not None:
            ops.append(f"R{ins.dst}")
        if ins.pdst is not None:
            ops.append(f"P{ins.pdst}")
        ops.extend(_fmt_operand(s) for s in ins.srcs)
    text = " ".join(parts)
    return f"{text} {', '.join(ops)}" if ops else text


def emit_text(k: Kernel) -> str:
    """Render ``k`` in the assembly grammar accepted by :func:`parse_kernel`."""
    by_index: dict[int, list[str]] = {}
    for label, idx in k.labels.items():
        by_index.setdefault(idx, []).append(label)
    lines = [f"# kernel {k.name}"]
    for i, ins in enumerate(k.instructions):
        for label in by_index.get(i, []):
            lines.append(f"{label}:")
        lines.append(f"    {format_instruction(ins)}")
    return "\n".join(lines) + "\n"


_LABEL_RE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*:")
_PRED_RE = re.compile(r"^@(!?)P(\d+)$")
_MEM_RE = re.compile(r"^\[\s*R(\d+)\s*(?:([+-])\s*([^\]\s]+))?\s*\]$")
_SPECIAL = {s.value: s for s in SpecialReg}


def _parse_int(tok: str, line: int) -> int:
    try:
        v = int(tok, 16) if tok.lower().startswith(("0x", "-0x")) else int(tok, 10)
    except ValueError:
        raise AssemblySyntaxError(line, f"bad immediate {tok!r}") from None
    if not -(2**31) <= v < 2**32:
        raise AssemblySyntaxError(line, f"immediate {tok!r} exceeds 32 bits")
    return v & 0xFFFFFFFF


def _parse_operand(tok: str, line: int) -> Operand:
    if tok in _SPECIAL:
        return _SPECIAL[tok]
    m = re.fullmatch(r"R(\d+)", tok)
    if m:
        idx = int(m.group(1))
        if idx >= MAX_REGISTERS:
            raise AssemblySyntaxError(line, f"register {tok} out of range")
        return Reg(idx)
    if tok.startswith("f:"):
        try:
            return Imm(f2b(float(tok[2:])))
        except (ValueError, OverflowError):
            raise AssemblySyntaxError(line, f"bad float literal {tok!r}") from None
    return Imm(_parse_int(tok, line))


def _parse_mem(tok: str, line: int) -> tuple[Reg, Imm]:
    m = _MEM_RE.match(tok)
    if not m:
        raise AssemblySyntaxError(line, f"bad memory operand {tok!r}")
    off = 0
    if m.group(3) is not None:
        off = _parse_int(m.group(3), line)
        if m.group(2) == "-":
            off = -off
    return Reg(int(m.group(1))), Imm(off)


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or out:
        out.append(tail)
    return out


def _parse_line(body: str, seq_no: int, line: int) -> Instruction:
    toks = body.split(None, 1)
    pred = None
    m = _PRED_RE.match(toks[0])
    if m:
        pred = Predicate(int(m.group(2)), negated=m.group(1) == "!")
        if pred.index >= NUM_PREDICATES:
            raise AssemblySyntaxError(line, f"predicate P{pred.index} out of range")
        if len(toks) == 1:
            raise AssemblySyntaxError(line, "predicate without instruction")
        toks = toks[1].split(None, 1)
    mnem, _, suffix = toks[0].partition(".")
    try:
        op = Opcode(mnem.upper())
    except ValueError:
        raise AssemblySyntaxError(line, f"unknown mnemonic {toks[0]!r}") from None
    nsrc, dkind = _SHAPE[op]
    cmp = None
    if dkind == "pred":
        try:
            cmp = Cmp(suffix.upper())
        except ValueError:
            raise AssemblySyntaxError(line, f"{op.value} needs a comparison suffix") from None
        if op is Opcode.FSETP and cmp in UNSIGNED_CMPS:
            raise AssemblySyntaxError(line, f"FSETP has no unsigned comparison .{cmp.value}")
    elif suffix:
        raise AssemblySyntaxError(line, f"unexpected suffix .{suffix}")
    ops = _split_operands(toks[1]) if len(toks) > 1 else []
    if any(o == "" for o in ops):
        raise AssemblySyntaxError(line, "empty operand")

    if op is Opcode.BRA:
        if len(ops) != 1 or not re.fullmatch(r"[A-Za-z_][\w.]*", ops[0]):
            raise AssemblySyntaxError(line, "BRA takes one label")
        return Instruction(seq_no, op, predicate=pred, branch_target=ops[0])
    if op is Opcode.EXIT:
        if ops:
            raise AssemblySyntaxError(line, "EXIT takes no operands")
        return Instruction(seq_no, op, predicate=pred)
    if op is Opcode.LD:
        if len(ops) != 2:
            raise AssemblySyntaxError(line, "LD takes Rd, [Ra+off]")
        dst = _parse_operand(ops[0], line)
        if not isinstance(dst, Reg):
            raise AssemblySyntaxError(line, "LD destination must be a register")
        return Instruction(seq_no, op, dst=dst.index, srcs=_parse_mem(ops[1], line), predicate=pred)
    if op is Opcode.ST:
        if len(ops) != 2:
            raise AssemblySyntaxError(line, "ST takes [Ra+off], Rv")
        val = _parse_operand(ops[1], line)
        return Instruction(seq_no, op, srcs=(*_parse_mem(ops[0], line), val), predicate=pred)

    if len(ops) != nsrc + 1:
        raise AssemblySyntaxError(line, f"{op.value} takes {nsrc + 1} operands, got {len(ops)}")
    srcs = tuple(_parse_operand(t, line) for t in ops[1:])
    if op is Opcode.MOVI and not isinstance(srcs[0], Imm):
        raise AssemblySyntaxError(line, "MOVI takes an immediate")
    if dkind == "pred":
        m = re.fullmatch(r"P(\d+)", ops[0])
        if not m or int(m.group(1)) >= NUM_PREDICATES:
            raise AssemblySyntaxError(line, f"bad predicate destination {ops[0]!r}")
        return Instruction(seq_no, op, srcs=srcs, predicate=pred, pdst=int(m.group(1)), cmp=cmp)
    dst = _parse_operand(ops[0], line)
    if not isinstance(dst, Reg):
        raise AssemblySyntaxError(line, f"bad destination {ops[0]!r}")
    return Instruction(seq_no, op, dst=dst.index, srcs=srcs, predicate=pred)


def parse_kernel(source: str, name: str = "kernel") -> Kernel:
    """Assemble ``source`` into a :class:`Kernel`.

    A ``# kernel <name>`` comment on the first line overrides ``name``.
    """
    instrs: list[Instruction] = []
    labels: dict[str, int] = {}
    for lineno, raw in enumerate(source.splitlines(), start=1):
        if lineno == 1:
            m = re.match(r"^\s*#\s*kernel\s+(\S+)", raw)
            if m:
                name = m.group(1)
        body = raw.split("#", 1)[0].strip()
        while True:
            m = _LABEL_RE.match(body)
            if not m:
                break
            label = m.group(1)
            if label in labels:
                raise DuplicateLabel(label)
            labels[label] = len(instrs)
            body = body[m.end():].strip()
        if body:
            instrs.append(_parse_line(body, len(instrs), lineno))
    for ins in instrs:
        if ins.branch_target is not None and ins.branch_target not in labels:
            raise UnresolvedLabel(ins.branch_target)
    return Kernel(name, tuple(instrs), labels)
