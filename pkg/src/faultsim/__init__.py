"""Deterministic SIMT GPU simulator with permanent-fault injection for CNN inference."""
from .errors import FaultSimError, Trap
from .isa import Instruction, Kernel, Opcode, UnitClass, parse_kernel, emit_text, validate_kernel
from .simt import DeviceConfig, ExecStats, LaunchConfig, ResidentThreadCoord, TrapKind, execute_kernel

__version__ = "0.1.0"
