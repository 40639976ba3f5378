"""Exception hierarchy shared by the simulator, compiler and campaign layers."""
from __future__ import annotations


class FaultSimError(Exception):
    pass


# --- assembly / kernels -----------------------------------------------------

class AssemblyError(FaultSimError):
    pass


class AssemblySyntaxError(AssemblyError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnresolvedLabel(AssemblyError):
    def __init__(self, name: str):
        super().__init__(f"unresolved label {name!r}")
        self.name = name


class DuplicateLabel(AssemblyError):
    def __init__(self, name: str):
        super().__init__(f"duplicate label {name!r}")
        self.name = name


class KernelError(FaultSimError):
    """Raised when a kernel with validation violations is launched."""


# --- simulator ---------------------------------------------------------------

class ConfigError(FaultSimError):
    pass


class DivergenceError(FaultSimError):
    """Non-uniform branch inside a warp. A simulator limitation, not a Trap."""

    def __init__(self, kernel_name: str, seq_no: int, detail: str = ""):
        super().__init__(f"{kernel_name}#{seq_no}: divergent branch {detail}".rstrip())
        self.kernel_name = kernel_name
        self.seq_no = seq_no


class Trap(FaultSimError):
    """A detected device error: the run does not complete.

    ``stats`` is attached by the simulator and holds the counters accumulated
    up to the trapping instruction.
    """

    def __init__(self, kind, kernel_name: str, seq_no: int, detail: str = ""):
        super().__init__(f"{kind.value} in {kernel_name}#{seq_no}: {detail}")
        self.kind = kind
        self.kernel_name = kernel_name
        self.seq_no = seq_no
        self.detail = detail
        self.stats = None


# --- faults ------------------------------------------------------------------

class ConstraintError(FaultSimError, ValueError):
    pass


# --- models / datasets -------------------------------------------------------

class FormatError(FaultSimError, ValueError):
    pass


class ShapeMismatch(FormatError):
    def __init__(self, layer, expected, found):
        super().__init__(f"layer {layer}: expected {expected}, found {found}")
        self.layer = layer
        self.expected = expected
        self.found = found


class BadMagic(FormatError):
    pass


class CountMismatch(FormatError):
    pass


class UnsupportedShape(FaultSimError, ValueError):
    pass


# --- campaign ----------------------------------------------------------------

class LengthMismatch(FaultSimError, ValueError):
    pass


class EmptyResults(FaultSimError, ValueError):
    pass


class GoldenMismatch(FaultSimError):
    """Simulator output disagrees with the sequential reference: a simulator bug."""


class CampaignAbort(FaultSimError):
    """The fault-free run trapped; no campaign can be classified against it."""
