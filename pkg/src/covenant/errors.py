"""Exception hierarchy shared across the toolkit.

Each compilation stage raises its own subclass so the CLI can attribute
failures to a stage and map them onto its documented exit codes.
"""

from __future__ import annotations


class CovenantError(Exception):
    """Base class for all toolkit errors."""

    stage = "covenant"


class ParseError(CovenantError):
    """Syntax or structural error in a source document.

    Carries the 1-based line/column of the offending token and a short
    description of what was expected.
    """

    stage = "parse"

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class MachineError(CovenantError):
    """Invalid machine description or failed graph query."""

    stage = "machine"


class LayerError(CovenantError):
    """Invalid codelet, layer binding, or instantiation request."""

    stage = "layer"


class ScheduleError(CovenantError):
    """Mapping, transfer insertion, tiling, or loop-splitting failure."""

    stage = "schedule"


class LoweringError(CovenantError):
    """Macro-mnemonic expansion or address allocation failure."""

    stage = "codegen"


class EncodeError(CovenantError):
    """Field encoding, decoding, or binary container failure."""

    stage = "encode"


class SimulationError(CovenantError):
    """Runtime fault inside the functional simulator."""

    stage = "simulate"


class BindingError(SimulationError):
    """Malformed or incomplete semantic-binding file."""

    stage = "bindings"
