"""Integer element types and the shared arithmetic contract.

The simulator and the reference oracle are two independent implementations
of the same integer semantics; this module is the single written contract
both sides follow:

  * values wrap two's-complement (or modulo 2^bits for unsigned) at the
    declared width after every ADD/SUB/MUL/MAC step;
  * MMUL/MAC/GEMM accumulate in the *output* operand's width and wrap there;
  * RELU/MAX/MIN are exact (no wrap can occur on comparisons).

Only the width/sign helpers live here.  Operation logic is deliberately
duplicated in `simulator` and `oracle` so that one cannot mask a bug in
the other.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParseError

VALID_BITS = (8, 16, 32)


@dataclass(frozen=True)
class DataType:
    """An element type: signedness plus a storage width in bits."""

    signed: bool
    bits: int

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise ParseError(f"unsupported dtype width {self.bits}; expected one of {VALID_BITS}")

    @property
    def min_value(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def max_value(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    def wrap(self, value: int) -> int:
        """Reduce an unbounded integer into this type's representable range."""
        value &= (1 << self.bits) - 1
        if self.signed and value >= 1 << (self.bits - 1):
            value -= 1 << self.bits
        return value

    def render(self) -> str:
        return f"{'i' if self.signed else 'u'}{self.bits}"

    def __str__(self) -> str:
        return self.render()


def parse_dtype(text: str) -> DataType:
    """Parse "i16"/"u8"-style names; inverse of DataType.render."""
    text = text.strip()
    if len(text) < 2 or text[0] not in "iu":
        raise ParseError(f"malformed dtype {text!r}; expected i<bits> or u<bits>")
    try:
        bits = int(text[1:])
    except ValueError:
        raise ParseError(f"malformed dtype {text!r}; width is not an integer") from None
    if bits not in VALID_BITS:
        raise ParseError(f"unsupported dtype width {bits} in {text!r}; expected one of {VALID_BITS}")
    return DataType(signed=text[0] == "i", bits=bits)


I8 = DataType(True, 8)
I16 = DataType(True, 16)
I32 = DataType(True, 32)
U8 = DataType(False, 8)
U16 = DataType(False, 16)
U32 = DataType(False, 32)
