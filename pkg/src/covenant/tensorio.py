"""Raw tensor file format (CVTN): 16-byte header plus little-endian data.

Header: magic "CVTN", dtype code u8, rank u8, dims u16 x 4 (unused dims
zero), two reserved bytes.  Elements follow packed little-endian at the
element width.
"""

from __future__ import annotations

import struct

from .dtypes import DataType, I8, I16, I32, U8, U16, U32
from .errors import CovenantError
from .oracle import Tensor

MAGIC = b"CVTN"

_CODES: list[tuple[int, DataType]] = [
    (0, I8),
    (1, U8),
    (2, I16),
    (3, U16),
    (4, I32),
    (5, U32),
]


def _code_of(dtype: DataType) -> int:
    for code, dt in _CODES:
        if dt == dtype:
            return code
    raise CovenantError(f"no file code for dtype {dtype.render()}")


def _dtype_of(code: int) -> DataType:
    for c, dt in _CODES:
        if c == code:
            return dt
    raise CovenantError(f"unknown tensor dtype code {code}")


def dump_tensor(t: Tensor) -> bytes:
    if len(t.dims) > 4:
        raise CovenantError(f"tensor rank {len(t.dims)} exceeds the format limit of 4")
    dims = list(t.dims) + [0] * (4 - len(t.dims))
    header = MAGIC + struct.pack("<BB4H2x", _code_of(t.dtype), len(t.dims), *dims)
    width = t.dtype.bits // 8
    body = b"".join(
        (v & ((1 << t.dtype.bits) - 1)).to_bytes(width, "little") for v in t.data
    )
    return header + body


def load_tensor(data: bytes) -> Tensor:
    if data[:4] != MAGIC:
        raise CovenantError("bad tensor magic")
    code, rank, d0, d1, d2, d3 = struct.unpack_from("<BB4H", data, 4)
    dtype = _dtype_of(code)
    dims = (d0, d1, d2, d3)[:rank]
    count = 1
    for d in dims:
        count *= d
    width = dtype.bits // 8
    body = data[16 : 16 + count * width]
    if len(body) != count * width:
        raise CovenantError("truncated tensor data")
    values = tuple(
        dtype.wrap(int.from_bytes(body[i * width : (i + 1) * width], "little"))
        for i in range(count)
    )
    return Tensor(dtype, dims, values)


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_tensor(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return load_tensor(fh.read())
