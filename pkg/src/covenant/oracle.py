"""Naive reference implementations of the capability vocabulary.

Everything here is a direct nested loop over plain Python integers,
independent of the scheduler, code generator, and simulator: this module is
the ground truth those components are verified against, so it must never
share execution code with them.  It follows the same integer contract
documented in dtypes (wrap-around at the declared width; matrix forms
accumulate in the output width; RELU/MAX/MIN exact).
"""

from __future__ import annotations

from dataclasses import dataclass

from .dtypes import DataType
from .errors import LayerError

UNSUPPORTED = ("DIV", "SIGMOID", "TANH")


@dataclass(frozen=True)
class Tensor:
    """Row-major integer tensor."""

    dtype: DataType
    dims: tuple[int, ...]
    data: tuple[int, ...]

    def __post_init__(self):
        n = 1
        for d in self.dims:
            n *= d
        if n != len(self.data):
            raise LayerError(f"tensor data length {len(self.data)} != shape {self.dims}")
        for v in self.data:
            if not self.dtype.min_value <= v <= self.dtype.max_value:
                raise LayerError(f"value {v} not representable in {self.dtype.render()}")

    @property
    def element_count(self) -> int:
        return len(self.data)

    def at(self, *index: int) -> int:
        flat = 0
        for i, d in zip(index, self.dims):
            if not 0 <= i < d:
                raise LayerError(f"index {index} out of bounds for shape {self.dims}")
            flat = flat * d + i
        return self.data[flat]


def tensor(dtype: DataType, dims: tuple[int, ...], values) -> Tensor:
    return Tensor(dtype, tuple(dims), tuple(values))


def eval_capability(name: str, inputs: list[Tensor]) -> Tensor:
    """Evaluate one capability on concrete tensors.

    Elementwise forms require equal shapes; MMUL is [M,K]x[K,N]; MAC is
    elementwise multiply-accumulate; GEMM is vector x matrix plus
    accumulator.  The division and transcendental entries of the vocabulary
    have no exact integer semantics and are rejected.
    """
    if name in UNSUPPORTED:
        raise LayerError(f"capability {name} has no exact integer semantics")

    if name == "RELU":
        (a,) = _arity(name, inputs, 1)
        return Tensor(a.dtype, a.dims, tuple(x if x > 0 else 0 for x in a.data))

    if name in ("ADD", "SUB", "MUL", "MAX", "MIN"):
        a, b = _arity(name, inputs, 2)
        if a.dims != b.dims:
            raise LayerError(f"{name}: shape mismatch {a.dims} vs {b.dims}")
        out = a.dtype
        if name == "ADD":
            data = (out.wrap(x + y) for x, y in zip(a.data, b.data))
        elif name == "SUB":
            data = (out.wrap(x - y) for x, y in zip(a.data, b.data))
        elif name == "MUL":
            data = (out.wrap(x * y) for x, y in zip(a.data, b.data))
        elif name == "MAX":
            data = (x if x > y else y for x, y in zip(a.data, b.data))
        else:
            data = (x if x < y else y for x, y in zip(a.data, b.data))
        return Tensor(out, a.dims, tuple(data))

    if name == "MMUL":
        a, b = _arity(name, inputs, 2)
        if len(a.dims) != 2 or len(b.dims) != 2 or a.dims[1] != b.dims[0]:
            raise LayerError(f"MMUL: shapes {a.dims} x {b.dims} do not conform")
        m, k = a.dims
        _, n = b.dims
        out = b.dtype
        data = []
        for i in range(m):
            for j in range(n):
                acc = 0
                for t in range(k):
                    acc = out.wrap(acc + a.at(i, t) * b.at(t, j))
                data.append(acc)
        return Tensor(out, (m, n), tuple(data))

    if name == "MAC":
        a, b, c = _arity(name, inputs, 3)
        if a.dims != b.dims or a.dims != c.dims:
            raise LayerError(f"MAC: shapes {a.dims}/{b.dims}/{c.dims} do not conform")
        out = c.dtype
        return Tensor(
            out, c.dims, tuple(out.wrap(x * y + z) for x, y, z in zip(a.data, b.data, c.data))
        )

    if name == "GEMM":
        a, b, c = _arity(name, inputs, 3)
        if len(a.dims) != 2 or len(b.dims) != 2 or a.dims[1] != b.dims[0]:
            raise LayerError(f"GEMM: shapes {a.dims} x {b.dims} do not conform")
        m, k = a.dims
        _, n = b.dims
        out = c.dtype
        if c.dims not in ((m, n), (n,)):
            raise LayerError(f"GEMM: accumulator shape {c.dims} does not match ({m},{n})")
        data = []
        for i in range(m):
            for j in range(n):
                acc = c.at(i, j) if len(c.dims) == 2 else c.at(j)
                for t in range(k):
                    acc = out.wrap(acc + a.at(i, t) * b.at(t, j))
                data.append(acc)
        return Tensor(out, (m, n), tuple(data))

    raise LayerError(f"unknown capability {name!r}")


def _arity(name: str, inputs: list[Tensor], n: int) -> list[Tensor]:
    if len(inputs) != n:
        raise LayerError(f"{name} takes {n} inputs, got {len(inputs)}")
    return inputs


# ---------------------------------------------------------------------------
# Whole-layer oracle


def eval_layer(
    name: str, params: dict[str, int], inputs: dict[str, Tensor]
) -> dict[str, Tensor]:
    """Evaluate a shipped layer directly, by its mathematical definition.

    Output element types follow the supplied accumulator/output tensors
    where present, else the first input's type.  This intentionally reuses
    none of the compiler pipeline.
    """
    if name in ("add", "sub", "mul", "max"):
        cap = {"add": "ADD", "sub": "SUB", "mul": "MUL", "max": "MAX"}[name]
        result = eval_capability(cap, [inputs["a"], inputs["b"]])
        return {"c": result}

    if name == "relu":
        return {"c": eval_capability("RELU", [inputs["a"]])}

    if name == "matmul":
        a, b, c = inputs["a"], inputs["b"], inputs["c"]
        out = c.dtype
        m, k = a.dims
        _, n = b.dims
        data = []
        for i in range(m):
            for j in range(n):
                acc = c.at(i, j)
                for t in range(k):
                    acc = out.wrap(acc + a.at(i, t) * b.at(t, j))
                data.append(acc)
        return {"c": Tensor(out, (m, n), tuple(data))}

    if name == "gemm":
        a, b, bias, c = inputs["a"], inputs["b"], inputs["bias"], inputs["c"]
        out = c.dtype
        m, k = a.dims
        _, n = b.dims
        data = []
        for i in range(m):
            for j in range(n):
                acc = out.wrap(bias.at(j) + c.at(i, j))
                for t in range(k):
                    acc = out.wrap(acc + a.at(i, t) * b.at(t, j))
                data.append(acc)
        return {"c": Tensor(out, (m, n), tuple(data))}

    if name == "fc":
        x, w, b, y = inputs["x"], inputs["w"], inputs["b"], inputs["y"]
        out = y.dtype
        k, n = w.dims
        data = []
        for j in range(n):
            acc = out.wrap(b.at(j) + y.at(j))
            for t in range(k):
                acc = out.wrap(acc + x.at(t) * w.at(t, j))
            data.append(acc)
        return {"y": Tensor(out, (n,), tuple(data))}

    if name == "conv2d":
        x, w, y = inputs["x"], inputs["w"], inputs["y"]
        stride = params["S"]
        out = y.dtype
        ih, iw = x.dims
        kh, kw = w.dims
        oh, ow = y.dims
        if stride * (oh - 1) + kh > ih or stride * (ow - 1) + kw > iw:
            raise LayerError("conv2d: output shape does not fit the input window")
        data = []
        for i in range(oh):
            for j in range(ow):
                acc = y.at(i, j)
                for p in range(kh):
                    for q in range(kw):
                        acc = out.wrap(acc + x.at(stride * i + p, stride * j + q) * w.at(p, q))
                data.append(acc)
        return {"y": Tensor(out, (oh, ow), tuple(data))}

    raise LayerError(f"no reference implementation for layer {name!r}")
