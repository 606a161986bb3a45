"""Codelet IR: portable layer descriptions over surrogate tensor variables.

A codelet is an ordered tree of loop, compute, and transfer operations.
Pipeline passes never mutate a codelet in place; each stage builds a new
value and advances the stage marker:

    template -> instantiated -> mapped -> scheduled -> tiled -> optimized
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .acg import ACG
from .dtypes import DataType
from .errors import LayerError

STAGES = ("template", "instantiated", "mapped", "scheduled", "tiled", "optimized")

SURROGATE_KINDS = ("inp", "out", "param", "local")


@dataclass(frozen=True)
class IndexExpr:
    """Linear index expression: sum of coeff*loop terms plus a constant.

    Coefficients may be parameter names until instantiation resolves them.
    """

    terms: tuple[tuple[int | str, str], ...] = ()  # (coefficient, loop name)
    const: int = 0

    @property
    def loops(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.terms)

    def evaluate(self, env: dict[str, int]) -> int:
        total = self.const
        for coeff, name in self.terms:
            if isinstance(coeff, str):
                raise LayerError(f"unresolved parameter {coeff!r} in index expression")
            if name not in env:
                raise LayerError(f"loop {name!r} not in scope for index expression")
            total += coeff * env[name]
        return total

    def resolve(self, params: dict[str, int]) -> "IndexExpr":
        terms = []
        for coeff, name in self.terms:
            if isinstance(coeff, str):
                if coeff not in params:
                    raise LayerError(f"unbound parameter {coeff!r} in index expression")
                coeff = params[coeff]
            terms.append((coeff, name))
        return IndexExpr(tuple(terms), self.const)

    def shifted(self, delta: int) -> "IndexExpr":
        return IndexExpr(self.terms, self.const + delta)

    def render(self) -> str:
        parts = []
        for coeff, name in self.terms:
            if coeff == 1:
                parts.append(name)
            else:
                parts.append(f"{coeff}*{name}")
        if self.const or not parts:
            parts.append(str(self.const))
        return "+".join(parts)


@dataclass(frozen=True)
class OperandRef:
    """Reference to a surrogate, optionally indexed per dimension."""

    name: str
    index: tuple[IndexExpr, ...] = ()

    @property
    def loops(self) -> tuple[str, ...]:
        seen: list[str] = []
        for expr in self.index:
            for name in expr.loops:
                if name not in seen:
                    seen.append(name)
        return tuple(seen)

    def render(self) -> str:
        if not self.index:
            return self.name
        return f"{self.name}[{','.join(e.render() for e in self.index)}]"


@dataclass(frozen=True)
class Constant:
    """Typed constant used as an allocating-transfer source, e.g. i16(0)."""

    dtype: DataType
    value: int

    def render(self) -> str:
        return f"{self.dtype.render()}({self.value})"


@dataclass(frozen=True)
class Surrogate:
    """Shaped, typed, located tensor variable.

    Kinds: inp/out (layer operands), param (scalar layer parameter, no
    shape/dtype/loc), local (tile storage derived during scheduling; its
    location never changes once assigned).
    """

    name: str
    kind: str
    shape: tuple[int | str, ...] = ()
    dtype: DataType | None = None
    loc: str | None = None

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.shape:
            if isinstance(d, str):
                raise LayerError(f"surrogate {self.name!r} has unresolved dimension {d!r}")
            n *= d
        return n

    def dim_strides(self) -> tuple[int, ...]:
        """Row-major flat strides per dimension."""
        strides = [1] * len(self.shape)
        for i in range(len(self.shape) - 2, -1, -1):
            nxt = self.shape[i + 1]
            if isinstance(nxt, str):
                raise LayerError(f"surrogate {self.name!r} has unresolved dimension {nxt!r}")
            strides[i] = strides[i + 1] * nxt
        return tuple(strides)


@dataclass(frozen=True)
class ComputeOp:
    """Apply one capability at a given offset.

    granularity is the number of consecutive flat elements each operand
    covers per invocation (1 until a vectorizing pass widens it).
    """

    loc: str | None
    capability: str
    operands: tuple[OperandRef, ...]
    result: OperandRef
    granularity: int = 1

    def render(self) -> str:
        loc = "null" if self.loc is None else f'"{self.loc}"'
        args = ", ".join([loc, f'"{self.capability}"'] + [o.render() for o in self.operands])
        return f"{self.result.render()}=compute({args});"


@dataclass(frozen=True)
class TransferOp:
    """Explicit data movement.

    Allocating form (local is set): destination is an ACG node name and the
    transfer creates exactly one local surrogate there.  Overwriting form
    (local is None): destination is a surrogate slice that already exists.
    """

    source: OperandRef | Constant
    dest: OperandRef | str
    sizes: tuple[int, ...]
    local: str | None = None

    @property
    def allocating(self) -> bool:
        return self.local is not None

    @property
    def loops(self) -> tuple[str, ...]:
        seen: list[str] = []
        for ref in (self.source, self.dest):
            if isinstance(ref, OperandRef):
                for name in ref.loops:
                    if name not in seen:
                        seen.append(name)
        return tuple(seen)

    def render(self) -> str:
        src = self.source.render()
        dst = f'"{self.dest}"' if isinstance(self.dest, str) else self.dest.render()
        sizes = f"[{','.join(str(s) for s in self.sizes)}]"
        call = f"transfer({src}, {dst}, {sizes});"
        return f"{self.local}={call}" if self.allocating else call


@dataclass(frozen=True)
class LoopOp:
    """Counted loop; the variable walks lower, lower+stride, ... < upper."""

    name: str
    lower: int | str
    upper: int | str
    stride: int | str
    body: tuple["CodeletOp", ...] = ()

    @property
    def iterations(self) -> int:
        if isinstance(self.lower, str) or isinstance(self.upper, str) or isinstance(self.stride, str):
            raise LayerError(f"loop {self.name!r} has unresolved bounds")
        span = self.upper - self.lower
        if span <= 0 or self.stride <= 0:
            raise LayerError(f"loop {self.name!r} has empty or negative range")
        if span % self.stride:
            raise LayerError(f"loop {self.name!r}: stride {self.stride} does not divide range {span}")
        return span // self.stride

    def values(self) -> range:
        return range(self.lower, self.upper, self.stride)

    def render_head(self) -> str:
        if isinstance(self.lower, int) and self.lower == 0:
            if self.stride == 1:
                return f"loop {self.name}({self.upper})"
            if (
                isinstance(self.upper, int)
                and isinstance(self.stride, int)
                and self.upper % self.stride == 0
            ):
                return f"loop {self.name}({self.upper // self.stride}, stride={self.stride})"
        return f"loop {self.name}({self.lower},{self.upper},{self.stride})"


CodeletOp = LoopOp | ComputeOp | TransferOp


@dataclass(frozen=True)
class Codelet:
    name: str
    params: tuple[str, ...]
    surrogates: tuple[Surrogate, ...]
    body: tuple[CodeletOp, ...]
    stage: str = "template"
    param_values: tuple[tuple[str, int], ...] = ()

    def surrogate(self, name: str) -> Surrogate:
        for s in self.surrogates:
            if s.name == name:
                return s
        raise LayerError(f"codelet {self.name!r} has no surrogate {name!r}")

    def has_surrogate(self, name: str) -> bool:
        return any(s.name == name for s in self.surrogates)

    def param(self, name: str) -> int:
        for key, value in self.param_values:
            if key == name:
                return value
        raise LayerError(f"codelet {self.name!r} has no bound parameter {name!r}")

    def with_surrogate(self, surrogate: Surrogate) -> "Codelet":
        if self.has_surrogate(surrogate.name):
            raise LayerError(f"surrogate {surrogate.name!r} already declared")
        return replace(self, surrogates=self.surrogates + (surrogate,))

    def walk(self):
        """Yield every op in program order, loops before their bodies."""

        def _walk(ops):
            for op in ops:
                yield op
                if isinstance(op, LoopOp):
                    yield from _walk(op.body)

        yield from _walk(self.body)

    def loops(self) -> list[LoopOp]:
        return [op for op in self.walk() if isinstance(op, LoopOp)]

    def find_loop(self, name: str) -> LoopOp:
        for op in self.walk():
            if isinstance(op, LoopOp) and op.name == name:
                return op
        raise LayerError(f"codelet {self.name!r} has no loop {name!r}")


def instantiate(
    template: Codelet,
    bindings: dict[str, int],
    dtypes: dict[str, DataType],
) -> Codelet:
    """Bind layer parameters and datatypes, producing concrete shapes.

    `dtypes` maps surrogate names to element types; the empty-string key
    supplies a default for every inp/out surrogate without its own entry.
    Instantiating an already-instantiated codelet with identical bindings is
    the identity.
    """
    for key in bindings:
        if key not in template.params:
            raise LayerError(f"binding for unknown parameter {key!r}")
    params = dict(template.param_values)
    params.update(bindings)
    for name in template.params:
        if name not in params:
            raise LayerError(f"missing binding for parameter {name!r}")
        if params[name] < 1:
            raise LayerError(f"parameter {name!r} must be positive, got {params[name]}")
    default = dtypes.get("")
    for key in dtypes:
        if key and not template.has_surrogate(key):
            raise LayerError(f"dtype given for unknown surrogate {key!r}")

    surrogates = []
    for s in template.surrogates:
        if s.kind == "param":
            continue
        shape = tuple(params[d] if isinstance(d, str) else d for d in s.shape)
        for d in shape:
            if d < 1:
                raise LayerError(f"surrogate {s.name!r} has non-positive dimension {d}")
        dtype = dtypes.get(s.name, s.dtype if s.dtype is not None else default)
        if dtype is None:
            raise LayerError(f"no dtype supplied for surrogate {s.name!r}")
        surrogates.append(replace(s, shape=shape, dtype=dtype))

    def resolve_bound(v: int | str) -> int:
        if isinstance(v, str):
            if v not in params:
                raise LayerError(f"unbound parameter {v!r} in loop bounds")
            return params[v]
        return v

    def resolve_ops(ops: tuple[CodeletOp, ...]) -> tuple[CodeletOp, ...]:
        out: list[CodeletOp] = []
        for op in ops:
            if isinstance(op, LoopOp):
                out.append(
                    replace(
                        op,
                        lower=resolve_bound(op.lower),
                        upper=resolve_bound(op.upper),
                        stride=resolve_bound(op.stride),
                        body=resolve_ops(op.body),
                    )
                )
            elif isinstance(op, ComputeOp):
                out.append(
                    replace(
                        op,
                        operands=tuple(
                            replace(r, index=tuple(e.resolve(params) for e in r.index))
                            for r in op.operands
                        ),
                        result=replace(
                            op.result,
                            index=tuple(e.resolve(params) for e in op.result.index),
                        ),
                    )
                )
            else:
                out.append(op)
        return tuple(out)

    result = Codelet(
        name=template.name,
        params=template.params,
        surrogates=tuple(surrogates),
        body=resolve_ops(template.body),
        stage="instantiated",
        param_values=tuple(sorted(params.items())),
    )
    _check_index_bounds(result)
    return result


def _check_index_bounds(codelet: Codelet) -> None:
    """Reject instantiations whose index expressions can leave a surrogate."""

    def visit(ops, env: dict[str, tuple[int, int]]):
        for op in ops:
            if isinstance(op, LoopOp):
                last = op.lower + (op.iterations - 1) * op.stride
                visit(op.body, env | {op.name: (op.lower, last)})
            elif isinstance(op, ComputeOp):
                for ref in (*op.operands, op.result):
                    surrogate = codelet.surrogate(ref.name)
                    if len(ref.index) != len(surrogate.shape):
                        raise LayerError(
                            f"{ref.render()}: expected {len(surrogate.shape)} indices"
                        )
                    for expr, dim in zip(ref.index, surrogate.shape):
                        high = expr.const
                        for coeff, name in expr.terms:
                            if name not in env:
                                raise LayerError(f"undeclared index {name!r} in {ref.render()}")
                            high += coeff * env[name][1]
                        if high >= dim:
                            raise LayerError(
                                f"{ref.render()}: index can reach {high}, "
                                f"beyond dimension {dim} of {surrogate.name!r}"
                            )

    visit(codelet.body, {})


def render_codelet(codelet: Codelet) -> str:
    """Canonical text form; reparsing a rendered template yields an equal value."""
    lines = [f"cdlt {codelet.name} {{"]

    def emit(text: str, depth: int) -> None:
        lines.append("  " * depth + text)

    if codelet.stage == "template":
        for p in codelet.params:
            emit(f"{p}=param();", 1)
    for s in codelet.surrogates:
        if s.kind in ("inp", "out"):
            shape = f"[{','.join(str(d) for d in s.shape)}]"
            dtype = s.dtype.render() if s.dtype is not None else "null"
            loc = f'"{s.loc}"' if s.loc is not None else "null"
            emit(f"{s.name}={s.kind}({shape},{dtype},{loc});", 1)

    def emit_ops(ops, depth):
        for op in ops:
            if isinstance(op, LoopOp):
                emit(op.render_head() + " {", depth)
                emit_ops(op.body, depth + 1)
                emit("}", depth)
            else:
                emit(op.render(), depth)

    emit_ops(codelet.body, 1)
    lines.append("}")
    return "\n".join(lines) + "\n"


def footprint(codelet: Codelet, acg: ACG) -> dict[str, int]:
    """Peak simultaneous live bits per memory node.

    Input/output surrogates occupy their home node for the whole program.  A
    local is live from its allocating transfer until its last use within the
    loop scope that allocated it; disjoint lifetimes therefore do not stack.
    Sizes count stored bits (elements padded to the node's data width).
    """
    if codelet.stage not in ("scheduled", "tiled", "optimized"):
        raise LayerError(f"footprint requires a scheduled codelet, got stage {codelet.stage!r}")
    peak: dict[str, int] = {m.name: 0 for m in acg.memories}
    current: dict[str, int] = {m.name: 0 for m in acg.memories}

    def stored_bits(s: Surrogate) -> int:
        node = acg.memory(s.loc)
        return s.element_count * node.element_stride_bits(s.dtype)

    def charge(node_name: str, bits: int) -> None:
        if node_name not in current:
            raise LayerError(f"transfer references node {node_name!r} absent from ACG {acg.name!r}")
        current[node_name] += bits
        peak[node_name] = max(peak[node_name], current[node_name])

    for s in codelet.surrogates:
        if s.kind in ("inp", "out") and s.loc is not None and acg.is_memory(s.loc):
            charge(s.loc, stored_bits(s))

    # Last use of each local within the scope (body tuple) that allocated it.
    def uses_local(op: CodeletOp, name: str) -> bool:
        if isinstance(op, ComputeOp):
            refs = (*op.operands, op.result)
            return any(r.name == name for r in refs)
        if isinstance(op, TransferOp):
            if op.local == name:
                return True
            for ref in (op.source, op.dest):
                if isinstance(ref, OperandRef) and ref.name == name:
                    return True
            return False
        return any(uses_local(child, name) for child in op.body)

    def visit(ops: tuple[CodeletOp, ...]) -> None:
        allocated_here: list[tuple[str, int, int]] = []  # local, home, last-use position
        for pos, op in enumerate(ops):
            if isinstance(op, TransferOp) and op.allocating:
                local = codelet.surrogate(op.local)
                last = pos
                for later in range(pos + 1, len(ops)):
                    if uses_local(ops[later], op.local):
                        last = later
                allocated_here.append((op.local, last, stored_bits(local)))
                charge(local.loc, stored_bits(local))
            if isinstance(op, LoopOp):
                visit(op.body)
            for name, last, bits in allocated_here:
                if last == pos:
                    local = codelet.surrogate(name)
                    current[local.loc] -= bits
        # Anything never used after allocation was released at its own position.

    visit(codelet.body)
    return peak
