"""Parser for the .cdlt codelet surface syntax.

Accepts the three loop spellings (`loop n(N)`, `loop n(0,6,2)`,
`loop n(2, stride=6)`), surrogate declarations in either argument order
(shape-first or location-first), transfer statements, and compute
statements.  Index expressions are linear: sums of optionally scaled loop
names plus an integer constant.
"""

from __future__ import annotations

from .codelet import (
    Codelet,
    ComputeOp,
    Constant,
    IndexExpr,
    LoopOp,
    OperandRef,
    Surrogate,
    TransferOp,
)
from .dtypes import parse_dtype
from .errors import ParseError
from .lexer import TokenStream


def parse_codelet(text: str) -> Codelet:
    ts = TokenStream(text)
    if ts.peek().kind == "eof":
        raise ts.error("expected 'cdlt'")
    ts.expect("ident", "cdlt")
    name = ts.expect("ident").value
    ts.expect("punct", "{")
    parser = _CodeletParser(ts, name)
    body = parser.parse_block()
    ts.expect("punct", "}")
    ts.expect("eof")
    codelet = Codelet(
        name=name,
        params=tuple(parser.params),
        surrogates=tuple(parser.surrogates.values()),
        body=body,
        stage="template",
    )
    parser.check_references(codelet)
    return codelet


class _CodeletParser:
    def __init__(self, ts: TokenStream, name: str):
        self.ts = ts
        self.name = name
        self.params: list[str] = []
        self.surrogates: dict[str, Surrogate] = {}
        self.loop_names: list[str] = []

    def declare(self, surrogate: Surrogate, tok_line: int, tok_col: int) -> None:
        if surrogate.name in self.surrogates or surrogate.name in self.params:
            raise ParseError(f"duplicate declaration of {surrogate.name!r}", tok_line, tok_col)
        self.surrogates[surrogate.name] = surrogate

    def parse_block(self, loops: tuple[str, ...] = ()) -> tuple:
        ops = []
        while not self.ts.at("punct", "}"):
            if self.ts.at("eof"):
                raise self.ts.error("expected '}'")
            op = self.parse_statement(loops)
            if op is not None:  # declarations produce no body op
                ops.append(op)
        return tuple(ops)

    def parse_statement(self, loops: tuple[str, ...]):
        ts = self.ts
        if ts.at("ident", "loop"):
            return self.parse_loop(loops)
        if ts.at("ident", "transfer"):
            ts.next()
            op = self.parse_transfer_args(None, loops)
            ts.expect("punct", ";")
            return op
        head = ts.expect("ident")
        if ts.at("punct", "["):
            index = self.parse_index_list(loops)
            ts.expect("punct", "=")
            ts.expect("ident", "compute")
            op = self.parse_compute_args(OperandRef(head.value, index), loops)
            ts.expect("punct", ";")
            return op
        ts.expect("punct", "=")
        kind = ts.expect("ident")
        if kind.value == "param":
            ts.expect("punct", "(")
            ts.expect("punct", ")")
            ts.expect("punct", ";")
            self.declare(Surrogate(head.value, "param"), head.line, head.column)
            self.params.append(head.value)
            return None
        if kind.value in ("inp", "out"):
            surrogate = self.parse_operand_decl(head.value, kind.value)
            ts.expect("punct", ";")
            self.declare(surrogate, head.line, head.column)
            return None
        if kind.value == "transfer":
            op = self.parse_transfer_args(head.value, loops)
            ts.expect("punct", ";")
            return op
        if kind.value == "compute":
            op = self.parse_compute_args(OperandRef(head.value, ()), loops)
            ts.expect("punct", ";")
            return op
        raise ParseError(
            f"expected param/inp/out/transfer/compute, found {kind.value!r}",
            kind.line,
            kind.column,
        )

    def parse_loop(self, loops: tuple[str, ...]) -> LoopOp:
        ts = self.ts
        ts.expect("ident", "loop")
        name_tok = ts.expect("ident")
        name = name_tok.value
        if name in self.loop_names:
            raise ParseError(f"duplicate loop name {name!r}", name_tok.line, name_tok.column)
        self.loop_names.append(name)
        ts.expect("punct", "(")
        first = self.parse_bound()
        lower: int | str = 0
        upper: int | str = first
        stride: int | str = 1
        if ts.accept("punct", ","):
            if ts.at("ident", "stride"):
                ts.next()
                ts.expect("punct", "=")
                stride = self.parse_bound()
                # loop n(I, stride=S) iterates I tiles of S elements each.
                if isinstance(first, str) or isinstance(stride, str):
                    raise ts.error("tile-count loops need concrete bounds")
                upper = first * stride
            else:
                second = self.parse_bound()
                ts.expect("punct", ",")
                third = self.parse_bound()
                lower, upper, stride = first, second, third
        ts.expect("punct", ")")
        ts.expect("punct", "{")
        body = self.parse_block(loops + (name,))
        ts.expect("punct", "}")
        return LoopOp(name=name, lower=lower, upper=upper, stride=stride, body=body)

    def parse_bound(self) -> int | str:
        ts = self.ts
        if ts.at("int"):
            return int(ts.next().value)
        tok = ts.expect("ident")
        return tok.value

    def parse_operand_decl(self, name: str, kind: str) -> Surrogate:
        """inp/out declaration; accepts ([shape],dtype,loc) or (loc,[shape],dtype)."""
        ts = self.ts
        ts.expect("punct", "(")
        loc: str | None = None
        if ts.at("string"):
            loc = ts.next().value
            ts.expect("punct", ",")
            shape = self.parse_shape()
            ts.expect("punct", ",")
            dtype = self.parse_dtype_or_null()
        else:
            shape = self.parse_shape()
            ts.expect("punct", ",")
            dtype = self.parse_dtype_or_null()
            ts.expect("punct", ",")
            if ts.at("string"):
                loc = ts.next().value
            else:
                ts.expect("ident", "null")
        ts.expect("punct", ")")
        return Surrogate(name, kind, shape=shape, dtype=dtype, loc=loc)

    def parse_shape(self) -> tuple[int | str, ...]:
        ts = self.ts
        ts.expect("punct", "[")
        dims: list[int | str] = []
        while True:
            if ts.at("int"):
                dims.append(int(ts.next().value))
            else:
                dims.append(ts.expect("ident").value)
            if not ts.accept("punct", ","):
                break
        ts.expect("punct", "]")
        return tuple(dims)

    def parse_dtype_or_null(self):
        ts = self.ts
        tok = ts.expect("ident")
        if tok.value == "null":
            return None
        try:
            return parse_dtype(tok.value)
        except ParseError as exc:
            raise ParseError(str(exc), tok.line, tok.column) from None

    def parse_index_list(self, loops: tuple[str, ...]) -> tuple[IndexExpr, ...]:
        ts = self.ts
        ts.expect("punct", "[")
        exprs = [self.parse_index_expr(loops)]
        while ts.accept("punct", ","):
            exprs.append(self.parse_index_expr(loops))
        ts.expect("punct", "]")
        return tuple(exprs)

    def parse_index_expr(self, loops: tuple[str, ...]) -> IndexExpr:
        ts = self.ts
        terms: list[tuple[int | str, str]] = []
        const = 0
        while True:
            if ts.at("int"):
                tok = ts.next()
                value = int(tok.value)
                if ts.accept("punct", "*"):
                    loop_tok = ts.expect("ident")
                    self.check_index_name(loop_tok, loops)
                    terms.append((value, loop_tok.value))
                else:
                    const += value
            else:
                tok = ts.expect("ident")
                if ts.accept("punct", "*"):
                    loop_tok = ts.expect("ident")
                    self.check_index_name(loop_tok, loops)
                    terms.append((tok.value, loop_tok.value))
                else:
                    self.check_index_name(tok, loops)
                    terms.append((1, tok.value))
            if not ts.accept("punct", "+"):
                break
        return IndexExpr(tuple(terms), const)

    def check_index_name(self, tok, loops: tuple[str, ...]) -> None:
        if tok.value not in loops:
            raise ParseError(f"undeclared index {tok.value!r}", tok.line, tok.column)

    def parse_compute_args(self, result: OperandRef, loops: tuple[str, ...]) -> ComputeOp:
        ts = self.ts
        ts.expect("punct", "(")
        loc: str | None = None
        if ts.at("string"):
            loc = ts.next().value
        else:
            ts.expect("ident", "null")
        ts.expect("punct", ",")
        capability = ts.expect("string").value
        operands = []
        while ts.accept("punct", ","):
            operands.append(self.parse_ref(loops))
        ts.expect("punct", ")")
        return ComputeOp(loc=loc, capability=capability, operands=tuple(operands), result=result)

    def parse_ref(self, loops: tuple[str, ...]) -> OperandRef:
        ts = self.ts
        tok = ts.expect("ident")
        index: tuple[IndexExpr, ...] = ()
        if ts.at("punct", "["):
            index = self.parse_index_list(loops)
        return OperandRef(tok.value, index)

    def parse_transfer_args(self, local: str | None, loops: tuple[str, ...]) -> TransferOp:
        ts = self.ts
        ts.expect("punct", "(")
        source: OperandRef | Constant
        tok = ts.peek()
        if tok.kind == "ident" and tok.value[0] in "iu" and tok.value[1:].isdigit():
            dtype = self.parse_dtype_or_null()
            ts.expect("punct", "(")
            value = ts.expect_int()
            ts.expect("punct", ")")
            source = Constant(dtype, value)
        else:
            source = self.parse_ref(loops)
        ts.expect("punct", ",")
        dest: OperandRef | str
        if ts.at("string"):
            dest = ts.next().value
            if local is None:
                raise ParseError(
                    "allocating transfer needs a destination variable", tok.line, tok.column
                )
        else:
            dest = self.parse_ref(loops)
            if local is not None:
                raise ParseError(
                    "overwriting transfer cannot bind a new variable", tok.line, tok.column
                )
        ts.expect("punct", ",")
        ts.expect("punct", "[")
        sizes = [ts.expect_int()]
        while ts.accept("punct", ","):
            sizes.append(ts.expect_int())
        ts.expect("punct", "]")
        ts.expect("punct", ")")
        op = TransferOp(source=source, dest=dest, sizes=tuple(sizes), local=local)
        if local is not None:
            # Scheduled-stage renders declare locals through their transfers.
            dtype = source.dtype if isinstance(source, Constant) else None
            self.surrogates.setdefault(
                local,
                Surrogate(local, "local", shape=op.sizes, dtype=dtype, loc=dest),
            )
        return op

    def check_references(self, codelet: Codelet) -> None:
        for op in codelet.walk():
            refs: list[OperandRef] = []
            if isinstance(op, ComputeOp):
                refs = [*op.operands, op.result]
            elif isinstance(op, TransferOp):
                refs = [r for r in (op.source, op.dest) if isinstance(r, OperandRef)]
            for ref in refs:
                if not codelet.has_surrogate(ref.name):
                    raise ParseError(f"undeclared surrogate {ref.name!r}")
