"""Parser and canonical printer for .acg machine-description documents.

Document shape:

    acg "name" [vliw_slots=N] [opcode_width=N] {
      memory NAME { data_width=N; banks=N; depth=N; }
      compute NAME { capability "(i16,2)=ADD((i16,2),(i16,2))"; ... }
      edge A -> B { bandwidth=N; }      # <-> declares both directions
      mnemonic NAME(opcode) {
        ifield("F", width[, read=NODE | write=NODE]),
        efield("F", width, ["A","B"][, read=NODE | write=NODE]),
        attr("key", "value")
      }
      expand compute CAP on NODE { emit MNEM { FIELD=spec; ... } ... }
      expand transfer A -> B { emit MNEM { FIELD=spec; ... } }
    }

Emit specs: integer constant, "quoted" enum label, or a context variable
(in0/in1/in2/out/n for computes; src/dst/n for transfers).
"""

from __future__ import annotations

from .acg import ACG, Capability, ComputeNode, Edge, MemoryNode, OperandSpec
from .codegen import ExpandRule, FieldAccess, FieldDef, MnemonicDef
from .dtypes import parse_dtype
from .errors import ParseError
from .lexer import TokenStream

_EXPAND_VARS = {"in0", "in1", "in2", "out", "n", "src", "dst"}


def parse_capability(text: str) -> Capability:
    """Parse one capability spec string, e.g. "(i16,2)=ADD((i16,2),(i16,2))"."""
    ts = TokenStream(text)

    def operand() -> OperandSpec:
        ts.expect("punct", "(")
        dtype_tok = ts.expect("ident")
        try:
            dtype = parse_dtype(dtype_tok.value)
        except ParseError:
            raise ParseError(
                f"malformed capability: bad dtype {dtype_tok.value!r}",
                dtype_tok.line,
                dtype_tok.column,
            ) from None
        dims = []
        while ts.accept("punct", ","):
            dims.append(ts.expect_int())
        ts.expect("punct", ")")
        if not dims or any(d < 1 for d in dims):
            raise ParseError(f"malformed capability: bad dims in {text!r}")
        return OperandSpec(dtype, tuple(dims))

    output = operand()
    ts.expect("punct", "=")
    name = ts.expect("ident").value
    ts.expect("punct", "(")
    inputs = [operand()]
    while ts.accept("punct", ","):
        inputs.append(operand())
    ts.expect("punct", ")")
    ts.expect("eof")
    return Capability(name=name, inputs=tuple(inputs), output=output)


def parse_acg(text: str) -> ACG:
    ts = TokenStream(text)
    if ts.peek().kind == "eof":
        raise ts.error("expected 'acg'")
    ts.expect("ident", "acg")
    name = ts.expect("string").value
    vliw_slots: int | None = None
    opcode_width = 8
    while ts.at("ident", "vliw_slots") or ts.at("ident", "opcode_width"):
        key = ts.next().value
        ts.expect("punct", "=")
        value = ts.expect_int()
        if key == "vliw_slots":
            vliw_slots = value
        else:
            opcode_width = value
    ts.expect("punct", "{")

    memories: list[MemoryNode] = []
    computes: list[ComputeNode] = []
    edges: list[Edge] = []
    mnemonics: list[MnemonicDef] = []
    expanders: list[ExpandRule] = []
    node_names: set[str] = set()

    while not ts.at("punct", "}"):
        tok = ts.peek()
        if tok.kind != "ident":
            raise ts.error("expected a declaration (memory/compute/edge/mnemonic/expand)")
        if tok.value == "memory":
            memories.append(_parse_memory(ts, node_names))
        elif tok.value == "compute":
            computes.append(_parse_compute(ts, node_names))
        elif tok.value == "edge":
            edges.extend(_parse_edge(ts))
        elif tok.value == "mnemonic":
            mnemonics.append(_parse_mnemonic(ts))
        elif tok.value == "expand":
            expanders.append(_parse_expand(ts))
        else:
            raise ParseError(f"unknown declaration {tok.value!r}", tok.line, tok.column)
    ts.expect("punct", "}")
    ts.expect("eof")

    acg = ACG(
        name=name,
        memories=tuple(memories),
        computes=tuple(computes),
        edges=tuple(edges),
        mnemonics=tuple(mnemonics),
        expanders=tuple(expanders),
        vliw_slots=vliw_slots,
        opcode_width=opcode_width,
    )
    for e in acg.edges:
        if not acg.has_node(e.src):
            raise ParseError(f"edge references unknown node {e.src!r}")
        if not acg.has_node(e.dst):
            raise ParseError(f"edge references unknown node {e.dst!r}")
    return acg


def _parse_memory(ts: TokenStream, node_names: set[str]) -> MemoryNode:
    ts.expect("ident", "memory")
    name_tok = ts.expect("ident")
    if name_tok.value in node_names:
        raise ParseError(f"duplicate node name {name_tok.value!r}", name_tok.line, name_tok.column)
    node_names.add(name_tok.value)
    ts.expect("punct", "{")
    attrs = {}
    while not ts.at("punct", "}"):
        key = ts.expect("ident").value
        ts.expect("punct", "=")
        attrs[key] = ts.expect_int()
        ts.expect("punct", ";")
    ts.expect("punct", "}")
    for key in ("data_width", "banks", "depth"):
        if key not in attrs:
            raise ParseError(f"memory {name_tok.value}: missing attribute {key!r}")
    extra = set(attrs) - {"data_width", "banks", "depth"}
    if extra:
        raise ParseError(f"memory {name_tok.value}: unknown attribute {sorted(extra)[0]!r}")
    return MemoryNode(name_tok.value, attrs["data_width"], attrs["banks"], attrs["depth"])


def _parse_compute(ts: TokenStream, node_names: set[str]) -> ComputeNode:
    ts.expect("ident", "compute")
    name_tok = ts.expect("ident")
    if name_tok.value in node_names:
        raise ParseError(f"duplicate node name {name_tok.value!r}", name_tok.line, name_tok.column)
    node_names.add(name_tok.value)
    ts.expect("punct", "{")
    caps: list[Capability] = []
    while not ts.at("punct", "}"):
        ts.expect("ident", "capability")
        spec_tok = ts.expect("string")
        try:
            caps.append(parse_capability(spec_tok.value))
        except ParseError as exc:
            raise ParseError(
                f"malformed capability string {spec_tok.value!r}: {exc}",
                spec_tok.line,
                spec_tok.column,
            ) from None
        ts.expect("punct", ";")
    ts.expect("punct", "}")
    return ComputeNode(name_tok.value, tuple(caps))


def _parse_edge(ts: TokenStream) -> list[Edge]:
    ts.expect("ident", "edge")
    src = ts.expect("ident").value
    bidirectional = False
    if ts.accept("punct", "<->"):
        bidirectional = True
    else:
        ts.expect("punct", "->")
    dst = ts.expect("ident").value
    ts.expect("punct", "{")
    ts.expect("ident", "bandwidth")
    ts.expect("punct", "=")
    bandwidth = ts.expect_int()
    ts.expect("punct", ";")
    ts.expect("punct", "}")
    edges = [Edge(src, dst, bandwidth)]
    if bidirectional:
        edges.append(Edge(dst, src, bandwidth))
    return edges


def _parse_mnemonic(ts: TokenStream) -> MnemonicDef:
    ts.expect("ident", "mnemonic")
    name = ts.expect("ident").value
    ts.expect("punct", "(")
    opcode = ts.expect_int()
    ts.expect("punct", ")")
    ts.expect("punct", "{")
    fields: list[FieldDef] = []
    attrs: list[tuple[str, str]] = []
    while not ts.at("punct", "}"):
        kind_tok = ts.expect("ident")
        if kind_tok.value in ("ifield", "efield"):
            fields.append(_parse_field(ts, kind_tok.value))
        elif kind_tok.value == "attr":
            ts.expect("punct", "(")
            key = ts.expect("string").value
            ts.expect("punct", ",")
            value = ts.expect("string").value
            ts.expect("punct", ")")
            attrs.append((key, value))
        else:
            raise ParseError(
                f"expected ifield/efield/attr, found {kind_tok.value!r}",
                kind_tok.line,
                kind_tok.column,
            )
        if not ts.accept("punct", ","):
            break
    ts.expect("punct", "}")
    return MnemonicDef(name, opcode, tuple(fields), tuple(attrs))


def _parse_field(ts: TokenStream, kind: str) -> FieldDef:
    ts.expect("punct", "(")
    fname = ts.expect("string").value
    ts.expect("punct", ",")
    width = ts.expect_int()
    enum_values: tuple[str, ...] = ()
    if kind == "efield":
        ts.expect("punct", ",")
        ts.expect("punct", "[")
        values = [ts.expect("string").value]
        while ts.accept("punct", ","):
            values.append(ts.expect("string").value)
        ts.expect("punct", "]")
        enum_values = tuple(values)
    access = None
    if ts.accept("punct", ","):
        mode_tok = ts.expect("ident")
        if mode_tok.value not in ("read", "write"):
            raise ParseError(
                f"expected read/write annotation, found {mode_tok.value!r}",
                mode_tok.line,
                mode_tok.column,
            )
        ts.expect("punct", "=")
        resource = ts.expect("ident").value
        access = FieldAccess(mode_tok.value, resource)
    ts.expect("punct", ")")
    return FieldDef(fname, width, kind, enum_values, access)


def _parse_expand(ts: TokenStream) -> ExpandRule:
    ts.expect("ident", "expand")
    kind_tok = ts.expect("ident")
    width: int | None = None
    if kind_tok.value == "compute":
        cap = ts.expect("ident").value
        if ts.accept("punct", "@"):
            width = ts.expect_int()
        ts.expect("ident", "on")
        node = ts.expect("ident").value
        key = (cap, node)
    elif kind_tok.value == "transfer":
        src = ts.expect("ident").value
        ts.expect("punct", "->")
        dst = ts.expect("ident").value
        key = (src, dst)
    else:
        raise ParseError(
            f"expected compute/transfer expander, found {kind_tok.value!r}",
            kind_tok.line,
            kind_tok.column,
        )
    ts.expect("punct", "{")
    emissions = []
    while not ts.at("punct", "}"):
        ts.expect("ident", "emit")
        mnem = ts.expect("ident").value
        ts.expect("punct", "{")
        assigns: list[tuple[str, object]] = []
        while not ts.at("punct", "}"):
            field_name = ts.expect("ident").value
            ts.expect("punct", "=")
            if ts.at("int"):
                spec: object = int(ts.next().value)
            elif ts.at("string"):
                spec = ts.next().value  # enum label
            else:
                var_tok = ts.expect("ident")
                if var_tok.value not in _EXPAND_VARS:
                    raise ParseError(
                        f"unknown expander variable {var_tok.value!r}",
                        var_tok.line,
                        var_tok.column,
                    )
                spec = "$" + var_tok.value
            ts.expect("punct", ";")
            assigns.append((field_name, spec))
        ts.expect("punct", "}")
        emissions.append((mnem, tuple(assigns)))
    ts.expect("punct", "}")
    return ExpandRule(kind_tok.value, key, tuple(emissions), width)


def render_acg(acg: ACG) -> str:
    """Canonical text form; parse_acg(render_acg(a)) == a."""
    head = f'acg "{acg.name}"'
    if acg.vliw_slots is not None:
        head += f" vliw_slots={acg.vliw_slots}"
    if acg.opcode_width != 8:
        head += f" opcode_width={acg.opcode_width}"
    lines = [head + " {"]
    for m in acg.memories:
        lines.append(
            f"  memory {m.name} {{ data_width={m.data_width}; banks={m.banks}; depth={m.depth}; }}"
        )
    for c in acg.computes:
        lines.append(f"  compute {c.name} {{")
        for cap in c.capabilities:
            lines.append(f'    capability "{cap.render()}";')
        lines.append("  }")
    for e in acg.edges:
        lines.append(f"  edge {e.src} -> {e.dst} {{ bandwidth={e.bandwidth}; }}")
    for d in acg.mnemonics:
        lines.append(f"  mnemonic {d.name}({d.opcode}) {{")
        items = []
        for f in d.fields:
            if f.kind == "ifield":
                body = f'ifield("{f.name}", {f.width}'
            else:
                enum = ", ".join(f'"{v}"' for v in f.enum_values)
                body = f'efield("{f.name}", {f.width}, [{enum}]'
            if f.access is not None:
                body += f", {f.access.mode}={f.access.resource}"
            items.append(body + ")")
        for key, value in d.attrs:
            items.append(f'attr("{key}", "{value}")')
        for i, item in enumerate(items):
            lines.append("    " + item + ("," if i < len(items) - 1 else ""))
        lines.append("  }")
    for rule in acg.expanders:
        if rule.kind == "compute":
            cap = rule.key[0] if rule.width is None else f"{rule.key[0]}@{rule.width}"
            lines.append(f"  expand compute {cap} on {rule.key[1]} {{")
        else:
            lines.append(f"  expand transfer {rule.key[0]} -> {rule.key[1]} {{")
        for mnem, assigns in rule.emissions:
            lines.append(f"    emit {mnem} {{")
            for field_name, spec in assigns:
                if isinstance(spec, int):
                    rhs = str(spec)
                elif spec.startswith("$"):
                    rhs = spec[1:]
                else:
                    rhs = f'"{spec}"'
                lines.append(f"      {field_name}={rhs};")
            lines.append("    }")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
