"""Mnemonic definitions, macro-mnemonic lowering, and bit-exact encoding.

Lowering walks a tiled codelet with every loop fully unrolled (no target in
the fixture set defines a hardware loop construct), resolving addresses
through a per-memory bump allocator and expanding each operation through the
macro-mnemonic registry shipped inside the machine package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .acg import ACG, Capability, MemoryNode
from .codelet import Codelet, ComputeOp, Constant, LoopOp, OperandRef, TransferOp
from .dtypes import DataType
from .errors import EncodeError, LoweringError

CONTAINER_MAGIC = b"CVNT"
CONTAINER_VERSION = 1


# ---------------------------------------------------------------------------
# Mnemonic model


@dataclass(frozen=True)
class FieldAccess:
    """Read/write annotation tying an address field to the node it indexes."""

    mode: str  # 'read' | 'write'
    resource: str


@dataclass(frozen=True)
class FieldDef:
    name: str
    width: int
    kind: str  # 'ifield' | 'efield'
    enum_values: tuple[str, ...] = ()
    access: FieldAccess | None = None

    def encode_value(self, value: int | str) -> int:
        if self.kind == "efield":
            if isinstance(value, str):
                if value not in self.enum_values:
                    raise EncodeError(f"field {self.name}: {value!r} not in enum {self.enum_values}")
                return self.enum_values.index(value)
            if not 0 <= value < len(self.enum_values):
                raise EncodeError(f"field {self.name}: enum index {value} out of range")
            return value
        if not isinstance(value, int) or value < 0 or value >= 1 << self.width:
            raise EncodeError(f"field {self.name}: value {value!r} does not fit {self.width} bits")
        return value


@dataclass(frozen=True)
class MnemonicDef:
    name: str
    opcode: int
    fields: tuple[FieldDef, ...]
    attrs: tuple[tuple[str, str], ...] = ()

    def attr(self, key: str) -> str | None:
        for k, v in self.attrs:
            if k == key:
                return v
        return None

    def field(self, name: str) -> FieldDef:
        for f in self.fields:
            if f.name == name:
                return f
        raise EncodeError(f"mnemonic {self.name} has no field {name!r}")

    def field_index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise EncodeError(f"mnemonic {self.name} has no field {name!r}")

    def bit_length(self, opcode_width: int) -> int:
        return opcode_width + sum(f.width for f in self.fields)


@dataclass(frozen=True)
class Access:
    """One resolved memory access interval, in slot units."""

    node: str
    start: int
    length: int

    def overlaps(self, other: "Access") -> bool:
        return (
            self.node == other.node
            and self.start < other.start + other.length
            and other.start < self.start + self.length
        )


@dataclass(frozen=True)
class Mnemonic:
    """A concrete machine-code unit: definition plus raw field values.

    reads/writes carry slot-exact access intervals used by the packer's
    dependence analysis; they are populated during lowering and are not
    recoverable from a decoded binary.
    """

    definition: MnemonicDef
    values: tuple[int, ...]
    resource: str
    reads: tuple[Access, ...] = ()
    writes: tuple[Access, ...] = ()

    def value(self, field_name: str) -> int:
        return self.values[self.definition.field_index(field_name)]

    def enum_value(self, field_name: str) -> str:
        f = self.definition.field(field_name)
        return f.enum_values[self.value(field_name)]

    def render(self) -> str:
        parts = []
        for f, v in zip(self.definition.fields, self.values):
            parts.append(f.enum_values[v] if f.kind == "efield" else f"#{v}")
        return self.definition.name + (" " + ",".join(parts) if parts else "")


def resolve_resource(definition: MnemonicDef, values: tuple[int, ...], acg: ACG) -> str:
    """Node consumed by a mnemonic, from its target/target_field attribute."""
    fixed = definition.attr("target")
    if fixed is not None:
        return fixed
    via = definition.attr("target_field")
    if via is not None:
        f = definition.field(via)
        return f.enum_values[values[definition.field_index(via)]]
    raise EncodeError(f"mnemonic {definition.name} declares no target resource")


@dataclass(frozen=True)
class ExpandRule:
    """Declarative macro-mnemonic template from a machine package.

    kind 'compute' matches (capability name, compute node), optionally
    pinned to one granularity ("ADD@4"); kind 'transfer' matches a directed
    memory edge.  Each emission assigns every field of one mnemonic from a
    constant, an enum label, or a context variable.
    """

    kind: str
    key: tuple[str, str]
    emissions: tuple[tuple[str, tuple[tuple[str, object], ...]], ...]
    width: int | None = None


def build_registry(acg: ACG) -> dict[tuple, ExpandRule]:
    registry: dict[tuple, ExpandRule] = {}
    for rule in acg.expanders:
        full = (rule.kind, *rule.key, rule.width)
        if full in registry:
            raise LoweringError(f"duplicate expander for {full}")
        registry[full] = rule
    return registry


# ---------------------------------------------------------------------------
# Lowering


@dataclass(frozen=True)
class Placement:
    """Where one surrogate lives: node, base slot, and element geometry."""

    node: str
    slot: int
    elements: int
    dtype: DataType
    shape: tuple[int, ...]
    kind: str


@dataclass
class LoweredProgram:
    acg_name: str
    mnemonics: list[Mnemonic]
    layout: dict[str, Placement]


def _flat_offset(codelet: Codelet, ref: OperandRef, env: dict[str, int]) -> int:
    surrogate = codelet.surrogate(ref.name)
    if not ref.index:
        return 0
    strides = surrogate.dim_strides()
    if len(ref.index) != len(strides):
        if len(ref.index) == 1:  # locals are flat
            return ref.index[0].evaluate(env)
        raise LoweringError(f"{ref.render()}: index arity mismatch")
    return sum(expr.evaluate(env) * stride for expr, stride in zip(ref.index, strides))


def _plan_allocations(codelet: Codelet, acg: ACG) -> dict[str, int]:
    """Assign every located surrogate a base slot on its memory node.

    Allocation is planned up front from surrogate lifetimes: inputs and
    outputs are resident for the whole program; a local lives over the span
    of top-level phases that reference it, so sequential phases reuse
    storage.  Within a memory node, surrogates place greedily (inputs and
    outputs in declaration order, then locals by birth phase and decreasing
    size) at the lowest base free of temporal conflicts.  Deterministic.
    """
    spans: dict[str, tuple[int, int]] = {}
    for s in codelet.surrogates:
        if s.kind in ("inp", "out"):
            spans[s.name] = (-1, len(codelet.body))
    for phase, locals_ in _local_phase_refs(codelet).items():
        for name in locals_:
            lo, hi = spans.get(name, (phase, phase))
            spans[name] = (min(lo, phase), max(hi, phase))

    def slots_of(s) -> int:
        node = acg.memory(s.loc)
        n = s.element_count * node.element_stride_slots(s.dtype)
        return n + (-n) % node.banks  # whole addressable elements

    order = []
    for s in codelet.surrogates:
        if s.kind == "param" or s.loc is None:
            continue
        if not acg.is_memory(s.loc):
            raise LoweringError(f"surrogate {s.name!r} placed on non-memory node {s.loc!r}")
        order.append(s)
    locals_part = [s for s in order if s.kind == "local"]
    locals_part.sort(key=lambda s: (spans[s.name][0], -slots_of(s), s.name))
    ordered = [s for s in order if s.kind != "local"] + locals_part

    placed: dict[str, list[tuple[int, int, int, int]]] = {}  # node -> (base, end, lo, hi)
    bases: dict[str, int] = {}
    for s in ordered:
        if s.name in bases:
            continue
        size = slots_of(s)
        lo, hi = spans.get(s.name, (-1, len(codelet.body)))
        conflicts = sorted(
            (b, e)
            for b, e, plo, phi in placed.get(s.loc, [])
            if not (hi < plo or phi < lo)
        )
        base = 0
        for b, e in conflicts:
            if base + size <= b:
                break
            base = max(base, e)
        node = acg.memory(s.loc)
        if base + size > node.slot_count:
            raise LoweringError(
                f"internal inconsistency: allocation of {s.element_count} elements overflows "
                f"{s.loc} (capacity {node.slot_count} slots)"
            )
        placed.setdefault(s.loc, []).append((base, base + size, lo, hi))
        bases[s.name] = base
    return bases


def _local_phase_refs(codelet: Codelet) -> dict[int, list[str]]:
    """Top-level body position -> locals referenced inside it."""

    def collect(op, acc: set[str]) -> None:
        if isinstance(op, LoopOp):
            for o in op.body:
                collect(o, acc)
        elif isinstance(op, TransferOp):
            if op.local:
                acc.add(op.local)
            for r in (op.source, op.dest):
                if isinstance(r, OperandRef):
                    acc.add(r.name)
        else:
            for r in (*op.operands, op.result):
                acc.add(r.name)

    locals_ = {s.name for s in codelet.surrogates if s.kind == "local"}
    out: dict[int, list[str]] = {}
    for phase, op in enumerate(codelet.body):
        acc: set[str] = set()
        collect(op, acc)
        out[phase] = sorted(acc & locals_)
    return out


def lower(
    codelet: Codelet,
    acg: ACG,
    registry: dict[tuple, ExpandRule] | None = None,
) -> LoweredProgram:
    """Expand a tiled codelet into a flat mnemonic stream.

    Deterministic: identical inputs produce byte-identical streams.  Loops
    are fully unrolled; addresses come from a per-memory bump allocator in
    addressable-element units, allocated in surrogate creation order.
    """
    if codelet.stage not in ("scheduled", "tiled", "optimized"):
        raise LoweringError(f"cannot lower codelet at stage {codelet.stage!r}")
    if registry is None:
        registry = build_registry(acg)

    bases = _plan_allocations(codelet, acg)
    layout: dict[str, Placement] = {}
    stream: list[Mnemonic] = []

    def place(name: str) -> Placement:
        if name in layout:
            return layout[name]
        s = codelet.surrogate(name)
        if s.loc is None or s.dtype is None:
            raise LoweringError(f"surrogate {name!r} has no location or dtype")
        shape = tuple(int(d) for d in s.shape)
        layout[name] = Placement(s.loc, bases[name], s.element_count, s.dtype, shape, s.kind)
        return layout[name]

    for s in codelet.surrogates:
        if s.kind in ("inp", "out"):
            place(s.name)

    def slot_of(ref: OperandRef, env: dict[str, int]) -> tuple[str, int, int]:
        """(node, slot address, per-element slot stride) for a reference."""
        p = place(ref.name)
        node = acg.memory(p.node)
        stride = node.element_stride_slots(p.dtype)
        return p.node, p.slot + _flat_offset(codelet, ref, env) * stride, stride

    def emit(rule: ExpandRule, variables: dict[str, int | str],
             reads: tuple[Access, ...], writes: tuple[Access, ...]) -> None:
        for mnem_name, assigns in rule.emissions:
            definition = acg.mnemonic_def(mnem_name)
            by_field = dict(assigns)
            values = []
            for f in definition.fields:
                if f.name not in by_field:
                    raise LoweringError(
                        f"expander for {rule.key} leaves field {f.name} of {mnem_name} unset"
                    )
                spec = by_field[f.name]
                if isinstance(spec, str) and spec.startswith("$"):
                    var = spec[1:]
                    if var not in variables:
                        raise LoweringError(f"unknown expander variable ${var}")
                    raw = variables[var]
                else:
                    raw = spec
                values.append(f.encode_value(raw))
            resource = resolve_resource(definition, tuple(values), acg)
            stream.append(
                Mnemonic(definition, tuple(values), resource, reads=reads, writes=writes)
            )

    def emit_transfer(op: TransferOp, env: dict[str, int]) -> None:
        if isinstance(op.source, Constant):
            place(op.local)  # reserve storage; zeroed images make the fill implicit
            return
        src_node, src_slot, src_stride = slot_of(op.source, env)
        if op.allocating:
            p = place(op.local)
            dst_node, dst_slot = p.node, p.slot
            dst_stride = acg.memory(dst_node).element_stride_slots(p.dtype)
        else:
            dst_node, dst_slot, dst_stride = slot_of(op.dest, env)
        rule = registry.get(("transfer", src_node, dst_node, None))
        if rule is None:
            raise LoweringError(f"no expander for transfer {src_node}->{dst_node}")
        edge = acg.edge(src_node, dst_node)
        dtype = _transfer_dtype(codelet, op)
        if edge.bandwidth < dtype.bits or edge.bandwidth % dtype.bits:
            raise LoweringError(
                f"edge {edge.render()} bandwidth {edge.bandwidth} is not a multiple of "
                f"element width {dtype.bits}"
            )
        per_op = edge.bandwidth // dtype.bits
        total = 1
        for s in op.sizes:
            total *= s
        offset = 0
        while offset < total:
            count = min(per_op, total - offset)
            s_slot = src_slot + offset * src_stride
            d_slot = dst_slot + offset * dst_stride
            emit(
                rule,
                {"src": s_slot, "dst": d_slot, "n": count},
                reads=(Access(src_node, s_slot, count * src_stride),),
                writes=(Access(dst_node, d_slot, count * dst_stride),),
            )
            offset += count

    def emit_compute(op: ComputeOp, env: dict[str, int]) -> None:
        if op.loc is None:
            raise LoweringError(f"compute op {op.render()} has no location")
        rule = registry.get(("compute", op.capability, op.loc, op.granularity))
        if rule is None:
            rule = registry.get(("compute", op.capability, op.loc, None))
        if rule is None:
            raise LoweringError(f"no expander for compute {op.capability} on {op.loc}")
        cap = _find_capability(acg, op, codelet)
        variables: dict[str, int | str] = {"n": op.granularity}
        reads: list[Access] = []
        for i, ref in enumerate(op.operands):
            node, slot, stride = slot_of(ref, env)
            variables[f"in{i}"] = slot
            reads.append(Access(node, slot, cap.inputs[i].element_count * stride))
        node, slot, stride = slot_of(op.result, env)
        variables["out"] = slot
        writes = (Access(node, slot, cap.output.element_count * stride),)
        emit(rule, variables, tuple(reads), writes)

    def run(ops, env: dict[str, int]) -> None:
        for op in ops:
            if isinstance(op, LoopOp):
                for value in op.values():
                    run(op.body, env | {op.name: value})
            elif isinstance(op, TransferOp):
                emit_transfer(op, env)
            else:
                emit_compute(op, env)

    run(codelet.body, {})
    return LoweredProgram(acg.name, stream, layout)


def _transfer_dtype(codelet: Codelet, op: TransferOp) -> DataType:
    if isinstance(op.source, Constant):
        return op.source.dtype
    dtype = codelet.surrogate(op.source.name).dtype
    if dtype is None:
        raise LoweringError(f"transfer source {op.source.render()} has no dtype")
    return dtype


def _find_capability(acg: ACG, op: ComputeOp, codelet: Codelet) -> Capability:
    node = acg.compute(op.loc)
    for cap in node.capabilities:
        if cap.name != op.capability or len(cap.inputs) != len(op.operands):
            continue
        if cap.output.element_count != op.granularity:
            continue
        if all(
            spec.dtype == codelet.surrogate(ref.name).dtype
            and spec.element_count == op.granularity
            for spec, ref in zip(cap.inputs, op.operands)
        ):
            return cap
    raise LoweringError(
        f"node {op.loc} has no {op.capability} capability at granularity {op.granularity}"
    )


# ---------------------------------------------------------------------------
# Encoding


def encode(m: Mnemonic, acg: ACG) -> bytes:
    """MSB-first opcode+fields, zero-padded to a byte boundary."""
    definition = m.definition
    if definition.opcode < 0 or definition.opcode >= 1 << acg.opcode_width:
        raise EncodeError(f"opcode {definition.opcode} does not fit {acg.opcode_width} bits")
    bits = acg.opcode_width
    word = definition.opcode
    for f, v in zip(definition.fields, m.values):
        f.encode_value(v)  # range check
        word = (word << f.width) | v
        bits += f.width
    pad = (-bits) % 8
    word <<= pad
    return word.to_bytes((bits + pad) // 8, "big")


def decode(data: bytes, acg: ACG, offset: int = 0) -> tuple[Mnemonic, int]:
    """Decode one mnemonic starting at byte offset; returns (mnemonic, next offset)."""
    if offset >= len(data):
        raise EncodeError("truncated input: no opcode byte")
    word = int.from_bytes(data[offset:], "big")
    avail_bits = (len(data) - offset) * 8
    if avail_bits < acg.opcode_width:
        raise EncodeError("truncated input: incomplete opcode")
    opcode = word >> (avail_bits - acg.opcode_width)
    definition = None
    for d in acg.mnemonics:
        if d.opcode == opcode:
            definition = d
            break
    if definition is None:
        raise EncodeError(f"unknown opcode {opcode}")
    need = definition.bit_length(acg.opcode_width)
    nbytes = (need + 7) // 8
    if offset + nbytes > len(data):
        raise EncodeError(f"truncated input: {definition.name} needs {nbytes} bytes")
    word = int.from_bytes(data[offset : offset + nbytes], "big")
    cursor = nbytes * 8 - acg.opcode_width
    values = []
    for f in definition.fields:
        cursor -= f.width
        values.append((word >> cursor) & ((1 << f.width) - 1))
    for f, v in zip(definition.fields, values):
        if f.kind == "efield" and v >= len(f.enum_values):
            raise EncodeError(f"field {f.name}: enum index {v} out of range")
    m = Mnemonic(definition, tuple(values), resolve_resource(definition, tuple(values), acg))
    return m, offset + nbytes


# ---------------------------------------------------------------------------
# Program container


def encode_program(packets: list, acg: ACG) -> bytes:
    """Serialize packets (or bare mnemonics) into the CVNT container."""
    from .optimizer import Packet  # local import to avoid a cycle

    norm: list[list[Mnemonic]] = []
    for item in packets:
        if isinstance(item, Packet):
            norm.append(list(item.slots))
        else:
            norm.append([item])
    count = sum(len(p) for p in norm)
    name_bytes = acg.name.encode("utf-8")
    if len(name_bytes) > 255:
        raise EncodeError("ACG name too long for container header")
    out = bytearray()
    out += CONTAINER_MAGIC
    out.append(CONTAINER_VERSION)
    out.append(len(name_bytes))
    out += name_bytes
    out.append(acg.opcode_width)
    out.append(acg.slot_limit)
    out += struct.pack("<I", count)
    for packet in norm:
        if acg.slot_limit > 1:
            if len(packet) > 255:
                raise EncodeError("packet too large for container")
            out.append(len(packet))
        for m in packet:
            out += encode(m, acg)
    return bytes(out)


def decode_program(data: bytes, acg: ACG) -> list[list[Mnemonic]]:
    """Parse a CVNT container back into packets of mnemonics."""
    if data[:4] != CONTAINER_MAGIC:
        raise EncodeError("bad container magic")
    if data[4] != CONTAINER_VERSION:
        raise EncodeError(f"unsupported container version {data[4]}")
    name_len = data[5]
    name = data[6 : 6 + name_len].decode("utf-8")
    if name != acg.name:
        raise EncodeError(f"container built for ACG {name!r}, not {acg.name!r}")
    pos = 6 + name_len
    opcode_width, vliw_slots = data[pos], data[pos + 1]
    if opcode_width != acg.opcode_width:
        raise EncodeError("container opcode width does not match ACG")
    pos += 2
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    packets: list[list[Mnemonic]] = []
    decoded = 0
    while decoded < count:
        if vliw_slots > 1:
            if pos >= len(data):
                raise EncodeError("truncated input: missing packet header")
            size = data[pos]
            pos += 1
        else:
            size = 1
        packet = []
        for _ in range(size):
            m, pos = decode(data, acg, pos)
            packet.append(m)
        packets.append(packet)
        decoded += size
    return packets


def render_listing(packets: list) -> str:
    """Human-readable program listing, one packet per line."""
    from .optimizer import Packet

    lines = []
    for item in packets:
        if isinstance(item, Packet):
            slots = list(item.slots)
        elif isinstance(item, list):
            slots = item
        else:
            slots = [item]
        if len(slots) == 1:
            lines.append(slots[0].render())
        else:
            lines.append("{ " + "; ".join(m.render() for m in slots) + " }")
    return "\n".join(lines) + "\n"
