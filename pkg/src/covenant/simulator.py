"""Functional simulator driven by per-target semantic bindings.

A machine package binds every mnemonic to a short effect sequence in a
four-verb grammar (load / apply / store / move); the simulator executes a
decoded program against per-memory byte images.  Packets apply with
read-before-write semantics: every slot's loads see pre-packet state and
overlapping writes from different slots are a fault.

Arithmetic follows the shared integer contract (see dtypes): wrap-around at
the declared width for ADD/SUB/MUL/MAC, accumulation in the output width
for the matrix forms, exact RELU/MAX/MIN.  The reference oracle implements
the same contract separately; the two never share execution code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .acg import ACG, Capability, MemoryNode
from .codegen import Mnemonic, decode_program
from .dtypes import DataType
from .errors import BindingError, SimulationError
from .lexer import TokenStream


# ---------------------------------------------------------------------------
# Memory images


class MemoryImage:
    """Flat byte store for one memory node, zero-initialized."""

    def __init__(self, node: MemoryNode):
        if node.capacity_bits % 8:
            raise SimulationError(
                f"memory {node.name}: capacity {node.capacity_bits} bits is not byte-aligned"
            )
        if node.data_width % 8:
            raise SimulationError(
                f"memory {node.name}: data width {node.data_width} is not byte-aligned"
            )
        self.node = node
        self.data = bytearray(node.capacity_bits // 8)

    def copy(self) -> "MemoryImage":
        clone = MemoryImage(self.node)
        clone.data[:] = self.data
        return clone

    def _check(self, slot: int, slots_needed: int) -> None:
        if slot < 0 or slot + slots_needed > self.node.slot_count:
            raise SimulationError(
                f"out-of-bounds access on {self.node.name}: slot {slot}+{slots_needed} "
                f"exceeds {self.node.slot_count} addressable slots"
            )

    def read_value(self, slot: int, dtype: DataType) -> int:
        """Typed element starting at a slot (values pad to whole slots)."""
        stride = self.node.element_stride_slots(dtype)
        self._check(slot, stride)
        off = slot * self.node.data_width // 8
        raw = int.from_bytes(self.data[off : off + dtype.bits // 8], "little")
        return dtype.wrap(raw)

    def write_value(self, slot: int, dtype: DataType, value: int) -> None:
        stride = self.node.element_stride_slots(dtype)
        self._check(slot, stride)
        off = slot * self.node.data_width // 8
        raw = value & ((1 << dtype.bits) - 1)
        self.data[off : off + dtype.bits // 8] = raw.to_bytes(dtype.bits // 8, "little")

    def read_raw(self, slot: int, bits: int) -> bytes:
        stride = max(1, -(-bits // self.node.data_width))
        self._check(slot, stride)
        off = slot * self.node.data_width // 8
        return bytes(self.data[off : off + bits // 8])

    def write_raw(self, slot: int, payload: bytes) -> None:
        bits = len(payload) * 8
        stride = max(1, -(-bits // self.node.data_width))
        self._check(slot, stride)
        off = slot * self.node.data_width // 8
        self.data[off : off + len(payload)] = payload


def fresh_images(acg: ACG) -> dict[str, MemoryImage]:
    return {m.name: MemoryImage(m) for m in acg.memories}


# ---------------------------------------------------------------------------
# Semantic bindings


@dataclass(frozen=True)
class LoadEffect:
    node: str
    addr_field: str
    count: int | str  # literal, field name, or "cap"


@dataclass(frozen=True)
class ApplyEffect:
    capability: str
    width: int | None = None  # output element count, when the name is ambiguous


@dataclass(frozen=True)
class StoreEffect:
    node: str
    addr_field: str
    count: int | str


@dataclass(frozen=True)
class MoveEffect:
    src: str
    dst: str
    src_field: str
    dst_field: str
    count: int | str  # literal or field name
    elem_bits: int


Effect = LoadEffect | ApplyEffect | StoreEffect | MoveEffect


def parse_bindings(text: str, acg: ACG) -> dict[str, tuple[Effect, ...]]:
    """Parse a .sem file: `bind NAME { effect; ... }` per mnemonic."""
    ts = TokenStream(text)
    bindings: dict[str, tuple[Effect, ...]] = {}
    known_mnemonics = {d.name for d in acg.mnemonics}
    while not ts.at("eof"):
        ts.expect("ident", "bind")
        name_tok = ts.expect("ident")
        if name_tok.value not in known_mnemonics:
            raise BindingError(f"binding for unknown mnemonic {name_tok.value!r}")
        if name_tok.value in bindings:
            raise BindingError(f"duplicate binding for mnemonic {name_tok.value!r}")
        mnemonic_def = acg.mnemonic_def(name_tok.value)
        field_names = {f.name for f in mnemonic_def.fields}
        ts.expect("punct", "{")
        effects: list[Effect] = []
        while not ts.at("punct", "}"):
            effects.append(_parse_effect(ts, acg, field_names))
            ts.expect("punct", ";")
        ts.expect("punct", "}")
        bindings[name_tok.value] = tuple(effects)
    return bindings


def _parse_effect(ts: TokenStream, acg: ACG, field_names: set[str]) -> Effect:
    verb = ts.expect("ident")
    ts.expect("punct", "(")
    if verb.value in ("load", "store"):
        node = ts.expect("ident").value
        if not acg.has_node(node):
            raise BindingError(f"{verb.value} references unknown node {node!r}")
        ts.expect("punct", ",")
        addr_field = _expect_field(ts, field_names)
        count: int | str = "cap"
        if ts.accept("punct", ","):
            if ts.at("int"):
                count = int(ts.next().value)
            else:
                tok = ts.expect("ident")
                if tok.value != "cap" and tok.value not in field_names:
                    raise BindingError(f"count {tok.value!r} is neither a field nor 'cap'")
                count = tok.value
        ts.expect("punct", ")")
        cls = LoadEffect if verb.value == "load" else StoreEffect
        return cls(node, addr_field, count)
    if verb.value == "apply":
        cap = ts.expect("ident").value
        width = None
        if ts.accept("punct", ","):
            width = ts.expect_int()
        ts.expect("punct", ")")
        if not any(c.name == cap for node in acg.computes for c in node.capabilities):
            raise BindingError(f"apply references unknown capability {cap!r}")
        return ApplyEffect(cap, width)
    if verb.value == "move":
        src = ts.expect("ident").value
        ts.expect("punct", "->")
        dst = ts.expect("ident").value
        try:
            acg.edge(src, dst)
        except Exception:
            raise BindingError(f"move references unknown edge {src}->{dst}") from None
        ts.expect("punct", ",")
        src_field = _expect_field(ts, field_names)
        ts.expect("punct", ",")
        dst_field = _expect_field(ts, field_names)
        ts.expect("punct", ",")
        if ts.at("int"):
            count: int | str = int(ts.next().value)
        else:
            count = _expect_field(ts, field_names)
        ts.expect("punct", "*")
        elem_bits = ts.expect_int()
        if elem_bits % 8:
            raise BindingError(f"move element width {elem_bits} is not byte-aligned")
        ts.expect("punct", ")")
        return MoveEffect(src, dst, src_field, dst_field, count, elem_bits)
    raise BindingError(f"unknown effect verb {verb.value!r}")


def _expect_field(ts: TokenStream, field_names: set[str]) -> str:
    tok = ts.expect("ident")
    if tok.value not in field_names:
        raise BindingError(f"effect references unknown field {tok.value!r}")
    return tok.value


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class RunMetrics:
    mnemonic_count: int = 0
    packet_count: int = 0
    per_node_op_counts: dict[str, int] = field(default_factory=dict)
    transfer_bits: dict[str, int] = field(default_factory=dict)
    cycles: int = 0

    def as_dict(self) -> dict:
        return {
            "mnemonic_count": self.mnemonic_count,
            "packet_count": self.packet_count,
            "per_node_op_counts": dict(sorted(self.per_node_op_counts.items())),
            "transfer_bits": dict(sorted(self.transfer_bits.items())),
            "cycles": self.cycles,
        }


# ---------------------------------------------------------------------------
# Execution


def _resolve_capability(acg: ACG, resource: str, name: str, width: int | None) -> Capability:
    node = acg.compute(resource)
    matches = [c for c in node.capabilities if c.name == name]
    if width is not None:
        matches = [c for c in matches if c.output.element_count == width]
    if not matches:
        raise SimulationError(f"node {resource} has no capability {name!r}")
    if len(matches) > 1:
        raise SimulationError(
            f"capability {name!r} is ambiguous on {resource}; bind with an explicit width"
        )
    return matches[0]


def _count_of(spec: int | str, m: Mnemonic, cap_count: int | None) -> int:
    if isinstance(spec, int):
        return spec
    if spec == "cap":
        if cap_count is None:
            raise SimulationError("binding uses 'cap' count outside an apply context")
        return cap_count
    return m.value(spec)


def _execute_mnemonic(
    m: Mnemonic,
    acg: ACG,
    bindings: dict[str, tuple[Effect, ...]],
    images: dict[str, MemoryImage],
    staged: list[tuple[str, int, bytes, int]],
    metrics: RunMetrics,
) -> None:
    """Run one mnemonic's effects; writes are staged, reads see `images`."""
    effects = bindings.get(m.definition.name)
    if effects is None:
        raise SimulationError(f"unbound mnemonic {m.definition.name!r}")
    cap: Capability | None = None
    for e in effects:
        if isinstance(e, ApplyEffect):
            cap = _resolve_capability(acg, m.resource, e.capability, e.width)
            break
    operands: list[list[int]] = []
    result: list[int] | None = None
    load_ordinal = 0
    for e in effects:
        if isinstance(e, LoadEffect):
            if cap is None or load_ordinal >= len(cap.inputs):
                raise SimulationError(
                    f"{m.definition.name}: load effect without a matching capability input"
                )
            spec = cap.inputs[load_ordinal]
            count = _count_of(e.count, m, spec.element_count)
            image = images[e.node]
            stride = image.node.element_stride_slots(spec.dtype)
            base = m.value(e.addr_field)
            operands.append(
                [image.read_value(base + k * stride, spec.dtype) for k in range(count)]
            )
            load_ordinal += 1
        elif isinstance(e, ApplyEffect):
            if len(operands) != len(cap.inputs):
                raise SimulationError(
                    f"{m.definition.name}: {len(operands)} loads for "
                    f"{len(cap.inputs)}-input capability {cap.name}"
                )
            result = _apply_capability(cap, operands)
        elif isinstance(e, StoreEffect):
            if cap is None or result is None:
                raise SimulationError(f"{m.definition.name}: store before apply")
            count = _count_of(e.count, m, cap.output.element_count)
            if count != len(result):
                raise SimulationError(
                    f"{m.definition.name}: store count {count} != result size {len(result)}"
                )
            image = images[e.node]
            dtype = cap.output.dtype
            stride = image.node.element_stride_slots(dtype)
            base = m.value(e.addr_field)
            image._check(base, count * stride)
            for k, value in enumerate(result):
                raw = value & ((1 << dtype.bits) - 1)
                off = (base + k * stride) * image.node.data_width // 8
                staged.append((e.node, off, raw.to_bytes(dtype.bits // 8, "little"), id(m)))
        elif isinstance(e, MoveEffect):
            count = _count_of(e.count, m, None)
            src_img = images[e.src]
            dst_img = images[e.dst]
            src_stride = max(1, -(-e.elem_bits // src_img.node.data_width))
            dst_stride = max(1, -(-e.elem_bits // dst_img.node.data_width))
            src_base = m.value(e.src_field)
            dst_base = m.value(e.dst_field)
            for k in range(count):
                payload = src_img.read_raw(src_base + k * src_stride, e.elem_bits)
                dst_img._check(dst_base + k * dst_stride, dst_stride)
                off = (dst_base + k * dst_stride) * dst_img.node.data_width // 8
                staged.append((e.dst, off, payload, id(m)))
            key = f"{e.src}->{e.dst}"
            metrics.transfer_bits[key] = metrics.transfer_bits.get(key, 0) + count * e.elem_bits


def _apply_capability(cap: Capability, operands: list[list[int]]) -> list[int]:
    name = cap.name
    out = cap.output.dtype
    if name == "RELU":
        (a,) = operands
        return [x if x > 0 else 0 for x in a]
    if name in ("ADD", "SUB", "MUL"):
        a, b = operands
        if name == "ADD":
            return [out.wrap(x + y) for x, y in zip(a, b)]
        if name == "SUB":
            return [out.wrap(x - y) for x, y in zip(a, b)]
        return [out.wrap(x * y) for x, y in zip(a, b)]
    if name in ("MAX", "MIN"):
        a, b = operands
        pick = max if name == "MAX" else min
        return [pick(x, y) for x, y in zip(a, b)]
    if name == "MAC":
        a, b, c = operands
        return [out.wrap(x * y + z) for x, y, z in zip(a, b, c)]
    if name == "MMUL":
        a, b = operands
        m, k = cap.inputs[0].dims
        k2, n = cap.inputs[1].dims
        result = []
        for i in range(m):
            for j in range(n):
                acc = 0
                for t in range(k):
                    acc = out.wrap(acc + a[i * k + t] * b[t * n + j])
                result.append(acc)
        return result
    if name == "GEMM":
        vec, mat, acc = operands
        k = cap.inputs[0].dims[-1] if len(cap.inputs[0].dims) == 1 else cap.inputs[0].element_count
        n = cap.output.element_count
        result = []
        for j in range(n):
            total = acc[j]
            for t in range(k):
                total = out.wrap(total + vec[t] * mat[t * n + j])
            result.append(total)
        return result
    raise SimulationError(f"no execution semantics for capability {name!r}")


def run(
    binary: bytes,
    acg: ACG,
    bindings: dict[str, tuple[Effect, ...]],
    initial: dict[str, MemoryImage] | None = None,
) -> tuple[dict[str, MemoryImage], RunMetrics]:
    """Execute an encoded program; returns final images and metrics.

    Effects apply in stream order; within a packet all reads precede all
    writes and write-write collisions on overlapping bytes are a fault.
    Cycles count packets on VLIW machines, mnemonics otherwise.
    """
    packets = decode_program(binary, acg)
    images = fresh_images(acg)
    if initial is not None:
        for name, image in initial.items():
            images[name] = image.copy()
    return run_packets(packets, acg, bindings, images)


def run_packets(
    packets: list[list[Mnemonic]],
    acg: ACG,
    bindings: dict[str, tuple[Effect, ...]],
    images: dict[str, MemoryImage],
) -> tuple[dict[str, MemoryImage], RunMetrics]:
    metrics = RunMetrics()
    for packet in packets:
        staged: list[tuple[str, int, bytes, int]] = []
        for m in packet:
            _execute_mnemonic(m, acg, bindings, images, staged, metrics)
            metrics.mnemonic_count += 1
            metrics.per_node_op_counts[m.resource] = (
                metrics.per_node_op_counts.get(m.resource, 0) + 1
            )
        if len(packet) > 1:
            _check_collisions(staged)
        for node, off, payload, _ in staged:
            images[node].data[off : off + len(payload)] = payload
        metrics.packet_count += 1
    metrics.cycles = metrics.packet_count
    return images, metrics


def _check_collisions(staged: list[tuple[str, int, bytes, int]]) -> None:
    intervals: list[tuple[str, int, int, int]] = [
        (node, off, off + len(payload), owner) for node, off, payload, owner in staged
    ]
    intervals.sort(key=lambda t: (t[0], t[1]))
    for a, b in zip(intervals, intervals[1:]):
        if a[0] == b[0] and b[1] < a[2] and a[3] != b[3]:
            raise SimulationError(
                f"intra-packet write-write collision on {a[0]} bytes {b[1]}..{a[2]}"
            )
