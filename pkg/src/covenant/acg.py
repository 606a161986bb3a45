"""Architecture covenant graphs: the machine-description half of the toolkit.

An ACG is a directed graph of software-managed memory nodes and programmable
compute nodes, joined by bandwidth-annotated edges, plus the target's
mnemonic definitions and macro-mnemonic expansion rules.  Everything here is
immutable after parsing; queries are pure.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .dtypes import DataType
from .errors import MachineError

if TYPE_CHECKING:
    from .codegen import ExpandRule, MnemonicDef


@dataclass(frozen=True)
class OperandSpec:
    """Datatype plus per-dimension element counts for one capability operand."""

    dtype: DataType
    dims: tuple[int, ...]

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def render(self) -> str:
        return "(" + ",".join([self.dtype.render()] + [str(d) for d in self.dims]) + ")"


@dataclass(frozen=True)
class Capability:
    """A coarse-grained operation a compute node supports."""

    name: str
    inputs: tuple[OperandSpec, ...]
    output: OperandSpec

    @property
    def throughput(self) -> int:
        """Output elements produced per invocation."""
        return self.output.element_count

    def render(self) -> str:
        args = ",".join(spec.render() for spec in self.inputs)
        return f"{self.output.render()}={self.name}({args})"


@dataclass(frozen=True)
class MemoryNode:
    name: str
    data_width: int  # smallest unit of accessible data, in bits
    banks: int
    depth: int

    @property
    def addressable_element_bits(self) -> int:
        return self.data_width * self.banks

    @property
    def capacity_bits(self) -> int:
        return self.depth * self.data_width * self.banks

    @property
    def slot_count(self) -> int:
        """Total data_width-sized slots (one bank lane each)."""
        return self.depth * self.banks

    def element_stride_slots(self, dtype: DataType) -> int:
        """Slots one element occupies.

        Values narrower than data_width take a whole slot rather than being
        packed together; wider values span consecutive slots.
        """
        if dtype.bits <= self.data_width:
            return 1
        return -(-dtype.bits // self.data_width)

    def element_stride_bits(self, dtype: DataType) -> int:
        return self.element_stride_slots(dtype) * self.data_width


@dataclass(frozen=True)
class ComputeNode:
    name: str
    capabilities: tuple[Capability, ...]


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    bandwidth: int  # bits transmitted in a single transfer operation

    def render(self) -> str:
        return f"{self.src}->{self.dst}"


@dataclass(frozen=True)
class ACG:
    name: str
    memories: tuple[MemoryNode, ...]
    computes: tuple[ComputeNode, ...]
    edges: tuple[Edge, ...]
    mnemonics: tuple["MnemonicDef", ...] = ()
    expanders: tuple["ExpandRule", ...] = ()
    vliw_slots: int | None = None
    opcode_width: int = 8

    def memory(self, name: str) -> MemoryNode:
        for m in self.memories:
            if m.name == name:
                return m
        raise MachineError(f"no memory node named {name!r} in ACG {self.name!r}")

    def compute(self, name: str) -> ComputeNode:
        for c in self.computes:
            if c.name == name:
                return c
        raise MachineError(f"no compute node named {name!r} in ACG {self.name!r}")

    def has_node(self, name: str) -> bool:
        return any(m.name == name for m in self.memories) or any(
            c.name == name for c in self.computes
        )

    def is_memory(self, name: str) -> bool:
        return any(m.name == name for m in self.memories)

    def edge(self, src: str, dst: str) -> Edge:
        for e in self.edges:
            if e.src == src and e.dst == dst:
                return e
        raise MachineError(f"no edge {src}->{dst} in ACG {self.name!r}")

    def mnemonic_def(self, name: str) -> "MnemonicDef":
        for d in self.mnemonics:
            if d.name == name:
                return d
        raise MachineError(f"no mnemonic named {name!r} in ACG {self.name!r}")

    @property
    def slot_limit(self) -> int:
        return self.vliw_slots if self.vliw_slots is not None else 1


def addressable_element_bits(node: MemoryNode) -> int:
    """Bits in one addressable element: data_width times banks."""
    return node.addressable_element_bits


def capacity_bits(node: MemoryNode) -> int:
    """Total storage bits: depth times the addressable element size."""
    return node.capacity_bits


def _out_edges(acg: ACG) -> dict[str, list[Edge]]:
    adj: dict[str, list[Edge]] = {}
    for e in acg.edges:
        adj.setdefault(e.src, []).append(e)
    for edges in adj.values():
        edges.sort(key=lambda e: e.dst)
    return adj


def shortest_path(
    acg: ACG, src: str, dst: str, *, memory_intermediates_only: bool = False
) -> list[Edge]:
    """Minimum-hop directed path from src to dst as an edge list.

    Ties between equal-length paths are broken by the lexicographic order of
    intermediate node names so compiled output is reproducible.  With
    memory_intermediates_only, paths may pass through memory nodes but not
    through compute nodes (used when routing data transfers).
    """
    for name in (src, dst):
        if not acg.has_node(name):
            raise MachineError(f"unknown node {name!r} in ACG {acg.name!r}")
    if src == dst:
        return []
    adj = _out_edges(acg)
    # Dijkstra keyed on (hop count, intermediate-name sequence): the name
    # tuple comparison realizes the lexicographic tie-break.
    best: dict[str, tuple[int, tuple[str, ...]]] = {src: (0, ())}
    heap: list[tuple[int, tuple[str, ...], str, tuple[Edge, ...]]] = [(0, (), src, ())]
    while heap:
        dist, names, node, path = heapq.heappop(heap)
        if node == dst:
            return list(path)
        if best.get(node, (dist + 1, ()))[0:2] != (dist, names):
            continue
        if memory_intermediates_only and node != src and not acg.is_memory(node):
            continue
        for e in adj.get(node, []):
            key = (dist + 1, names + (e.dst,))
            if e.dst not in best or key < best[e.dst]:
                best[e.dst] = key
                heapq.heappush(heap, (dist + 1, names + (e.dst,), e.dst, path + (e,)))
    raise MachineError(f"no path from {src} to {dst} in ACG {acg.name!r}")


def _hop_distances(acg: ACG, src: str) -> dict[str, int]:
    """Min-hop distances from src along data-staging paths.

    Data cannot route through a functional unit, so only memory nodes
    extend the frontier; compute nodes are reachable endpoints only.
    """
    adj = _out_edges(acg)
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt: list[str] = []
        for node in frontier:
            if node != src and not acg.is_memory(node):
                continue
            for e in adj.get(node, []):
                if e.dst not in dist:
                    dist[e.dst] = dist[node] + 1
                    nxt.append(e.dst)
        frontier = nxt
    return dist


def highest_level_memory(acg: ACG) -> str:
    """Memory node farthest from the functional units.

    Farthest means maximizing the sum over compute nodes of the minimum-hop
    distance; the memory must reach every compute node.  Ties break
    lexicographically.
    """
    candidates: list[tuple[int, str]] = []
    for mem in acg.memories:
        dist = _hop_distances(acg, mem.name)
        if all(c.name in dist for c in acg.computes):
            candidates.append((sum(dist[c.name] for c in acg.computes), mem.name))
    if not candidates:
        raise MachineError(f"no memory node reaches every compute node in ACG {acg.name!r}")
    candidates.sort(key=lambda t: (-t[0], t[1]))
    return candidates[0][1]


def supporting_nodes(
    acg: ACG, op_name: str, dtype: DataType
) -> list[tuple[ComputeNode, Capability]]:
    """All (node, capability) pairs for op_name whose inputs are all dtype.

    Sorted by descending throughput, then node name; stable across runs.
    """
    found: list[tuple[ComputeNode, Capability]] = []
    for node in acg.computes:
        for cap in node.capabilities:
            if cap.name == op_name and all(spec.dtype == dtype for spec in cap.inputs):
                found.append((node, cap))
    found.sort(key=lambda pair: (-pair[1].throughput, pair[0].name))
    return found


def matching_capabilities(
    acg: ACG, op_name: str, input_dtypes: tuple[DataType, ...]
) -> list[tuple[ComputeNode, Capability]]:
    """Like supporting_nodes but matching the exact per-input dtype tuple.

    Needed for mixed-precision capabilities (e.g. 8-bit multiplicands with a
    32-bit accumulator) where no single dtype describes all inputs.
    """
    found: list[tuple[ComputeNode, Capability]] = []
    for node in acg.computes:
        for cap in node.capabilities:
            if cap.name != op_name or len(cap.inputs) != len(input_dtypes):
                continue
            if all(spec.dtype == dt for spec, dt in zip(cap.inputs, input_dtypes)):
                found.append((node, cap))
    found.sort(key=lambda pair: (-pair[1].throughput, pair[0].name))
    return found


def validate_acg(acg: ACG) -> list[str]:
    """Check every structural invariant; return one message per violation."""
    problems: list[str] = []
    names: dict[str, str] = {}
    for m in acg.memories:
        if m.name in names:
            problems.append(f"duplicate node name {m.name}")
        names[m.name] = "memory"
        for attr in ("data_width", "banks", "depth"):
            if getattr(m, attr) < 1:
                problems.append(f"memory {m.name}: {attr} must be positive")
    for c in acg.computes:
        if c.name in names:
            problems.append(f"duplicate node name {c.name}")
        names[c.name] = "compute"
        seen_caps: set[tuple] = set()
        for cap in c.capabilities:
            key = (cap.name, tuple((s.dtype, s.dims) for s in cap.inputs))
            if key in seen_caps:
                problems.append(f"compute {c.name}: duplicate capability {cap.render()}")
            seen_caps.add(key)
            if cap.throughput < 1:
                problems.append(f"compute {c.name}: capability {cap.name} has zero throughput")
    seen_edges: set[tuple[str, str]] = set()
    for e in acg.edges:
        if e.src not in names:
            problems.append(f"edge {e.render()}: unknown node {e.src}")
            continue
        if e.dst not in names:
            problems.append(f"edge {e.render()}: unknown node {e.dst}")
            continue
        if e.src == e.dst:
            problems.append(f"edge {e.render()}: endpoints must differ")
        if names[e.src] != "memory" and names[e.dst] != "memory":
            problems.append(f"edge {e.render()}: edge must touch a memory node")
        if e.bandwidth < 1:
            problems.append(f"edge {e.render()}: bandwidth must be positive")
        if (e.src, e.dst) in seen_edges:
            problems.append(f"duplicate edge {e.render()}")
        seen_edges.add((e.src, e.dst))
    reachable: set[str] = set()
    for m in acg.memories:
        reachable.update(_hop_distances(acg, m.name))
    for c in acg.computes:
        if c.name not in reachable:
            problems.append(f"unreachable compute node {c.name}")
    seen_mnems: set[str] = set()
    seen_opcodes: set[int] = set()
    for d in acg.mnemonics:
        if d.name in seen_mnems:
            problems.append(f"duplicate mnemonic name {d.name}")
        seen_mnems.add(d.name)
        if d.opcode in seen_opcodes:
            problems.append(f"duplicate mnemonic opcode {d.opcode} ({d.name})")
        seen_opcodes.add(d.opcode)
        if d.opcode < 0 or d.opcode >= 1 << acg.opcode_width:
            problems.append(f"mnemonic {d.name}: opcode {d.opcode} does not fit opcode width")
        for f in d.fields:
            if f.kind == "efield" and len(f.enum_values) > 1 << f.width:
                problems.append(
                    f"mnemonic {d.name}: field {f.name} has {len(f.enum_values)} values "
                    f"but only {f.width} bits"
                )
            if f.access is not None and not acg.has_node(f.access.resource):
                problems.append(
                    f"mnemonic {d.name}: field {f.name} annotates unknown node {f.access.resource}"
                )
    if acg.vliw_slots is not None and acg.vliw_slots < 1:
        problems.append("vliw_slots must be positive when present")
    return problems
