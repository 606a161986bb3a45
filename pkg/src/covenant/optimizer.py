"""Post-scheduling optimization passes.

Codelet-level passes take (codelet, acg) and return a new codelet:
parallelize splits leftover-width loops across heterogeneous units, and
unroll_loops coalesces under-sized transfers up to the edge bandwidth.
pack_mnemonics runs after lowering and groups independent mnemonics into
VLIW packets.  The canonical pipeline order is parallelize, unroll,
lowering, packing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .acg import ACG
from .codegen import Mnemonic
from .codelet import Codelet, ComputeOp, Constant, IndexExpr, LoopOp, OperandRef, TransferOp
from .errors import ScheduleError
from .scheduler import _candidate_caps, _uniform_width


@dataclass(frozen=True)
class Packet:
    """Mnemonics issued together in one VLIW word."""

    slots: tuple[Mnemonic, ...]

    @property
    def resources(self) -> frozenset[str]:
        return frozenset(m.resource for m in self.slots)

    def __len__(self) -> int:
        return len(self.slots)


# ---------------------------------------------------------------------------
# Heterogeneous parallelization


def _single_var_expr(ref: OperandRef, loop: str) -> bool:
    return (
        len(ref.index) == 1
        and len(ref.index[0].terms) == 1
        and ref.index[0].terms[0] == (1, loop)
    )


def parallelize(codelet: Codelet, acg: ACG) -> Codelet:
    """Split loops whose extent defeats the widest unit across several units.

    Where a loop's element extent is not a multiple of the widest capability
    width, look for a set of compute nodes whose widths sum to a divisor of
    the extent (widest first); each iteration then issues one op per node at
    disjoint offsets.  Loops already running at the widest usable width are
    left alone, as are loop bodies containing transfers.
    """
    if codelet.stage not in ("mapped", "scheduled", "tiled", "optimized"):
        raise ScheduleError(f"parallelize requires a mapped codelet, got {codelet.stage!r}")

    def rewrite(ops) -> tuple:
        out = []
        for op in ops:
            if not isinstance(op, LoopOp):
                out.append(op)
                continue
            body = rewrite(op.body)
            loop = replace(op, body=body)
            if len(body) == 1 and isinstance(body[0], ComputeOp):
                split = _try_split(loop, body[0])
                if split is not None:
                    out.append(split)
                    continue
            out.append(loop)
        return tuple(out)

    def _try_split(loop: LoopOp, op: ComputeOp) -> LoopOp | None:
        if loop.lower != 0 or loop.stride != op.granularity:
            return None
        refs = (*op.operands, op.result)
        if not all(_single_var_expr(r, loop.name) for r in refs):
            return None
        extent = loop.upper
        candidates = _candidate_caps(codelet, op, acg)
        widths: dict[str, int] = {}
        for node, cap in candidates:
            w = _uniform_width(cap)
            if w is not None:
                widths[node.name] = max(widths.get(node.name, 0), w)
        if not widths:
            return None
        widest = max(widths.values())
        if extent % widest == 0:
            return None  # the mapper already used the widest unit
        combo: list[tuple[str, int]] = []
        total = 0
        for node_name, w in sorted(widths.items(), key=lambda kv: (-kv[1], kv[0])):
            combo.append((node_name, w))
            total += w
            if total <= extent and extent % total == 0 and total > op.granularity:
                break
        else:
            return None
        new_ops = []
        offset = 0
        for node_name, w in combo:
            new_ops.append(
                replace(
                    op,
                    loc=node_name,
                    granularity=w,
                    operands=tuple(
                        replace(r, index=(r.index[0].shifted(offset),)) for r in op.operands
                    ),
                    result=replace(op.result, index=(op.result.index[0].shifted(offset),)),
                )
            )
            offset += w
        return replace(loop, stride=total, body=tuple(new_ops))

    return replace(codelet, body=rewrite(codelet.body))


# ---------------------------------------------------------------------------
# Transfer-coalescing loop unrolling


def unroll_loops(codelet: Codelet, acg: ACG) -> Codelet:
    """Coalesce transfers smaller than their edge bandwidth.

    A tile loop whose transfers underfill their edges is unrolled by the
    largest factor that divides its iteration count, keeps every destination
    within capacity, and does not exceed the bandwidth headroom; the inner
    loop stretches to cover the merged tile.  Loops that do not match the
    canonical transfers-plus-inner-loop shape are left untouched.
    """
    if codelet.stage not in ("tiled", "optimized"):
        raise ScheduleError(f"unroll_loops requires a tiled codelet, got {codelet.stage!r}")

    from .codelet import footprint

    def capacity_ok(candidate: Codelet) -> bool:
        peaks = footprint(replace(candidate, stage="tiled"), acg)
        return all(peaks[m.name] <= m.capacity_bits for m in acg.memories)

    def scaled_sizes(t: TransferOp, loop: LoopOp, u: int) -> tuple[int, ...] | None:
        """Transfer extents after coalescing u iterations of the loop.

        Per dimension, the loop variable's coefficient times (u-1) strides of
        extra coverage; the result must remain a contiguous flat run.
        """
        ref = None
        for candidate in (t.source, t.dest):
            if isinstance(candidate, OperandRef) and any(
                loop.name in expr.loops for expr in candidate.index
            ):
                ref = candidate
                break
        if ref is None:
            return None
        if len(ref.index) != len(t.sizes):
            return None
        sizes = []
        for expr, size in zip(ref.index, t.sizes):
            coeff = sum(c for c, name in expr.terms if name == loop.name)
            sizes.append(size + coeff * (u - 1) * loop.stride)
        home = None
        for candidate in (t.source, t.dest):
            if isinstance(candidate, OperandRef) and codelet.surrogate(candidate.name).kind != "local":
                home = candidate
                break
        if home is not None:
            strides = codelet.surrogate(home.name).dim_strides()
            if len(strides) == len(sizes):
                span = sum((s - 1) * st for s, st in zip(sizes, strides)) + 1
                product = 1
                for s in sizes:
                    product *= s
                if span != product:
                    return None
        return tuple(sizes)

    def unrollable(loop: LoopOp) -> tuple[int, dict[int, tuple[int, ...]]] | None:
        """Bandwidth headroom (at u=2) for a canonical tile loop."""
        transfers = [o for o in loop.body if isinstance(o, TransferOp)]
        inner_loops = [o for o in loop.body if isinstance(o, LoopOp)]
        computes = [o for o in loop.body if isinstance(o, ComputeOp)]
        moving = [t for t in transfers if not isinstance(t.source, Constant)]
        if not moving or computes or len(inner_loops) != 1:
            return None
        inner = inner_loops[0]
        # The inner loop must be this loop's own tile level; stretching an
        # unrelated nested loop would change semantics.
        if not (
            inner.name.startswith(loop.name)
            and inner.name[len(loop.name):].isdigit()
            and inner.lower == 0
            and inner.upper == loop.stride
        ):
            return None
        # Deeper transfers indexed by this loop fetch one original tile per
        # outer value; widening the inner range would outrun their data.
        def deep_transfer_uses_var(op) -> bool:
            if isinstance(op, TransferOp):
                for ref in (op.source, op.dest):
                    if isinstance(ref, OperandRef) and any(
                        loop.name in expr.loops for expr in ref.index
                    ):
                        return True
                return False
            if isinstance(op, LoopOp):
                return any(deep_transfer_uses_var(o) for o in op.body)
            return False

        if any(deep_transfer_uses_var(o) for o in inner.body):
            return None
        headroom = loop.iterations
        for t in moving:
            src, dst = _transfer_nodes(codelet, t)
            try:
                edge = acg.edge(src, dst)
            except Exception:
                return None
            dtype = _transfer_dtype(codelet, t)
            size_bits = dtype.bits
            for s in t.sizes:
                size_bits *= s
            headroom = min(headroom, edge.bandwidth // size_bits if size_bits else 1)
        if headroom < 2:
            return None
        return headroom, {}

    def apply(target: Codelet, loop: LoopOp, u: int) -> Codelet | None:
        grown: dict[str, int] = {}
        failed = False

        def rewrite(ops) -> tuple:
            nonlocal failed
            out = []
            for op in ops:
                if isinstance(op, LoopOp) and op.name == loop.name:
                    new_body = []
                    for o in op.body:
                        if isinstance(o, TransferOp) and not isinstance(o.source, Constant):
                            sizes = scaled_sizes(o, loop, u)
                            if sizes is None:
                                sizes = o.sizes  # loop-invariant transfer
                            new_body.append(replace(o, sizes=sizes))
                            old = _box(o.sizes)
                            for name in _transfer_locals(o):
                                if target.surrogate(name).kind == "local":
                                    factor, rem = divmod(_box(sizes), old)
                                    if rem:
                                        failed = True
                                    grown[name] = max(grown.get(name, 1), factor)
                        elif isinstance(o, TransferOp):
                            new_body.append(o)
                        elif isinstance(o, LoopOp):
                            new_body.append(replace(o, upper=o.upper * u))
                        else:
                            new_body.append(o)
                    out.append(replace(op, stride=loop.stride * u, body=tuple(new_body)))
                elif isinstance(op, LoopOp):
                    out.append(replace(op, body=rewrite(op.body)))
                else:
                    out.append(op)
            return tuple(out)

        body = rewrite(target.body)
        if failed:
            return None

        def grow_allocs(ops) -> tuple:
            out = []
            for op in ops:
                if isinstance(op, LoopOp):
                    out.append(replace(op, body=grow_allocs(op.body)))
                elif (
                    isinstance(op, TransferOp)
                    and op.allocating
                    and isinstance(op.source, Constant)
                    and op.local in grown
                ):
                    out.append(replace(op, sizes=(_box(op.sizes) * grown[op.local],)))
                else:
                    out.append(op)
            return tuple(out)

        body = grow_allocs(body)
        surrogates = tuple(
            replace(s, shape=(s.shape[0] * grown[s.name],)) if s.name in grown else s
            for s in target.surrogates
        )
        return replace(target, body=body, surrogates=surrogates)

    result = codelet
    for loop in codelet.loops():
        info = unrollable(loop)
        if info is None:
            continue
        headroom, _ = info
        iterations = loop.iterations
        for u in range(min(headroom, iterations), 1, -1):
            if iterations % u:
                continue
            candidate = apply(result, loop, u)
            if candidate is not None and capacity_ok(candidate):
                result = candidate
                break
    return result


def _box(sizes: tuple[int, ...]) -> int:
    n = 1
    for s in sizes:
        n *= s
    return n


def _transfer_locals(t: TransferOp):
    names = []
    if t.local is not None:
        names.append(t.local)
    if isinstance(t.source, OperandRef):
        names.append(t.source.name)
    if isinstance(t.dest, OperandRef):
        names.append(t.dest.name)
    return names


def _transfer_nodes(codelet: Codelet, t: TransferOp) -> tuple[str, str]:
    if isinstance(t.source, Constant):
        raise ScheduleError("constant-source transfers move no data")
    src = codelet.surrogate(t.source.name).loc
    if isinstance(t.dest, str):
        dst = t.dest
    else:
        dst = codelet.surrogate(t.dest.name).loc
    return src, dst


def _transfer_dtype(codelet: Codelet, t: TransferOp):
    if isinstance(t.source, Constant):
        return t.source.dtype
    return codelet.surrogate(t.source.name).dtype


def apply_optimizations(codelet: Codelet, acg: ACG, opts: set[str]) -> Codelet:
    """Run the requested codelet passes in the canonical order."""
    unknown = opts - {"parallelize", "unroll", "pack"}
    if unknown:
        raise ScheduleError(f"unknown optimization(s): {sorted(unknown)}")
    result = codelet
    if "parallelize" in opts:
        result = parallelize(result, acg)
    if "unroll" in opts:
        result = unroll_loops(result, acg)
    if result is not codelet:
        result = replace(result, stage="optimized")
    return result


# ---------------------------------------------------------------------------
# VLIW mnemonic packing


def mnemonics_conflict(a: Mnemonic, b: Mnemonic) -> bool:
    """True when reordering a and b could change observable state."""
    for wa in a.writes:
        for xb in (*b.reads, *b.writes):
            if wa.overlaps(xb):
                return True
    for ra in a.reads:
        for wb in b.writes:
            if ra.overlaps(wb):
                return True
    return False


def pack_mnemonics(stream: list[Mnemonic], acg: ACG) -> list[Packet]:
    """Greedy forward packing into VLIW packets.

    Opens a packet with the next unpacked mnemonic, then hoists later
    mnemonics that are independent of every intervening unpacked mnemonic
    and current member, consume a resource not yet in the packet, and fit
    the slot budget.  Flattening the packets in order is a legal reordering
    of the input stream.
    """
    if acg.vliw_slots is None:
        raise ScheduleError(f"ACG {acg.name!r} declares no VLIW slots; packing is undefined")
    slots = acg.vliw_slots
    for m in stream:
        if not m.resource:
            raise ScheduleError(f"unannotated mnemonic {m.render()!r}: no resource")
        if not m.reads and not m.writes:
            raise ScheduleError(
                f"unannotated mnemonic {m.render()!r}: no read/write access metadata"
            )

    packets: list[Packet] = []
    remaining = list(range(len(stream)))
    while remaining:
        first = remaining.pop(0)
        member_idx = [first]
        resources = {stream[first].resource}
        intervening: list[int] = []
        taken: set[int] = set()
        for j in remaining:
            if len(member_idx) >= slots:
                break
            m = stream[j]
            if m.resource in resources:
                intervening.append(j)
                continue
            if any(mnemonics_conflict(stream[i], m) for i in intervening) or any(
                mnemonics_conflict(stream[i], m) for i in member_idx
            ):
                intervening.append(j)
                continue
            member_idx.append(j)
            resources.add(m.resource)
            taken.add(j)
        remaining = [j for j in remaining if j not in taken]
        packets.append(Packet(tuple(stream[i] for i in member_idx)))
    return packets
