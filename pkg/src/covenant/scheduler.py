"""Scheduling passes: compute mapping, transfer insertion, tiling.

The pipeline specializes an instantiated codelet against a machine graph:

    map_compute        pick compute nodes (vectorizing where granularity allows)
    insert_transfers   stage operands through the memory hierarchy
    valid_tilings      enumerate loop factorizations that fit and align
    select_tiling      pick the cheapest valid factorization
    split_loops        materialize tile loops and tile-sized transfers

Transfer insertion and loop splitting are two parameterizations of one
materialization routine, so a scheduled codelet can always be stripped back
to its mapped form and re-tiled.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

from .acg import ACG, Capability, highest_level_memory, matching_capabilities, shortest_path
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
from .dtypes import DataType
from .errors import MachineError, ScheduleError


@dataclass(frozen=True)
class TilingPermutation:
    """Per-loop iteration factorizations, outer-to-inner."""

    factors: tuple[tuple[str, tuple[int, ...]], ...]

    def factor_map(self) -> dict[str, tuple[int, ...]]:
        return dict(self.factors)

    def render(self) -> str:
        return ";".join(f"{name}={'x'.join(str(f) for f in fs)}" for name, fs in self.factors)

    def sort_key(self):
        return self.factors


@dataclass(frozen=True)
class ValidTilingSet:
    permutations: tuple[TilingPermutation, ...]

    def __len__(self) -> int:
        return len(self.permutations)

    def __iter__(self):
        return iter(self.permutations)


# ---------------------------------------------------------------------------
# Compute mapping


def _operand_dtypes(codelet: Codelet, op: ComputeOp) -> tuple[DataType, ...]:
    return tuple(codelet.surrogate(ref.name).dtype for ref in op.operands)


def _candidate_caps(codelet: Codelet, op: ComputeOp, acg: ACG):
    dtuple = _operand_dtypes(codelet, op)
    result_dtype = codelet.surrogate(op.result.name).dtype
    pairs = matching_capabilities(acg, op.capability, dtuple)
    return [(n, c) for n, c in pairs if c.output.dtype == result_dtype]


def _uniform_width(cap: Capability) -> int | None:
    """Granularity when every operand covers the same flat element count."""
    w = cap.output.element_count
    if all(spec.element_count == w for spec in cap.inputs):
        return w
    return None


def _is_bare_ref(ref: OperandRef, loop: str) -> bool:
    return (
        len(ref.index) == 1
        and ref.index[0].terms == ((1, loop),)
        and ref.index[0].const == 0
    )


def map_compute(codelet: Codelet, acg: ACG) -> Codelet:
    """Assign every compute op to its widest usable node.

    Elementwise ops (all references one-dimensional, indexed by the same bare
    loop) widen to the largest capability granularity dividing the loop
    extent, and the loop then steps by that granularity.  Other ops keep
    granularity 1 and need an exact unit-width capability.  Unlocated
    input/output surrogates land on the highest-level memory.
    """
    if codelet.stage != "instantiated":
        raise ScheduleError(f"map_compute requires an instantiated codelet, got {codelet.stage!r}")
    highest = highest_level_memory(acg)
    surrogates = tuple(
        replace(s, loc=highest) if s.kind in ("inp", "out") and s.loc is None else s
        for s in codelet.surrogates
    )
    work = replace(codelet, surrogates=surrogates)

    def rewrite(ops: tuple, enclosing: LoopOp | None) -> tuple:
        out = []
        for op in ops:
            if isinstance(op, LoopOp):
                body = rewrite(op.body, op)
                new_loop = replace(op, body=body)
                if len(body) == 1 and isinstance(body[0], ComputeOp) and body[0].granularity > 1:
                    new_loop = replace(new_loop, stride=op.stride * body[0].granularity)
                out.append(new_loop)
            elif isinstance(op, ComputeOp):
                candidates = _candidate_caps(work, op, acg)
                dts = ",".join(d.render() for d in _operand_dtypes(work, op))
                if not candidates:
                    raise ScheduleError(
                        f"unmappable operation: no compute node supports "
                        f"{op.capability}({dts}) in ACG {acg.name!r}"
                    )
                vectorizable = (
                    enclosing is not None
                    and len(enclosing.body) == 1
                    and enclosing.stride == 1
                    and enclosing.lower == 0
                    and all(
                        _is_bare_ref(r, enclosing.name)
                        and len(work.surrogate(r.name).shape) == 1
                        for r in (*op.operands, op.result)
                    )
                )
                if vectorizable:
                    extent = enclosing.upper
                    best: tuple[int, str] | None = None
                    for node, cap in candidates:
                        w = _uniform_width(cap)
                        if w is None or extent % w:
                            continue
                        if best is None or w > best[0]:
                            best = (w, node.name)
                    if best is None:
                        raise ScheduleError(
                            f"unmappable operation: no granularity of "
                            f"{op.capability}({dts}) divides extent {extent}"
                        )
                    out.append(replace(op, loc=best[1], granularity=best[0]))
                else:
                    units = [(n, c) for n, c in candidates if _uniform_width(c) == 1]
                    if not units:
                        raise ScheduleError(
                            f"unmappable operation: no unit-width {op.capability}({dts}) "
                            f"capability in ACG {acg.name!r}"
                        )
                    out.append(replace(op, loc=units[0][0].name, granularity=1))
            else:
                out.append(op)
        return tuple(out)

    return replace(work, body=rewrite(work.body, None), stage="mapped")


# ---------------------------------------------------------------------------
# Chain planning: how each compute-op reference is staged through memory


@dataclass
class _Chain:
    """Data-movement plan for one distinct compute-op reference.

    Roles: 'in' (operand staged inward), 'out' (result staged outward),
    'acc' (operand and result with identical indices: staged inward, updated
    in place, flushed outward), and the 'direct*' variants where the home
    memory is adjacent to the compute node and no staging happens.
    """

    surrogate: Surrogate
    exprs: tuple[IndexExpr, ...]
    base_box: tuple[int, ...]
    role: str
    compute_node: str
    in_route: tuple[str, ...] = ()
    out_route: tuple[str, ...] = ()
    in_locals: tuple[str, ...] = ()
    out_locals: tuple[str, ...] = ()
    anchor_loop: str | None = None
    order: int = 0


def _ref_box(codelet: Codelet, ref: OperandRef, granularity: int) -> tuple[int, ...]:
    shape = codelet.surrogate(ref.name).shape
    box = [1] * max(len(shape), 1)
    box[-1] = granularity
    return tuple(box)


def _route(acg: ACG, src: str, dst: str) -> tuple[str, ...]:
    """Memory intermediates strictly between src and dst."""
    edges = shortest_path(acg, src, dst, memory_intermediates_only=True)
    return tuple(e.dst for e in edges[:-1]) if edges else ()


def _plan_chains(codelet: Codelet, acg: ACG) -> list[_Chain]:
    taken = {s.name for s in codelet.surrogates}

    def fresh(base: str) -> str:
        i = 1
        while f"{base}{i}" in taken:
            i += 1
        taken.add(f"{base}{i}")
        return f"{base}{i}"

    chains: dict[tuple, _Chain] = {}

    def visit(ops, path: list[LoopOp]):
        for op in ops:
            if isinstance(op, LoopOp):
                visit(op.body, path + [op])
            elif isinstance(op, ComputeOp):
                if op.loc is None:
                    raise ScheduleError(f"compute op {op.render()} is unmapped")
                result_key = (op.result.name, op.result.index)
                for position, ref in enumerate((*op.operands, op.result)):
                    is_result = position == len(op.operands)
                    key = (ref.name, ref.index)
                    wants = "acc" if (not is_result and key == result_key) else (
                        "out" if is_result else "in"
                    )
                    existing = chains.get(key)
                    if existing is not None:
                        if wants in ("out", "acc") and existing.role in ("in", "direct"):
                            raise ScheduleError(
                                f"surrogate {ref.name!r} is read and written with mismatched "
                                f"indices; accumulators must use identical index expressions"
                            )
                        continue
                    if is_result and key in {(r.name, r.index) for r in op.operands}:
                        continue  # the operand pass already planned it as 'acc'
                    surrogate = codelet.surrogate(ref.name)
                    if surrogate.loc is None:
                        raise ScheduleError(f"surrogate {ref.name!r} has no location")
                    chain = _Chain(
                        surrogate=surrogate,
                        exprs=ref.index,
                        base_box=_ref_box(codelet, ref, op.granularity),
                        role=wants,
                        compute_node=op.loc,
                        anchor_loop=path[0].name if path else None,
                        order=len(chains),
                    )
                    _resolve_routes(chain, acg, fresh)
                    chains[key] = chain

    def _resolve_routes(chain: _Chain, acg_: ACG, namegen) -> None:
        home = chain.surrogate.loc
        compute = chain.compute_node
        name = chain.surrogate.name
        try:
            if chain.role in ("in", "acc"):
                chain.in_route = _route(acg_, home, compute)
            if chain.role == "out":
                chain.out_route = _route(acg_, compute, home)
        except MachineError as exc:
            raise ScheduleError(
                f"no data path for operand {name!r} between {home} and {compute}: {exc}"
            ) from None
        if chain.role == "in" and not chain.in_route:
            chain.role = "direct"
            _require_edge(acg_, home, compute, name)
        elif chain.role == "out" and not chain.out_route:
            chain.role = "direct_out"
            _require_edge(acg_, compute, home, name)
        elif chain.role == "acc":
            if not chain.in_route:
                chain.role = "direct_acc"
                _require_edge(acg_, home, compute, name)
                _require_edge(acg_, compute, home, name)
            else:
                staging = chain.in_route[-1]
                _require_edge(acg_, staging, compute, name)
                _require_edge(acg_, compute, staging, name)
                try:
                    chain.out_route = _route(acg_, staging, home)
                except MachineError as exc:
                    raise ScheduleError(
                        f"no return path for accumulator {name!r} from {staging} "
                        f"to {home}: {exc}"
                    ) from None
        if chain.role in ("in", "acc"):
            chain.in_locals = tuple(namegen(name) for _ in chain.in_route)
        if chain.role == "acc":
            # Reuse input locals on the way back where the route retraces them;
            # anything else gets a fresh staging local.
            chain.out_locals = tuple(
                namegen(name) for node in chain.out_route
                if node not in chain.in_route
            )
        elif chain.role == "out":
            chain.out_locals = tuple(namegen(name) for _ in chain.out_route)

    def _require_edge(acg_: ACG, src: str, dst: str, name: str) -> None:
        try:
            acg_.edge(src, dst)
        except MachineError:
            raise ScheduleError(
                f"operand {name!r} needs edge {src}->{dst}, absent from ACG {acg_.name!r}"
            ) from None

    visit(codelet.body, [])
    return sorted(chains.values(), key=lambda c: c.order)


# ---------------------------------------------------------------------------
# Materialization (shared by insert_transfers and split_loops)


@dataclass
class _LevelInfo:
    name: str
    count: int
    stride: int  # element stride of this level's variable
    materialized: bool


def _loop_levels(
    codelet: Codelet, factors: dict[str, tuple[int, ...]]
) -> dict[str, list[_LevelInfo]]:
    levels: dict[str, list[_LevelInfo]] = {}
    for loop in codelet.loops():
        if loop.lower != 0:
            raise ScheduleError(f"loop {loop.name!r}: non-zero lower bounds are not schedulable")
        fs = factors.get(loop.name, (loop.iterations,))
        product = 1
        for f in fs:
            product *= f
        if product != loop.iterations:
            raise ScheduleError(
                f"loop {loop.name!r}: factors {fs} do not multiply to "
                f"{loop.iterations} iterations"
            )
        infos: list[_LevelInfo] = []
        suffix = 0
        for j, count in enumerate(fs):
            inner = 1
            for f in fs[j + 1 :]:
                inner *= f
            stride = loop.stride * inner
            materialized = not (j == 0 and count == 1 and len(fs) > 1)
            if materialized:
                name = loop.name if suffix == 0 else f"{loop.name}{suffix}"
                suffix += 1
            else:
                name = ""
            infos.append(_LevelInfo(name, count, stride, materialized))
        levels[loop.name] = infos
    return levels


def _tile_factor(infos: list[_LevelInfo], cutoff: int) -> int:
    """Product of level counts strictly inside the cutoff level's tile."""
    cutoff = min(cutoff, len(infos) - 1)
    product = 1
    for info in infos[cutoff + 1 :]:
        product *= info.count
    return product


def _chain_levels(chain: _Chain, levels: dict[str, list[_LevelInfo]]) -> int:
    return max(
        (len(levels[ln]) for expr in chain.exprs for _, ln in expr.terms),
        default=1,
    )


def _span_sizes(
    chain: _Chain, levels: dict[str, list[_LevelInfo]], cutoff: int
) -> tuple[int, ...]:
    """Per-dimension element extents of the tile a cutoff-level hop moves."""
    sizes = []
    for dim, expr in enumerate(chain.exprs):
        span = chain.base_box[dim]
        for coeff, loop_name in expr.terms:
            infos = levels[loop_name]
            inner = _tile_factor(infos, cutoff)
            span += coeff * (inner - 1) * infos[-1].stride
        sizes.append(span)
    if not sizes:
        sizes = list(chain.base_box)
    return tuple(sizes)


def _flat_span(surrogate: Surrogate, sizes: tuple[int, ...]) -> int:
    strides = surrogate.dim_strides()
    if len(sizes) != len(strides):
        raise ScheduleError(f"size arity mismatch for {surrogate.name!r}")
    return sum((s - 1) * st for s, st in zip(sizes, strides)) + 1


def _box_elements(sizes: tuple[int, ...]) -> int:
    n = 1
    for s in sizes:
        n *= s
    return n


def _tile_elements(chain: _Chain, levels: dict[str, list[_LevelInfo]], cutoff: int) -> int:
    n = _box_elements(chain.base_box)
    for expr in chain.exprs:
        for _, loop_name in expr.terms:
            n *= _tile_factor(levels[loop_name], cutoff)
    return n


def _level_expr(
    chain: _Chain,
    levels: dict[str, list[_LevelInfo]],
    lo: int,
    hi: int,
    flat: bool,
) -> tuple[IndexExpr, ...]:
    """Index expressions over split variables at levels lo < j <= hi.

    lo = -1 also keeps the constant part (outermost/global addressing).
    With flat=True the per-dimension expressions collapse through the source
    surrogate's row-major strides, because staged tiles keep source layout.
    """
    dims = []
    for expr in chain.exprs:
        terms: list[tuple[int, str]] = []
        for coeff, loop_name in expr.terms:
            infos = levels[loop_name]
            last = len(infos) - 1
            for j in range(min(lo, last) + 1, min(hi, last) + 1):
                if infos[j].materialized:
                    terms.append((coeff, infos[j].name))
        dims.append(IndexExpr(tuple(terms), expr.const if lo < 0 else 0))
    if not flat:
        return tuple(dims)
    strides = chain.surrogate.dim_strides()
    merged: dict[str, int] = {}
    const = 0
    for expr, stride in zip(dims, strides):
        const += expr.const * stride
        for coeff, name in expr.terms:
            merged[name] = merged.get(name, 0) + coeff * stride
    return (IndexExpr(tuple((c, n) for n, c in merged.items() if c), const),)


def _strip_zero(exprs: tuple[IndexExpr, ...]) -> tuple[IndexExpr, ...]:
    if len(exprs) == 1 and not exprs[0].terms and exprs[0].const == 0:
        return ()
    return exprs


@dataclass(frozen=True)
class _Hop:
    """One planned transfer: where it sits and what it moves."""

    chain: _Chain
    src_node: str | None  # None for constant-source allocations
    dst_node: str
    cutoff: int  # tile level this hop moves
    op: TransferOp
    anchor: tuple


def _plan_hops(
    chains: list[_Chain],
    mapped: Codelet,
    acg: ACG,
    levels: dict[str, list[_LevelInfo]],
) -> tuple[list[_Hop], dict[tuple, OperandRef], list[Surrogate]]:
    """Plan every transfer op, the compute-ref rewrites, and new locals."""
    nest_depth: dict[str, int] = {}

    def scan(ops, depth):
        for op in ops:
            if isinstance(op, LoopOp):
                nest_depth[op.name] = depth
                scan(op.body, depth + 1)

    scan(mapped.body, 0)

    def scope(chain: _Chain, cutoff: int, end: bool) -> tuple:
        best: tuple[int, str, int] | None = None
        for expr in chain.exprs:
            for _, loop_name in expr.terms:
                infos = levels[loop_name]
                cut = min(cutoff, len(infos) - 1)
                lev = None
                for j in range(cut, -1, -1):
                    if infos[j].materialized:
                        lev = j
                        break
                if lev is None:
                    continue
                key = (nest_depth[loop_name], loop_name, lev)
                if best is None or key > best:
                    best = key
        if best is None:
            if chain.anchor_loop is None:
                return ("top", "end" if end else "start")
            return ("around", chain.anchor_loop, "after" if end else "before")
        return ("level", best[1], best[2], "end" if end else "start")

    hops: list[_Hop] = []
    rewrites: dict[tuple, OperandRef] = {}
    new_locals: list[Surrogate] = []

    def add_local(name: str, node: str, chain: _Chain, cutoff: int) -> None:
        sizes = _span_sizes(chain, levels, cutoff)
        span = _flat_span(chain.surrogate, sizes)
        if span != _box_elements(sizes):
            raise ScheduleError(
                f"tile of {chain.surrogate.name!r} with extents {sizes} is not a contiguous "
                f"run; pick a tiling with full trailing dimensions"
            )
        new_locals.append(
            Surrogate(name, "local", shape=(span,), dtype=chain.surrogate.dtype, loc=node)
        )

    def outbound(
        chain: _Chain,
        facing: str,
        facing_node: str,
        rest: tuple[str, ...],
        fresh_names: tuple[str, ...],
        start_cut: int,
    ) -> None:
        """Flush a result local back to its home surrogate, level by level.

        Hop i moves the level-(start_cut - i) tile; the hop into the home
        surrogate addresses it with outer-level (global) expressions, while
        hops into wider staging locals use the inner-level offset.
        """
        route = (facing_node,) + rest + (chain.surrogate.loc,)
        fresh = list(fresh_names)
        prev, prev_node = facing, facing_node
        for i, dst_node in enumerate(route[1:]):
            cut = max(start_cut - i, 0)
            sizes = _span_sizes(chain, levels, cut)
            last = i == len(route) - 2
            if last:
                dst = OperandRef(
                    chain.surrogate.name, _level_expr(chain, levels, -1, cut, flat=False)
                )
                op = TransferOp(source=OperandRef(prev), dest=dst, sizes=sizes)
                next_prev, next_node = chain.surrogate.name, chain.surrogate.loc
            else:
                # Intermediate return staging: reuse the inbound local when
                # the route retraces its node, else a fresh local.
                reuse = None
                if chain.role == "acc":
                    for ln, node in zip(chain.in_locals, chain.in_route):
                        if node == dst_node:
                            reuse = ln
                            break
                if reuse is not None:
                    dst = OperandRef(
                        reuse,
                        _strip_zero(
                            _level_expr(chain, levels, max(cut - 1, 0), cut, flat=True)
                        ),
                    )
                    op = TransferOp(source=OperandRef(prev), dest=dst, sizes=sizes)
                    next_prev, next_node = reuse, dst_node
                else:
                    name = fresh.pop(0)
                    add_local(name, dst_node, chain, max(cut - 1, 0))
                    op = TransferOp(
                        source=OperandRef(prev), dest=dst_node, sizes=sizes, local=name
                    )
                    next_prev, next_node = name, dst_node
            hops.append(
                _Hop(chain, prev_node, dst_node, cut, op, scope(chain, cut, end=True))
            )
            prev, prev_node = next_prev, next_node

    for chain in chains:
        key = (chain.surrogate.name, chain.exprs)
        if chain.role in ("direct", "direct_out", "direct_acc"):
            rewrites[key] = OperandRef(
                chain.surrogate.name, _level_expr(chain, levels, -1, 99, flat=False)
            )
            continue

        n_levels = _chain_levels(chain, levels)
        in_depth = len(chain.in_route)

        if chain.role in ("in", "acc"):
            prev = chain.surrogate.name
            for hop in range(in_depth):
                local_name = chain.in_locals[hop]
                add_local(local_name, chain.in_route[hop], chain, hop)
                if hop == 0:
                    src = OperandRef(
                        chain.surrogate.name, _level_expr(chain, levels, -1, 0, flat=False)
                    )
                else:
                    src = OperandRef(
                        prev, _strip_zero(_level_expr(chain, levels, hop - 1, hop, flat=True))
                    )
                op = TransferOp(
                    source=src,
                    dest=chain.in_route[hop],
                    sizes=_span_sizes(chain, levels, hop),
                    local=local_name,
                )
                src_node = chain.surrogate.loc if hop == 0 else chain.in_route[hop - 1]
                hops.append(
                    _Hop(chain, src_node, chain.in_route[hop], hop, op,
                         scope(chain, hop, end=False))
                )
                prev = local_name
            facing_cut = min(in_depth - 1, n_levels - 1)
            rewrites[key] = OperandRef(
                prev, _strip_zero(_level_expr(chain, levels, facing_cut, 99, flat=True))
            )
            if chain.role == "acc":
                outbound(
                    chain, prev, chain.in_route[-1], chain.out_route,
                    chain.out_locals, facing_cut,
                )
            continue

        # role == 'out': allocate the innermost tile up front (constant
        # source), let the compute write it, then flush outward.
        out_depth = len(chain.out_route)
        facing_cut = min(out_depth - 1, n_levels - 1)
        facing = chain.out_locals[0]
        add_local(facing, chain.out_route[0], chain, facing_cut)
        alloc = TransferOp(
            source=Constant(chain.surrogate.dtype, 0),
            dest=chain.out_route[0],
            sizes=_span_sizes(chain, levels, facing_cut),
            local=facing,
        )
        anchor = ("around", chain.anchor_loop, "before") if chain.anchor_loop else ("top", "start")
        hops.append(_Hop(chain, None, chain.out_route[0], facing_cut, alloc, anchor))
        rewrites[key] = OperandRef(
            facing, _strip_zero(_level_expr(chain, levels, facing_cut, 99, flat=True))
        )
        outbound(
            chain, facing, chain.out_route[0], chain.out_route[1:],
            chain.out_locals[1:], facing_cut,
        )

    return hops, rewrites, new_locals


def _materialize(
    mapped: Codelet, acg: ACG, factors: dict[str, tuple[int, ...]], stage: str
) -> Codelet:
    chains = _plan_chains(mapped, acg)
    levels = _loop_levels(mapped, factors)
    hops, rewrites, new_locals = _plan_hops(chains, mapped, acg, levels)

    inserts: dict[tuple, list[TransferOp]] = {}
    for hop in hops:
        inserts.setdefault(hop.anchor, []).append(hop.op)

    def rewrite_compute(op: ComputeOp) -> ComputeOp:
        def fix(ref: OperandRef) -> OperandRef:
            return rewrites.get((ref.name, ref.index), ref)

        return replace(
            op,
            operands=tuple(fix(r) for r in op.operands),
            result=fix(op.result),
        )

    def build(ops) -> list:
        out: list = []
        for op in ops:
            if isinstance(op, LoopOp):
                out.extend(inserts.get(("around", op.name, "before"), ()))
                infos = levels[op.name]
                subtree = build(op.body)
                for j in range(len(infos) - 1, -1, -1):
                    info = infos[j]
                    if not info.materialized:
                        continue
                    starts = inserts.get(("level", op.name, j, "start"), [])
                    ends = inserts.get(("level", op.name, j, "end"), [])
                    subtree = [
                        LoopOp(
                            name=info.name,
                            lower=0,
                            upper=info.count * info.stride,
                            stride=info.stride,
                            body=tuple(list(starts) + subtree + list(ends)),
                        )
                    ]
                out.extend(subtree)
                out.extend(inserts.get(("around", op.name, "after"), ()))
            elif isinstance(op, ComputeOp):
                out.append(rewrite_compute(op))
            else:
                raise ScheduleError("cannot rematerialize an already-scheduled codelet")
        return out

    body = (
        list(inserts.get(("top", "start"), ()))
        + build(mapped.body)
        + list(inserts.get(("top", "end"), ()))
    )
    return replace(
        mapped,
        surrogates=mapped.surrogates + tuple(new_locals),
        body=tuple(body),
        stage=stage,
    )


def insert_transfers(codelet: Codelet, acg: ACG) -> Codelet:
    """Stage every compute operand through the memory hierarchy.

    Transfers initially carry the per-iteration access size; tiling later
    regroups them.  Produces the scheduled stage.
    """
    if codelet.stage != "mapped":
        raise ScheduleError(f"insert_transfers requires a mapped codelet, got {codelet.stage!r}")
    return _materialize(codelet, acg, {}, "scheduled")


# ---------------------------------------------------------------------------
# Stripping a scheduled codelet back to its mapped view


def strip_transfers(codelet: Codelet) -> Codelet:
    """Inverse of materialization: drop transfers/locals, merge split loops."""
    if codelet.stage not in ("scheduled", "tiled", "optimized"):
        raise ScheduleError(f"cannot strip transfers at stage {codelet.stage!r}")

    local_names = {s.name for s in codelet.surrogates if s.kind == "local"}
    # Locals form chains linked by their transfers; any chain reaches exactly
    # one non-local reference (the staged operand's home slice).  Walk links
    # in both directions so outbound chains resolve through their
    # intermediates too.
    links: dict[str, list[OperandRef]] = {name: [] for name in local_names}

    def link(a: str, ref: OperandRef) -> None:
        links[a].append(ref)

    for op in codelet.walk():
        if not isinstance(op, TransferOp):
            continue
        src_ref = op.source if isinstance(op.source, OperandRef) else None
        dst_ref = op.dest if isinstance(op.dest, OperandRef) else None
        if op.allocating and src_ref is not None:
            link(op.local, src_ref)
            if src_ref.name in local_names:
                link(src_ref.name, OperandRef(op.local))
        elif not op.allocating and src_ref is not None and dst_ref is not None:
            if src_ref.name in local_names:
                link(src_ref.name, dst_ref)
            if dst_ref.name in local_names:
                link(dst_ref.name, src_ref)

    def resolve(name: str) -> OperandRef:
        seen = {name}
        frontier = [name]
        found: list[OperandRef] = []
        while frontier:
            current = frontier.pop(0)
            for ref in links.get(current, ()):
                if ref.name in local_names:
                    if ref.name not in seen:
                        seen.add(ref.name)
                        frontier.append(ref.name)
                else:
                    found.append(ref)
        if not found:
            raise ScheduleError(f"cannot trace local {name!r} back to a surrogate")
        # Prefer the reference carrying index expressions (the hop that
        # addresses the home surrogate), falling back to any.
        found.sort(key=lambda r: (not r.index, r.render()))
        return found[0]

    # Merge split loops back together: a loop whose body is exactly one loop
    # named after it, spanning one stride, is a tiling level.
    merged: dict[str, str] = {}

    def merge(ops) -> list:
        out = []
        for op in ops:
            if isinstance(op, TransferOp):
                continue
            if isinstance(op, ComputeOp):
                out.append(op)
                continue
            base = op.name
            innermost = op
            while True:
                body_loops = [o for o in innermost.body if isinstance(o, LoopOp)]
                body_computes = [o for o in innermost.body if isinstance(o, ComputeOp)]
                if (
                    len(body_loops) == 1
                    and not body_computes
                    and body_loops[0].name.startswith(base)
                    and body_loops[0].name != base
                    and body_loops[0].name[len(base):].isdigit()
                    and body_loops[0].upper == innermost.stride
                    and body_loops[0].lower == 0
                ):
                    innermost = body_loops[0]
                    merged[innermost.name] = base
                else:
                    break
            out.append(
                LoopOp(
                    name=base,
                    lower=0,
                    upper=op.upper,
                    stride=innermost.stride,
                    body=tuple(merge(innermost.body)),
                )
            )
        return out

    def rebuild_expr(expr: IndexExpr) -> IndexExpr:
        terms: dict[str, int] = {}
        for coeff, name in expr.terms:
            base = merged.get(name, name)
            terms[base] = terms.get(base, 0) + coeff
        return IndexExpr(tuple((c, n) for n, c in terms.items() if c), expr.const)

    def restore(ref: OperandRef) -> OperandRef:
        if ref.name in local_names:
            base = resolve(ref.name)
            return OperandRef(base.name, tuple(rebuild_expr(e) for e in base.index))
        return OperandRef(ref.name, tuple(rebuild_expr(e) for e in ref.index))

    def fix(ops) -> tuple:
        out = []
        for op in ops:
            if isinstance(op, LoopOp):
                out.append(replace(op, body=fix(op.body)))
            else:
                out.append(
                    replace(
                        op,
                        operands=tuple(restore(r) for r in op.operands),
                        result=restore(op.result),
                    )
                )
        return tuple(out)

    body = fix(tuple(merge(codelet.body)))
    surrogates = tuple(s for s in codelet.surrogates if s.kind != "local")
    return replace(codelet, body=body, surrogates=surrogates, stage="mapped")


# ---------------------------------------------------------------------------
# Tiling validation


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _ordered_factorizations(n: int, parts: int) -> list[tuple[int, ...]]:
    if parts == 1:
        return [(n,)]
    out = []
    for first in _divisors(n):
        for rest in _ordered_factorizations(n // first, parts - 1):
            out.append((first,) + rest)
    return out


def valid_tilings(codelet: Codelet, acg: ACG) -> ValidTilingSet:
    """Factor permutations whose transfers all align and fit.

    Faithful to the accumulate-then-check walk: for each candidate, every
    static transfer adds its size (operand element bits times the product of
    the candidate factors inside its tile) to the destination's running
    storage, then the alignment (size modulo the source data width) and
    capacity checks run.  Storage never decrements.
    """
    if codelet.stage != "scheduled":
        raise ScheduleError(f"valid_tilings requires a scheduled codelet, got {codelet.stage!r}")
    mapped = strip_transfers(codelet)
    chains = _plan_chains(mapped, acg)
    loops = mapped.loops()
    if not loops:
        return ValidTilingSet((TilingPermutation(()),))

    depth_by_loop: dict[str, int] = {l.name: 1 for l in loops}
    for chain in chains:
        depth = max(len(chain.in_route), len(chain.out_route), 1)
        for expr in chain.exprs:
            for _, ln in expr.terms:
                depth_by_loop[ln] = max(depth_by_loop[ln], min(depth, 2))

    choices: list[tuple[str, list[tuple[int, ...]]]] = []
    for loop in loops:
        opts = list(_ordered_factorizations(loop.iterations, 2))
        if depth_by_loop[loop.name] >= 2:
            for trip in _ordered_factorizations(loop.iterations, 3):
                if trip not in opts:
                    opts.append(trip)
        choices.append((loop.name, opts))

    names = [name for name, _ in choices]
    valid = []
    for combo in itertools.product(*(opts for _, opts in choices)):
        factors = dict(zip(names, combo))
        if _alg1_accepts(chains, mapped, acg, factors):
            valid.append(TilingPermutation(tuple(sorted(factors.items()))))
    valid.sort(key=TilingPermutation.sort_key)
    return ValidTilingSet(tuple(valid))


def _alg1_accepts(chains, mapped: Codelet, acg: ACG, factors) -> bool:
    levels = _loop_levels(mapped, factors)
    storage = {m.name: 0 for m in acg.memories}
    hops = _abstract_hops(chains, mapped, acg, levels)
    for hop in hops:
        dtype = hop.chain.surrogate.dtype
        if hop.src_node is None:
            xfer_size = dtype.bits  # constant source carries no loop offsets
        else:
            xfer_size = dtype.bits * _tile_elements(hop.chain, levels, hop.cutoff)
        if not acg.is_memory(hop.dst_node):
            continue
        storage[hop.dst_node] += xfer_size
        if hop.src_node is not None and acg.is_memory(hop.src_node):
            if xfer_size % acg.memory(hop.src_node).data_width != 0:
                return False
        if storage[hop.dst_node] > acg.memory(hop.dst_node).capacity_bits:
            return False
    return True


def _abstract_hops(chains, mapped, acg, levels):
    """Hop skeletons for validation when exact planning rejects the tiling.

    Planning refuses tilings whose tiles are not contiguous runs; the
    capacity/alignment walk must still evaluate them, so reproduce the hop
    sequence without materializing operands.
    """
    hops = []
    dummy = TransferOp(source=Constant(DataType(True, 8), 0), dest="", sizes=(1,), local=None)
    for chain in chains:
        if chain.role in ("direct", "direct_out", "direct_acc"):
            continue
        n_levels = _chain_levels(chain, levels)
        in_depth = len(chain.in_route)
        if chain.role in ("in", "acc"):
            prev = chain.surrogate.loc
            for h in range(in_depth):
                hops.append(_Hop(chain, prev, chain.in_route[h], h, dummy, ("top", "start")))
                prev = chain.in_route[h]
            if chain.role == "acc":
                cut = min(in_depth - 1, n_levels - 1)
                route = chain.in_route[-1:] + chain.out_route + (chain.surrogate.loc,)
                prev = route[0]
                for i, dst in enumerate(route[1:]):
                    hops.append(
                        _Hop(chain, prev, dst, max(cut - i, 0), dummy, ("top", "start"))
                    )
                    prev = dst
        else:
            cut = min(len(chain.out_route) - 1, n_levels - 1)
            hops.append(_Hop(chain, None, chain.out_route[0], cut, dummy, ("top", "start")))
            route = chain.out_route + (chain.surrogate.loc,)
            prev = route[0]
            for i, dst in enumerate(route[1:]):
                hops.append(_Hop(chain, prev, dst, max(cut - i, 0), dummy, ("top", "start")))
                prev = dst
    return hops


# ---------------------------------------------------------------------------
# Tiling selection


def select_tiling(tilings: ValidTilingSet, codelet: Codelet, acg: ACG) -> TilingPermutation:
    """Cheapest schedulable permutation by estimated mnemonic count.

    Cost: dynamic transfer mnemonics (each execution issues ceil(tile bits /
    edge bandwidth) requests) plus compute mnemonics.  Ties prefer the
    largest innermost tile, then the lexicographically first rendering.
    Permutations whose tiles are not contiguous runs are skipped here (the
    validation walk deliberately knows nothing about layout).
    """
    if not len(tilings):
        raise ScheduleError("no valid tiling exists for this codelet on this machine")
    if codelet.stage != "scheduled":
        raise ScheduleError(f"select_tiling requires a scheduled codelet, got {codelet.stage!r}")
    mapped = strip_transfers(codelet)
    chains = _plan_chains(mapped, acg)

    nest: dict[str, list[str]] = {}

    def scan(ops, stack):
        for op in ops:
            if isinstance(op, LoopOp):
                nest[op.name] = list(stack)
                scan(op.body, stack + [op.name])

    scan(mapped.body, [])

    compute_count = 0

    def count_computes(ops, mult):
        nonlocal compute_count
        for op in ops:
            if isinstance(op, LoopOp):
                count_computes(op.body, mult * op.iterations)
            elif isinstance(op, ComputeOp):
                compute_count += mult

    count_computes(mapped.body, 1)

    scored = []
    for p in tilings:
        factors = p.factor_map()
        levels = _loop_levels(mapped, factors)
        try:
            hops, _, locals_ = _plan_hops(chains, mapped, acg, levels)
        except ScheduleError:
            continue
        if not _allocations_fit(mapped, acg, locals_, hops):
            continue
        total = compute_count
        feasible = True
        for hop in hops:
            if hop.src_node is None:
                continue
            try:
                edge = acg.edge(hop.src_node, hop.dst_node)
            except MachineError:
                feasible = False
                break
            tile_bits = hop.chain.surrogate.dtype.bits * _tile_elements(
                hop.chain, levels, hop.cutoff
            )
            per = -(-tile_bits // edge.bandwidth)
            total += per * _executions(hop.chain, hop.cutoff, levels, nest)
        if not feasible:
            continue
        inner_volume = 1
        for _, fs in p.factors:
            inner_volume *= fs[-1]
        scored.append((total, -inner_volume, p.render(), p))
    if not scored:
        raise ScheduleError(
            "no valid tiling is schedulable: every candidate produces non-contiguous tiles"
        )
    scored.sort(key=lambda t: t[:3])
    return scored[0][3]


def _allocations_fit(
    mapped: Codelet, acg: ACG, new_locals: list[Surrogate], hops: list[_Hop]
) -> bool:
    """Allocator feasibility: peak concurrently-live storage per memory.

    The validation walk counts a constant-source allocation as a single
    element (it carries no loop offsets), so a permutation can pass
    validation yet not be allocatable; selection filters those out.  The
    allocator reclaims a local when its last top-level phase ends, so
    feasibility is the peak over phases, with inputs/outputs resident
    throughout.
    """
    local_nodes = {s.name: s for s in new_locals}

    def slots_of(s: Surrogate) -> int:
        node = acg.memory(s.loc)
        n = s.element_count * node.element_stride_slots(s.dtype)
        return n + (-n) % node.banks

    resident: dict[str, int] = {m.name: 0 for m in acg.memories}
    for s in mapped.surrogates:
        if s.kind in ("inp", "out") and s.loc is not None and acg.is_memory(s.loc):
            resident[s.loc] += slots_of(s)

    # Phase span of each local: the range of top-level anchors its chain's
    # loops belong to.  Without loop anchors the local lives globally.
    top_level = [op.name for op in mapped.body if isinstance(op, LoopOp)]
    phase_of = {name: i for i, name in enumerate(top_level)}
    spans: dict[str, tuple[int, int]] = {}
    for hop in hops:
        anchor = hop.chain.anchor_loop
        phase = phase_of.get(anchor, 0) if anchor is not None else 0
        for name in _hop_local_names(hop):
            if name not in local_nodes:
                continue
            lo, hi = spans.get(name, (phase, phase))
            spans[name] = (min(lo, phase), max(hi, phase))
    phases = max(len(top_level), 1)
    for p in range(phases):
        used = dict(resident)
        for name, (lo, hi) in spans.items():
            if lo <= p <= hi:
                s = local_nodes[name]
                used[s.loc] += slots_of(s)
        if any(used[m.name] > m.slot_count for m in acg.memories):
            return False
    return True


def _hop_local_names(hop: _Hop):
    names = []
    if hop.op.local is not None:
        names.append(hop.op.local)
    for ref in (hop.op.source, hop.op.dest):
        if isinstance(ref, OperandRef):
            names.append(ref.name)
    return names


def _executions(chain: _Chain, cutoff: int, levels, nest) -> int:
    involved = {ln for expr in chain.exprs for _, ln in expr.terms}
    if not involved:
        return 1
    place = max(involved, key=lambda ln: (len(nest[ln]), ln))
    count = 1
    for ln in nest[place] + [place]:
        infos = levels[ln]
        if ln == place:
            cut = min(cutoff, len(infos) - 1)
            for info in infos[: cut + 1]:
                count *= info.count
        elif ln in involved:
            cut = min(cutoff, len(infos) - 1)
            for info in infos:
                count *= info.count
            for info in infos[cut + 1 :]:
                count //= info.count
        else:
            for info in infos:
                count *= info.count
    return count


# ---------------------------------------------------------------------------
# Loop splitting and the composed pipeline


def split_loops(codelet: Codelet, permutation: TilingPermutation, acg: ACG) -> Codelet:
    """Split loops per the chosen factors and regroup transfers into tiles.

    Each factored loop becomes an outer loop striding by its tile size with
    an inner loop spanning one tile; tile-sized transfers sit with the outer
    loop and compute ops index the inner one.
    """
    if codelet.stage != "scheduled":
        raise ScheduleError(f"split_loops requires a scheduled codelet, got {codelet.stage!r}")
    mapped = strip_transfers(codelet)
    for name, fs in permutation.factors:
        loop = mapped.find_loop(name)
        product = 1
        for f in fs:
            product *= f
        if product != loop.iterations:
            raise ScheduleError(
                f"loop {name!r}: factors {fs} do not match {loop.iterations} iterations"
            )
    return _materialize(mapped, acg, permutation.factor_map(), "tiled")


def schedule(codelet: Codelet, acg: ACG) -> Codelet:
    """Full pipeline: map, insert transfers, validate, select, split."""
    mapped = map_compute(codelet, acg)
    scheduled = insert_transfers(mapped, acg)
    tilings = valid_tilings(scheduled, acg)
    chosen = select_tiling(tilings, scheduled, acg)
    return split_loops(scheduled, chosen, acg)
