"""End-to-end compile and verify flows shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass, field

from .codegen import LoweredProgram, encode_program, lower, render_listing
from .codelet import Codelet, instantiate, render_codelet
from .codelet_parser import parse_codelet
from .dtypes import DataType, parse_dtype
from .errors import CovenantError, LayerError
from .optimizer import Packet, apply_optimizations, pack_mnemonics
from .oracle import Tensor, eval_layer
from .packages import MachinePackage
from .prng import SplitMix64
from .scheduler import schedule, map_compute, insert_transfers, valid_tilings, select_tiling, split_loops
from .simulator import MemoryImage, RunMetrics, fresh_images, run_packets


@dataclass
class CompileResult:
    codelet_name: str
    stages: dict[str, Codelet]
    program: LoweredProgram
    packets: list  # Packets on VLIW targets, bare mnemonics otherwise
    binary: bytes
    listing: str

    def stage_text(self, stage: str) -> str:
        if stage == "mnemonics":
            return self.listing
        if stage not in self.stages:
            raise CovenantError(f"stage {stage!r} was not produced by this compile")
        return render_codelet(self.stages[stage])


def parse_layer_bindings(pairs: dict[str, str]) -> tuple[str | None, dict[str, int], dict[str, DataType]]:
    """Split layer key=value pairs into codelet name, params, and dtypes.

    `dtype` sets the default element type; `dtype.<surrogate>` overrides one
    surrogate; every other key is an integer parameter binding.
    """
    codelet_name: str | None = None
    params: dict[str, int] = {}
    dtypes: dict[str, DataType] = {}
    for key, value in pairs.items():
        if key == "codelet":
            codelet_name = value
        elif key == "dtype":
            dtypes[""] = parse_dtype(value)
        elif key.startswith("dtype."):
            dtypes[key[len("dtype.") :]] = parse_dtype(value)
        else:
            try:
                params[key] = int(value)
            except ValueError:
                raise LayerError(f"layer binding {key}={value!r} is not an integer") from None
    return codelet_name, params, dtypes


def compile_codelet(
    source: str,
    params: dict[str, int],
    dtypes: dict[str, DataType],
    package: MachinePackage,
    opts: set[str] = frozenset(),
) -> CompileResult:
    template = parse_codelet(source)
    stages: dict[str, Codelet] = {"template": template}
    inst = instantiate(template, params, dtypes)
    stages["instantiated"] = inst
    mapped = map_compute(inst, package.acg)
    stages["mapped"] = mapped
    scheduled = insert_transfers(mapped, package.acg)
    stages["scheduled"] = scheduled
    tilings = valid_tilings(scheduled, package.acg)
    chosen = select_tiling(tilings, scheduled, package.acg)
    tiled = split_loops(scheduled, chosen, package.acg)
    stages["tiled"] = tiled
    optimized = apply_optimizations(tiled, package.acg, opts - {"pack"})
    stages["optimized"] = optimized
    program = lower(optimized, package.acg)
    if "pack" in opts:
        packets: list = pack_mnemonics(program.mnemonics, package.acg)
    else:
        packets = list(program.mnemonics)
    binary = encode_program(packets, package.acg)
    listing = render_listing(packets)
    return CompileResult(template.name, stages, program, packets, binary, listing)


# ---------------------------------------------------------------------------
# Verification against the reference oracle


@dataclass
class VerifyReport:
    passed: bool
    codelet: str
    acg: str
    seed: int
    metrics: RunMetrics
    mismatch: tuple[str, int, int, int] | None = None  # surrogate, index, expected, got

    def describe(self) -> str:
        if self.passed:
            return f"PASS {self.codelet} on {self.acg} (seed {self.seed})"
        name, index, expected, got = self.mismatch
        return (
            f"FAIL {self.codelet} on {self.acg} (seed {self.seed}): "
            f"{name}[{index}] expected {expected}, got {got}"
        )


def seeded_inputs(result: CompileResult, seed: int) -> dict[str, Tensor]:
    """Deterministic random input tensors for a compiled program."""
    rng = SplitMix64(seed)
    tensors: dict[str, Tensor] = {}
    for name, placement in result.program.layout.items():
        if placement.kind == "inp":
            tensors[name] = Tensor(
                placement.dtype,
                placement.shape,
                tuple(rng.elements(placement.dtype, placement.elements)),
            )
    return tensors


def preload_images(result: CompileResult, package: MachinePackage, tensors: dict[str, Tensor]):
    images = fresh_images(package.acg)
    for name, t in tensors.items():
        placement = result.program.layout[name]
        image = images[placement.node]
        stride = image.node.element_stride_slots(placement.dtype)
        for k, value in enumerate(t.data):
            image.write_value(placement.slot + k * stride, placement.dtype, value)
    return images


def extract_output(result: CompileResult, package: MachinePackage, images, name: str) -> Tensor:
    placement = result.program.layout[name]
    image = images[placement.node]
    stride = image.node.element_stride_slots(placement.dtype)
    values = tuple(
        image.read_value(placement.slot + k * stride, placement.dtype)
        for k in range(placement.elements)
    )
    return Tensor(placement.dtype, placement.shape, values)


def verify(
    source: str,
    params: dict[str, int],
    dtypes: dict[str, DataType],
    package: MachinePackage,
    seed: int,
    opts: set[str] = frozenset(),
) -> VerifyReport:
    """Compile, simulate on random inputs, and compare with the oracle."""
    result = compile_codelet(source, params, dtypes, package, opts)
    tensors = seeded_inputs(result, seed)
    images = preload_images(result, package, tensors)
    packets = [list(p.slots) if isinstance(p, Packet) else [p] for p in result.packets]
    final, metrics = run_packets(packets, package.acg, package.bindings, images)
    reference = eval_layer(result.codelet_name, params, dict(tensors) | _zero_outputs(result))
    for name, expected in sorted(reference.items()):
        got = extract_output(result, package, final, name)
        for i, (e, g) in enumerate(zip(expected.data, got.data)):
            if e != g:
                return VerifyReport(
                    False, result.codelet_name, package.name, seed, metrics, (name, i, e, g)
                )
    return VerifyReport(True, result.codelet_name, package.name, seed, metrics)


def _zero_outputs(result: CompileResult) -> dict[str, Tensor]:
    outs = {}
    for name, placement in result.program.layout.items():
        if placement.kind == "out":
            outs[name] = Tensor(
                placement.dtype, placement.shape, tuple([0] * placement.elements)
            )
    return outs
