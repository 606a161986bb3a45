"""Machine-package and codelet-library discovery.

A machine package is a pair of files, <name>.acg and <name>.sem, found in
the COVENANT_PACKAGE_PATH directories (colon-separated) or among the
bundled fixtures.  The codelet library resolves the same way against
<dir>/codelets/<name>.cdlt.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .acg import ACG, validate_acg
from .acg_parser import parse_acg
from .errors import MachineError
from .simulator import Effect, parse_bindings

ENV_VAR = "COVENANT_PACKAGE_PATH"


@dataclass
class MachinePackage:
    name: str
    acg: ACG
    bindings: dict[str, tuple[Effect, ...]]


def builtin_dir() -> Path:
    return Path(resources.files("covenant") / "packages")


def search_dirs() -> list[Path]:
    dirs = []
    env = os.environ.get(ENV_VAR, "")
    for part in env.split(":"):
        if part:
            dirs.append(Path(part))
    dirs.append(builtin_dir())
    return dirs


def available_packages() -> list[str]:
    names = set()
    for d in search_dirs():
        if d.is_dir():
            for p in d.glob("*.acg"):
                names.add(p.stem)
    return sorted(names)


def _find(name: str, suffix: str) -> Path:
    direct = Path(name)
    if direct.suffix == suffix and direct.is_file():
        return direct
    for d in search_dirs():
        candidate = d / f"{name}{suffix}"
        if candidate.is_file():
            return candidate
    raise MachineError(
        f"no {suffix} file for {name!r}; searched {[str(d) for d in search_dirs()]}"
    )


def load_package(name: str) -> MachinePackage:
    """Load and validate an ACG package plus its semantic bindings."""
    acg_path = _find(name, ".acg")
    acg = parse_acg(acg_path.read_text())
    problems = validate_acg(acg)
    if problems:
        raise MachineError(f"invalid ACG package {name!r}: " + "; ".join(problems))
    sem_path = acg_path.with_suffix(".sem")
    if not sem_path.is_file():
        sem_path = _find(acg.name, ".sem")
    bindings = parse_bindings(sem_path.read_text(), acg)
    return MachinePackage(acg.name, acg, bindings)


def load_acg_only(name: str) -> ACG:
    acg_path = _find(name, ".acg")
    return parse_acg(acg_path.read_text())


def codelet_source(name: str) -> str:
    """Text of a shipped or user codelet (path or library name)."""
    direct = Path(name)
    if direct.suffix == ".cdlt" and direct.is_file():
        return direct.read_text()
    for d in search_dirs():
        candidate = d / "codelets" / f"{name}.cdlt"
        if candidate.is_file():
            return candidate.read_text()
    raise MachineError(f"no codelet named {name!r} in the library or on disk")


def library_codelets() -> list[str]:
    names = set()
    for d in search_dirs():
        lib = d / "codelets"
        if lib.is_dir():
            for p in lib.glob("*.cdlt"):
                names.add(p.stem)
    return sorted(names)
