"""Embedding discovery: extract module imports and match them to snapshots.

Imports come either from module text (``.wat``) or from the binary import
section (``.wasm``). A snapshot-store entry is embeddable when its name stem
equals the module name of some import. Host-provided imports (the dispatcher
namespace) are never embedding candidates.
"""

from __future__ import annotations

import re
from pathlib import Path

from . import wasmbin
from .errors import ScanFailure, UnparsableText

DEFAULT_SNAPSHOT_ROOT = Path("/var/lib/cwasi/snapshot")

# Import namespaces satisfied by the shim itself, never by snapshot bundles.
HOST_NAMESPACES = frozenset({"cwasi"})

_IMPORT_RE = re.compile(
    r'\(\s*import\s+"((?:[^"\\]|\\.)*)"\s+"((?:[^"\\]|\\.)*)"', re.DOTALL
)
_IMPORT_TOKEN_RE = re.compile(r"\(\s*import\b")


def scan_text_imports(module_text: str) -> set[tuple[str, str]]:
    """Collect (module, name) pairs from import clauses in module text.

    Lenient: only the import clauses themselves must be recognizable. Raises
    UnparsableText when import tokens exist that cannot be scanned.
    """
    if not isinstance(module_text, str):
        raise UnparsableText("module text must be a string")
    if "\x00" in module_text:
        raise UnparsableText("module text contains NUL bytes")
    found = _IMPORT_RE.findall(module_text)
    tokens = _IMPORT_TOKEN_RE.findall(module_text)
    if len(tokens) > len(found):
        raise UnparsableText(
            f"{len(tokens)} import clauses present but only {len(found)} scannable"
        )
    return {(m, n) for m, n in found}


def parse_binary_imports(module_bytes: bytes) -> set[tuple[str, str]]:
    """Decode the standard import section of a binary module."""
    return {(m, n) for m, n, _, _ in wasmbin.parse_imports(module_bytes)}


class SnapshotStore:
    """Directory of available module bundles (files or subdirectories)."""

    def __init__(self, root: Path | str = DEFAULT_SNAPSHOT_ROOT):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ScanFailure(f"snapshot root is not a directory: {self.root}")

    def entries(self) -> list[Path]:
        """All candidate bundle paths under the root, recursively, sorted."""
        try:
            return sorted(p for p in self.root.rglob("*"))
        except OSError as exc:
            raise ScanFailure(f"cannot scan {self.root}: {exc}") from exc


def discover_embeddings(
    imports: set[tuple[str, str]], store: SnapshotStore
) -> list[Path]:
    """Match import module names against snapshot entry stems.

    Returns the lexicographically ordered list of matching bundle paths.
    """
    wanted = {m for m, _ in imports if m and m not in HOST_NAMESPACES}
    if not wanted:
        return []
    matches = []
    for path in store.entries():
        stem = path.stem if path.is_file() else path.name
        if stem in wanted:
            matches.append(path)
    return sorted(matches)


def imports_for_artifact(artifact_path: Path) -> set[tuple[str, str]]:
    """Extract imports from a module artifact based on its encoding."""
    artifact_path = Path(artifact_path)
    if artifact_path.suffix == ".wat":
        return scan_text_imports(artifact_path.read_text("utf-8"))
    if artifact_path.suffix == ".wasm":
        return parse_binary_imports(artifact_path.read_bytes())
    return set()


def embed_modules(primary_module: bytes, extras: list[Path], engine, **kw):
    """Co-instantiate the primary with extras in one guest instance.

    Imports of the primary matched by extras resolve to the extras' exports;
    all modules share one address space. Raises LinkError via the engine when
    an import remains unresolved.
    """
    return engine.instantiate(primary_module, extras=extras, **kw)
