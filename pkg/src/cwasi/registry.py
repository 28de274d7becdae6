"""Running-function registry and co-location lookup.

The filesystem under ``running_path`` is the single source of truth: each
immediate subdirectory is a running function bundle holding ``config.json``.
A co-located receiver's socket lives next to its bundle directory as
``<bundle>.sock``.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import DuplicateFunction, IoFailure, ScanFailure
from .funcspec import CONFIG_FILENAME, FunctionSpec, load_spec, serialize_spec

DEFAULT_RUNNING_PATH = Path("/run/cwasi")
SOCKET_SUFFIX = ".sock"


def socket_path_for(bundle_path: Path | str) -> Path:
    """Socket path convention: bundle path plus the socket suffix."""
    bundle_path = Path(bundle_path)
    return bundle_path.with_name(bundle_path.name + SOCKET_SUFFIX)


class RunningRegistry:
    """View over the running-path directory; no state is cached across calls."""

    def __init__(self, running_path: Path | str = DEFAULT_RUNNING_PATH):
        self.running_path = Path(running_path)
        if not self.running_path.is_dir():
            raise ScanFailure(f"running path is not a directory: {self.running_path}")

    def register(self, spec: FunctionSpec) -> Path:
        """Materialize the bundle under the running path; returns its path."""
        target = self.running_path / spec.bundle_path.name
        try:
            target.mkdir()
        except FileExistsError:
            raise DuplicateFunction(f"bundle already registered: {target.name}") from None
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        try:
            (target / CONFIG_FILENAME).write_bytes(serialize_spec(spec))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return target

    def unregister(self, bundle_name: str) -> None:
        target = self.running_path / bundle_name
        config = target / CONFIG_FILENAME
        if config.exists():
            config.unlink()
        if target.is_dir():
            try:
                target.rmdir()
            except OSError:
                # leftover files other than the config; remove best-effort
                for child in target.iterdir():
                    child.unlink()
                target.rmdir()

    def _bundle_dirs(self) -> list[Path]:
        try:
            entries = sorted(os.listdir(self.running_path))
        except OSError as exc:
            raise ScanFailure(f"cannot scan {self.running_path}: {exc}") from exc
        return [self.running_path / e for e in entries if (self.running_path / e).is_dir()]

    def ifc_selection(self, target_type: str) -> Path | None:
        """Resolve a target function type to a co-located socket path.

        Scans bundles in lexicographic order; the first config listing
        ``target_type`` in its args wins. Returns None when the target is
        not running locally. Unreadable or malformed configs are skipped.
        """
        if not target_type:
            raise ValueError("target_type must be non-empty")
        for bundle in self._bundle_dirs():
            try:
                spec = load_spec(bundle)
            except Exception:
                continue
            if target_type in spec.args:
                return socket_path_for(bundle)
        return None

    def lookup_spec(self, target_type: str) -> FunctionSpec | None:
        """Like ifc_selection but returns the matching spec itself."""
        for bundle in self._bundle_dirs():
            try:
                spec = load_spec(bundle)
            except Exception:
                continue
            if target_type in spec.args:
                return spec
        return None
