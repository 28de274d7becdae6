"""Function specifications: OCI-style bundle configs and role classification.

A bundle is a directory holding ``config.json`` plus the module artifact named
by ``args[0]``. Recognized top-level config keys are ``args`` and
``annotations``; every other key is carried verbatim in ``extra_fields`` so a
config survives a parse/serialize round trip byte-for-byte in content.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import MalformedConfig, MissingArgs

CONFIG_FILENAME = "config.json"

# Annotation contract: presence of ROLE_KEY marks a function as secondary;
# NAMESPACE_KEY carries the trust domain; MODE_KEY carries a dispatch hint.
ROLE_KEY = "cwasi/role"
ROLE_SECONDARY = "secondary"
NAMESPACE_KEY = "cwasi/namespace"
MODE_KEY = "cwasi/mode"
DEFAULT_NAMESPACE = "default"


class Role(enum.Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"


@dataclass(frozen=True)
class FunctionSpec:
    """Parsed bundle config.

    ``args[0]`` is the function name / module artifact file name. The
    namespace is derived from annotations, defaulting when absent.
    """

    args: tuple[str, ...]
    annotations: dict[str, str] = field(default_factory=dict)
    bundle_path: Path = Path("/")
    extra_fields: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.args:
            raise MissingArgs("args must be non-empty")
        if not self.bundle_path.is_absolute():
            raise ValueError(f"bundle_path must be absolute: {self.bundle_path}")

    @property
    def name(self) -> str:
        return self.args[0]

    @property
    def bundle_name(self) -> str:
        return self.bundle_path.name

    @property
    def namespace(self) -> str:
        return self.annotations.get(NAMESPACE_KEY, DEFAULT_NAMESPACE)

    @property
    def artifact_path(self) -> Path:
        return self.bundle_path / self.args[0]

    def __eq__(self, other):
        if not isinstance(other, FunctionSpec):
            return NotImplemented
        return (
            self.args == other.args
            and self.annotations == other.annotations
            and self.bundle_path == other.bundle_path
            and self.extra_fields == other.extra_fields
        )

    def __hash__(self):
        return hash((self.args, tuple(sorted(self.annotations.items())), self.bundle_path))


def parse_spec(config_bytes: bytes, bundle_path: Path | str) -> FunctionSpec:
    """Parse a config document into a FunctionSpec.

    Unknown top-level keys are preserved in ``extra_fields``.
    """
    try:
        doc = json.loads(config_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedConfig(f"not a valid config document: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedConfig("config root must be an object")

    args = doc.get("args", [])
    if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
        raise MalformedConfig("args must be a list of strings")
    if not args:
        raise MissingArgs("config has no args")

    annotations = doc.get("annotations", {})
    if not isinstance(annotations, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in annotations.items()
    ):
        raise MalformedConfig("annotations must be a string map")

    extra = {k: v for k, v in doc.items() if k not in ("args", "annotations")}
    return FunctionSpec(
        args=tuple(args),
        annotations=dict(annotations),
        bundle_path=Path(bundle_path),
        extra_fields=extra,
    )


def serialize_spec(spec: FunctionSpec) -> bytes:
    """Serialize so that ``parse_spec(serialize_spec(s), s.bundle_path) == s``."""
    doc: dict[str, Any] = {"args": list(spec.args), "annotations": dict(spec.annotations)}
    doc.update(spec.extra_fields)
    return json.dumps(doc, indent=2).encode("utf-8")


def classify(spec: FunctionSpec) -> Role:
    """Secondary iff the role annotation key is present; pure and deterministic."""
    return Role.SECONDARY if ROLE_KEY in spec.annotations else Role.PRIMARY


def load_spec(bundle_path: Path | str) -> FunctionSpec:
    """Read and parse ``<bundle_path>/config.json``."""
    bundle_path = Path(bundle_path)
    return parse_spec((bundle_path / CONFIG_FILENAME).read_bytes(), bundle_path)
