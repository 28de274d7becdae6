"""Locality-aware inter-function communication runtime.

Three communication modes between serverless-style functions: embedded
(co-instantiated modules in one guest address space), local buffer
(Unix-socket request/reply between co-located shims), and networked buffer
(pub/sub request/reply through a broker), plus the coordination, selection,
and dispatch machinery and a benchmark harness.
"""

from .coordinator import CommunicationMode, Coordinator, ModeHint, select_mode
from .engine import NativeEngine, NativeModule
from .funcspec import FunctionSpec, Role, classify, parse_spec, serialize_spec
from .memory import DispatchEnvelope, MemorySpan, pack_span, unpack_span
from .registry import RunningRegistry
from .wasmvm import WasmEngine

__all__ = [
    "CommunicationMode",
    "Coordinator",
    "DispatchEnvelope",
    "FunctionSpec",
    "MemorySpan",
    "ModeHint",
    "NativeEngine",
    "NativeModule",
    "Role",
    "RunningRegistry",
    "WasmEngine",
    "classify",
    "pack_span",
    "parse_spec",
    "select_mode",
    "serialize_spec",
    "unpack_span",
]

__version__ = "0.1.0"
