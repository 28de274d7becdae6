"""Guest execution backends and the guest<->shim memory bridge.

Two backends implement the same surface: a native stub whose guests are
in-process callables registered by name, and an interpreter for binary
modules (see wasmvm). Both share one internal input convention: before start,
the engine stores the input pointer at memory address 0 and the input length
at address 4 (u32 little-endian each), with the input bytes placed by the
bump allocator. A guest's entry point takes no parameters and may return a
packed span addressing its output.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .errors import (
    AllocationFailure,
    BadState,
    BadTransition,
    EngineError,
    LinkError,
    OutOfBounds,
)
from .memory import MemorySpan, unpack_span

INPUT_PTR_ADDR = 0
INPUT_LEN_ADDR = 4
HEAP_BASE = 64

DISPATCH_IMPORT = ("cwasi", "dispatch")

MAX_GUEST_MEMORY = 1 << 32


class GuestState(enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    FINISHED = "finished"
    KILLED = "killed"


class GuestKilled(Exception):
    """Raised inside a guest thread when the instance was killed."""


class GuestInstance:
    """A single guest with its own linear memory and lifecycle.

    Confined to one executor thread; host calls made by the guest run
    synchronously on that thread. Memory is a bytearray extended in place so
    spans stay valid across host writes.
    """

    def __init__(self, name: str = "guest", input_: bytes = b"", initial_memory: int = HEAP_BASE):
        self.name = name
        self.memory = bytearray(max(initial_memory, HEAP_BASE))
        self.output: bytes | None = None
        self.error: BaseException | None = None
        self._state = GuestState.CREATED
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._cleanups: list[Callable[[], None]] = []
        self._killed = threading.Event()
        self._bump = len(self.memory)
        self._input_span: MemorySpan | None = None
        self._pending_input = input_

    def _finish_init(self) -> None:
        """Stage the input once backend memory initialization is done."""
        self._stage_input(self._pending_input)
        self._heap_floor = self._bump

    def reset_heap(self) -> None:
        """Drop everything written after init; memory capacity is kept.

        Spans handed out earlier become dangling, so only callers that own
        every outstanding span (e.g. a benchmark reusing one instance) may
        use this.
        """
        self._require_memory_access()
        with self._lock:
            self._bump = self._heap_floor

    # -- memory bridge --------------------------------------------------------

    @property
    def state(self) -> GuestState:
        return self._state

    @property
    def input_span(self) -> MemorySpan:
        assert self._input_span is not None
        return self._input_span

    def input_bytes(self) -> bytes:
        return self.read_span(self.input_span)

    def _stage_input(self, data: bytes) -> None:
        span = self.write_bytes(data)
        self.memory[INPUT_PTR_ADDR:INPUT_PTR_ADDR + 4] = struct.pack("<I", span.pointer)
        self.memory[INPUT_LEN_ADDR:INPUT_LEN_ADDR + 4] = struct.pack("<I", span.length)
        self._input_span = span

    def _require_memory_access(self):
        if self._state not in (GuestState.CREATED, GuestState.RUNNING):
            raise BadState(f"memory inaccessible in state {self._state.value}")

    def read_span(self, span: MemorySpan) -> bytes:
        self._require_memory_access()
        if span.end > len(self.memory):
            raise OutOfBounds(
                f"span [{span.pointer}, {span.end}) exceeds memory size {len(self.memory)}"
            )
        return bytes(memoryview(self.memory)[span.pointer:span.end])

    def write_bytes(self, data: bytes) -> MemorySpan:
        """Copy data into a fresh region above live guest data."""
        self._require_memory_access()
        with self._lock:
            start = self._bump
            start += (-start) % 8
            end = start + len(data)
            if end > MAX_GUEST_MEMORY:
                raise AllocationFailure(f"guest memory would exceed {MAX_GUEST_MEMORY} bytes")
            try:
                if start > len(self.memory):
                    self.memory.extend(bytes(start - len(self.memory)))
                if start == len(self.memory):
                    self.memory.extend(data)
                else:
                    if end > len(self.memory):
                        self.memory.extend(bytes(end - len(self.memory)))
                    self.memory[start:end] = data
            except MemoryError as exc:
                raise AllocationFailure(str(exc)) from exc
            self._bump = end
            return MemorySpan(pointer=start, length=len(data))

    def read_packed(self, word: int) -> bytes:
        return self.read_span(unpack_span(word))

    # -- lifecycle --------------------------------------------------------------

    def add_cleanup(self, fn: Callable[[], None]) -> None:
        self._cleanups.append(fn)

    def _run_cleanups(self) -> None:
        cleanups, self._cleanups = self._cleanups, []
        for fn in reversed(cleanups):
            try:
                fn()
            except Exception:
                pass

    def start(self) -> GuestState:
        with self._lock:
            if self._state is not GuestState.CREATED:
                raise BadTransition(f"cannot start from {self._state.value}")
            self._state = GuestState.RUNNING
        self._thread = threading.Thread(target=self._thread_main, daemon=True)
        self._thread.start()
        return self._state

    def _thread_main(self) -> None:
        try:
            out = self._execute()
            if isinstance(out, int):
                out = self.read_packed(out)
        except GuestKilled:
            return
        except BaseException as exc:  # surfaced via .error and wait()
            self.error = exc
            out = None
        with self._lock:
            if self._state is GuestState.RUNNING:
                self.output = out
                self._state = GuestState.FINISHED
        self._run_cleanups()

    def wait(self, timeout: float | None = None) -> GuestState:
        if self._state is GuestState.CREATED:
            raise BadTransition("cannot wait on an unstarted instance")
        if self._thread is not None:
            self._thread.join(timeout)
        if self.error is not None:
            raise EngineError(f"guest {self.name} failed: {self.error}") from self.error
        return self._state

    def kill(self) -> GuestState:
        with self._lock:
            if self._state in (GuestState.FINISHED, GuestState.KILLED):
                raise BadTransition(f"cannot kill from {self._state.value}")
            self._state = GuestState.KILLED
        self._killed.set()
        self._run_cleanups()
        return self._state

    def delete(self) -> None:
        if self._state not in (GuestState.FINISHED, GuestState.KILLED):
            raise BadTransition(f"cannot delete from {self._state.value}")
        self.memory = bytearray(0)

    def check_killed(self) -> None:
        if self._killed.is_set():
            raise GuestKilled(self.name)

    # -- backend hook -----------------------------------------------------------

    def _execute(self) -> bytes | int | None:
        raise NotImplementedError


# -- native stub backend ---------------------------------------------------------

@dataclass
class NativeModule:
    """An in-process guest: a run entry plus optional named exports.

    ``run`` receives the instance and may return output bytes or a packed
    span. Export callables take (instance, *int args) and return an int or
    None, mirroring the scalar-only guest ABI.
    """

    name: str
    run: Callable | None = None
    imports: tuple[tuple[str, str], ...] = ()
    exports: dict[str, Callable] = field(default_factory=dict)


class NativeInstance(GuestInstance):
    def __init__(self, module: NativeModule, imports, input_: bytes = b""):
        super().__init__(name=module.name, input_=input_)
        self.module = module
        self.imports = imports  # {(module, item): callable(instance, *args)}
        self._finish_init()

    def call_import(self, module: str, item: str, *args: int):
        return self.imports[(module, item)](self, *args)

    def call_export(self, name: str, *args: int):
        fn = self.module.exports.get(name)
        if fn is None:
            raise EngineError(f"no export {name!r} in {self.module.name}")
        return fn(self, *args)

    def _execute(self):
        if self.module.run is None:
            return None
        return self.module.run(self)


class NativeEngine:
    """Backend whose modules are Python callables registered by name."""

    def __init__(self):
        self._modules: dict[str, NativeModule] = {}

    def register_module(self, module: NativeModule) -> None:
        self._modules[module.name] = module

    def load_module(self, path: Path | str) -> NativeModule:
        stem = Path(path).stem
        mod = self._modules.get(stem)
        if mod is None:
            raise EngineError(f"no native module registered for {stem!r}")
        return mod

    def _resolve(self, ref) -> NativeModule:
        if isinstance(ref, NativeModule):
            return ref
        return self.load_module(ref)

    def instantiate(
        self,
        primary,
        extras=(),
        *,
        host_imports: dict | None = None,
        input_: bytes = b"",
        name: str | None = None,
    ) -> NativeInstance:
        module = self._resolve(primary)
        host_imports = host_imports or {}
        extra_modules = {m.name: m for m in (self._resolve(e) for e in extras)}
        resolved = {}
        for mod_name, item in module.imports:
            if (mod_name, item) in host_imports:
                resolved[(mod_name, item)] = host_imports[(mod_name, item)]
            elif mod_name in extra_modules and item in extra_modules[mod_name].exports:
                resolved[(mod_name, item)] = extra_modules[mod_name].exports[item]
            else:
                raise LinkError(f"unresolved import ({mod_name!r}, {item!r})")
        return NativeInstance(
            module, resolved, input_=input_
        )
