"""Function coordination: startup, mode selection, and request dispatch.

The coordinator wires the registry, snapshot store, engine, and transports
together. Secondary functions get a local-buffer receiver and a broker
subscription before any guest runs; primaries get import discovery,
embedding, and a started guest whose dispatch host import routes each request
over the socket when the target is co-located and through the broker
otherwise.

Replies surface to guests as one status byte (0 ok, 1 error) followed by the
body; the host call returns the packed span covering status plus body.
"""

from __future__ import annotations

import enum
from pathlib import Path

from . import broker as broker_mod
from . import linker, localbuffer
from .engine import DISPATCH_IMPORT, GuestInstance, GuestState
from .errors import CwasiError, DecodeError, EmptyName, StartupFailure, TruncatedEnvelope
from .events import EventLog
from .funcspec import MODE_KEY, FunctionSpec, Role, classify
from .memory import MemorySpan, decode_envelope, pack_span
from .registry import RunningRegistry


class CommunicationMode(enum.Enum):
    EMBEDDED = "embedded"
    LOCAL_BUFFER = "local"
    NETWORKED_BUFFER = "network"


class ModeHint(enum.Enum):
    FORCE_LOCAL = "local"
    FORCE_NETWORK = "network"
    FORCE_EMBED = "embedded"


def hint_from_spec(spec: FunctionSpec) -> ModeHint | None:
    raw = spec.annotations.get(MODE_KEY)
    if raw is None:
        return None
    try:
        return ModeHint(raw)
    except ValueError:
        return None


def select_mode(
    source: FunctionSpec,
    target_type: str,
    registry: RunningRegistry,
    hint: ModeHint | None = None,
    embeddable: bool = False,
) -> CommunicationMode:
    """Pick a communication mode; always returns one.

    Hints win when feasible: embedding needs an embeddable target, local
    needs co-location. Otherwise: embedded for trusted (same-namespace)
    co-located embeddable targets, local for co-located ones, network for
    the rest. Unreadable target configs count as untrusted.
    """
    co_located = registry.ifc_selection(target_type) is not None
    if hint is ModeHint.FORCE_EMBED and embeddable:
        return CommunicationMode.EMBEDDED
    if hint is ModeHint.FORCE_LOCAL and co_located:
        return CommunicationMode.LOCAL_BUFFER
    if hint is ModeHint.FORCE_NETWORK:
        return CommunicationMode.NETWORKED_BUFFER

    if embeddable and co_located:
        target_spec = registry.lookup_spec(target_type)
        if target_spec is not None and target_spec.namespace == source.namespace:
            return CommunicationMode.EMBEDDED
    if co_located:
        return CommunicationMode.LOCAL_BUFFER
    return CommunicationMode.NETWORKED_BUFFER


class RunningFunction:
    """Handle over a coordinated function: its receivers and guest instance."""

    def __init__(self, spec: FunctionSpec, role: Role):
        self.spec = spec
        self.role = role
        self.local_receiver: localbuffer.LocalReceiver | None = None
        self.network_receiver: broker_mod.NetworkReceiver | None = None
        self.instance: GuestInstance | None = None

    def wait(self, timeout: float | None = None):
        if self.instance is not None:
            return self.instance.wait(timeout)
        return None

    def kill(self) -> None:
        if self.local_receiver is not None:
            self.local_receiver.close()
        if self.network_receiver is not None:
            self.network_receiver.close()
        if self.instance is not None and self.instance.state is GuestState.RUNNING:
            self.instance.kill()

    stop = kill

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.kill()


class Coordinator:
    """Shared context for coordinating functions and dispatching requests."""

    def __init__(
        self,
        registry: RunningRegistry,
        engine,
        store: linker.SnapshotStore | None = None,
        broker_addr: tuple[str, int] = broker_mod.DEFAULT_BROKER_ADDR,
        event_log: EventLog | None = None,
        timeout: float = localbuffer.DEFAULT_TIMEOUT,
        one_shot_receivers: bool = True,
    ):
        self.registry = registry
        self.engine = engine
        self.store = store
        self.broker_addr = tuple(broker_addr)
        self.event_log = event_log or EventLog()
        self.timeout = timeout
        self.one_shot_receivers = one_shot_receivers
        # transport instrumentation: how many dispatches used each route
        self.counters = {"local": 0, "network": 0}

    # -- request dispatch --------------------------------------------------------

    def host_imports(self) -> dict:
        return {DISPATCH_IMPORT: self.host_dispatch}

    def host_dispatch(self, instance: GuestInstance, ptr: int, length: int) -> int:
        """The guest-facing dispatch import: route, await reply, return span."""
        raw = instance.read_span(MemorySpan(ptr, length))
        try:
            env = decode_envelope(raw)
        except (TruncatedEnvelope, EmptyName) as exc:
            raise DecodeError(f"guest supplied a bad envelope: {exc}") from exc

        socket_path = self.registry.ifc_selection(env.target)
        try:
            if socket_path is not None:
                self.counters["local"] += 1
                self.event_log.emit(env.source, "dispatch", CommunicationMode.LOCAL_BUFFER.value)
                reply = localbuffer.send(socket_path, env.payload, timeout=self.timeout)
            else:
                self.counters["network"] += 1
                self.event_log.emit(env.source, "dispatch", CommunicationMode.NETWORKED_BUFFER.value)
                reply = broker_mod.publish_request(
                    self.broker_addr, env.target, env.payload,
                    timeout=self.timeout, source=env.source,
                )
            status = b"\x00"
        except CwasiError as exc:
            status = b"\x01"
            reply = str(exc).encode("utf-8")
        span = instance.write_bytes(status + reply)
        return pack_span(span)

    # -- startup -----------------------------------------------------------------

    def coordinate(self, spec: FunctionSpec) -> RunningFunction:
        role = classify(spec)
        running = RunningFunction(spec, role)
        try:
            if role is Role.SECONDARY:
                self._start_secondary(spec, running)
            else:
                self._start_primary(spec, running)
        except CwasiError:
            running.kill()
            raise
        except Exception as exc:
            running.kill()
            raise StartupFailure(f"cannot start {spec.name}: {exc}") from exc
        return running

    def _guest_handler(self, spec: FunctionSpec):
        """Run the guest once per received message; its output is the reply."""

        def handle(payload: bytes) -> bytes:
            self.event_log.emit(spec.name, "guest-created")
            instance = self.engine.instantiate(
                spec.artifact_path,
                host_imports=self.host_imports(),
                input_=payload,
                name=spec.name,
            )
            self.event_log.emit(spec.name, "guest-start")
            instance.start()
            instance.wait()
            self.event_log.emit(spec.name, "guest-finished")
            return instance.output or b""

        return handle

    def _start_secondary(self, spec: FunctionSpec, running: RunningFunction) -> None:
        handler = self._guest_handler(spec)
        running.network_receiver = broker_mod.network_receiver(
            self.broker_addr, spec.name, handler
        )
        self.event_log.emit(spec.name, "receiver-started", CommunicationMode.NETWORKED_BUFFER.value)
        bundle = self.registry.running_path / spec.bundle_name
        running.local_receiver = localbuffer.start_receiver(
            spec.name, bundle, handler, one_shot=self.one_shot_receivers
        )
        self.event_log.emit(spec.name, "receiver-started", CommunicationMode.LOCAL_BUFFER.value)

    def _start_primary(self, spec: FunctionSpec, running: RunningFunction) -> None:
        artifact = spec.artifact_path
        if artifact.suffix in (".wat", ".wasm"):
            imports = linker.imports_for_artifact(artifact)
        else:
            imports = set(self.engine.load_module(artifact).imports)
        extras: list[Path] = []
        if self.store is not None:
            extras = linker.discover_embeddings(imports, self.store)
        instance = linker.embed_modules(
            artifact,
            extras,
            self.engine,
            host_imports=self.host_imports(),
            name=spec.name,
        )
        running.instance = instance
        self.event_log.emit(
            spec.name,
            "guest-created",
            CommunicationMode.EMBEDDED.value if extras else None,
        )
        instance.start()
        self.event_log.emit(spec.name, "guest-start")
