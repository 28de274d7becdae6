"""Benchmark harness: sequential, fan-out, and fan-in workloads per mode.

Latency is measured on a monotonic clock at the sender, from dispatch-call
entry to reply availability. Throughput is requests over elapsed seconds,
extrapolated to a one-second rate when a batch finishes faster than that.
Warmup rounds run but are never recorded.

Fan-out and fan-in issue concurrent dispatches through a bounded in-flight
window so per-request latency reflects service time rather than queue depth.
"""

from __future__ import annotations

import concurrent.futures
import csv
import enum
import os
import statistics
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import psutil

from . import broker as broker_mod
from . import localbuffer
from .coordinator import CommunicationMode
from .engine import DISPATCH_IMPORT, NativeEngine, NativeModule
from .errors import (
    AddressInUse,
    BindFailure,
    BrokerUnreachable,
    ConnectRefused,
    CwasiError,
    InfraUnavailable,
    IoFailure,
    Unsupported,
    ZeroElapsed,
)
from .memory import MemorySpan, pack_span

CSV_HEADER = [
    "pattern", "mode", "payload_size", "degree", "iteration",
    "latency_s", "throughput_rps", "cpu_percent", "rss_kb", "timestamp",
]

MAX_INFLIGHT = 16
SAMPLE_INTERVAL = 0.1


class Pattern(enum.Enum):
    SEQUENTIAL = "sequential"
    FAN_OUT = "fanout"
    FAN_IN = "fanin"


@dataclass(frozen=True)
class WorkloadConfig:
    pattern: Pattern
    mode: CommunicationMode
    payload_size: int = 2 * 1024 * 1024
    degree: int = 1
    iterations: int = 10
    warmup: int = 2

    def __post_init__(self):
        if self.payload_size < 0:
            raise ValueError("payload_size must be >= 0")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class BenchRecord:
    pattern: str
    mode: str
    payload_size: int
    degree: int
    iteration: int
    latency_s: float
    throughput_rps: float
    cpu_percent: float | None
    rss_kb: float | None
    timestamp: float


def throughput(requests: int, elapsed: float) -> float:
    """Requests per second over the elapsed window."""
    if elapsed <= 0:
        raise ZeroElapsed(f"elapsed must be positive, got {elapsed}")
    return requests / elapsed


def sample_resources(pid: int | None = None) -> tuple[float, float]:
    """Best-effort (cpu_percent, rss_kb) snapshot for a process."""
    try:
        proc = psutil.Process(pid) if pid is not None else psutil.Process()
        cpu = proc.cpu_percent(interval=None)
        rss_kb = proc.memory_info().rss / 1024.0
    except (psutil.NoSuchProcess, psutil.AccessDenied, OSError) as exc:
        raise Unsupported(f"no process stats for pid {pid}: {exc}") from exc
    return cpu, rss_kb


class ResourceSampler:
    """Background sampler; .latest holds the most recent (cpu, rss_kb)."""

    def __init__(self, pid: int | None = None, interval: float = SAMPLE_INTERVAL):
        self.latest: tuple[float | None, float | None] = (None, None)
        self._interval = interval
        self._pid = pid
        self._stop = threading.Event()
        try:
            sample_resources(pid)  # prime cpu_percent deltas
        except Unsupported:
            pass
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self):
        while not self._stop.wait(self._interval):
            try:
                self.latest = sample_resources(self._pid)
            except Unsupported:
                self.latest = (None, None)

    def close(self):
        self._stop.set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- reference payload handlers -------------------------------------------------

def handler_echo(payload: bytes) -> bytes:
    return payload


def handler_reverse(payload: bytes) -> bytes:
    return payload[::-1]


def handler_checksum_tag(payload: bytes) -> bytes:
    return payload + zlib.crc32(payload).to_bytes(4, "big")


HANDLERS = {
    "echo": handler_echo,
    "reverse": handler_reverse,
    "checksum-tag": handler_checksum_tag,
}


# -- mode sessions ----------------------------------------------------------------

class ModeSession:
    """Provisioned infrastructure for one mode: N targets answering requests."""

    mode: CommunicationMode

    def roundtrip(self, payload: bytes, target: int = 0) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalSession(ModeSession):
    mode = CommunicationMode.LOCAL_BUFFER

    def __init__(self, handler, running_dir: Path, degree: int = 1,
                 one_shot: bool = False, timeout: float = localbuffer.DEFAULT_TIMEOUT):
        self.running_dir = Path(running_dir)
        self.timeout = timeout
        self.one_shot = one_shot
        self.handler = handler
        self._paths = [self.running_dir / f"bench-target-{i}.sock" for i in range(degree)]
        try:
            self._receivers = [
                localbuffer.LocalReceiver(p, handler, one_shot=one_shot) for p in self._paths
            ]
        except (AddressInUse, IoFailure) as exc:
            raise InfraUnavailable(str(exc)) from exc

    def roundtrip(self, payload: bytes, target: int = 0) -> bytes:
        try:
            return localbuffer.send(self._paths[target], payload, timeout=self.timeout)
        except ConnectRefused:
            if not self.one_shot:
                raise InfraUnavailable(f"receiver {target} is gone") from None
        # one-shot receivers go away after each reply; restart on demand. The
        # previous receiver may still be tearing down, so tolerate short races.
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                self._receivers[target] = localbuffer.LocalReceiver(
                    self._paths[target], self.handler, one_shot=True
                )
            except AddressInUse:
                if time.monotonic() > deadline:
                    raise InfraUnavailable(f"receiver {target} stuck in teardown") from None
                time.sleep(0.002)
                continue
            try:
                return localbuffer.send(self._paths[target], payload, timeout=self.timeout)
            except ConnectRefused:
                if time.monotonic() > deadline:
                    raise InfraUnavailable(f"receiver {target} keeps vanishing") from None

    def close(self):
        for r in self._receivers:
            r.close()


class NetworkSession(ModeSession):
    mode = CommunicationMode.NETWORKED_BUFFER

    def __init__(self, handler, broker_addr=broker_mod.DEFAULT_BROKER_ADDR,
                 degree: int = 1, own_broker: bool = True,
                 timeout: float = broker_mod.DEFAULT_TIMEOUT):
        self.timeout = timeout
        self._broker = None
        if own_broker:
            try:
                self._broker = broker_mod.broker_serve(tuple(broker_addr))
                broker_addr = self._broker.address
            except BindFailure as exc:
                raise InfraUnavailable(str(exc)) from exc
        self.broker_addr = tuple(broker_addr)
        self._queues = [f"bench-target-{i}" for i in range(degree)]
        try:
            self._receivers = [
                broker_mod.network_receiver(self.broker_addr, q, handler)
                for q in self._queues
            ]
        except BrokerUnreachable as exc:
            raise InfraUnavailable(str(exc)) from exc

    def roundtrip(self, payload: bytes, target: int = 0) -> bytes:
        try:
            return broker_mod.publish_request(
                self.broker_addr, self._queues[target], payload, timeout=self.timeout
            )
        except BrokerUnreachable as exc:
            raise InfraUnavailable(str(exc)) from exc

    def close(self):
        for r in self._receivers:
            r.close()
        if self._broker is not None:
            self._broker.close()


class EmbeddedSession(ModeSession):
    """Targets are exports of modules embedded in one shared address space."""

    mode = CommunicationMode.EMBEDDED

    def __init__(self, handler, degree: int = 1):
        def apply(inst, ptr, length):
            body = inst.read_span(MemorySpan(ptr, length))
            return pack_span(inst.write_bytes(handler(body)))

        engine = NativeEngine()
        extras = []
        imports = []
        for i in range(degree):
            extras.append(NativeModule(name=f"bench_target_{i}", exports={"apply": apply}))
            imports.append((f"bench_target_{i}", "apply"))
        primary = NativeModule(name="bench_source", imports=tuple(imports))
        self._instance = engine.instantiate(
            primary, extras=extras, host_imports={DISPATCH_IMPORT: lambda *a: 0}
        )

    def roundtrip(self, payload: bytes, target: int = 0) -> bytes:
        inst = self._instance
        # all spans from the previous request are consumed, so reclaim the
        # heap instead of letting guest memory accrete across iterations
        inst.reset_heap()
        span = inst.write_bytes(payload)
        packed = inst.call_import(f"bench_target_{target}", "apply", span.pointer, span.length)
        return inst.read_packed(packed)


def build_session(
    mode: CommunicationMode,
    handler,
    degree: int = 1,
    *,
    running_dir: Path | None = None,
    broker_addr=broker_mod.DEFAULT_BROKER_ADDR,
    own_broker: bool = True,
    one_shot: bool = False,
) -> ModeSession:
    if mode is CommunicationMode.EMBEDDED:
        return EmbeddedSession(handler, degree)
    if mode is CommunicationMode.LOCAL_BUFFER:
        if running_dir is None:
            raise InfraUnavailable("local mode needs a running directory")
        return LocalSession(handler, running_dir, degree, one_shot=one_shot)
    return NetworkSession(handler, broker_addr, degree, own_broker=own_broker)


# -- workload runners -------------------------------------------------------------

def _make_payload(size: int) -> bytes:
    if size == 0:
        return b""
    chunk = os.urandom(min(size, 1 << 20))
    reps = -(-size // len(chunk))
    return (chunk * reps)[:size]


def _record(cfg, iteration, latency, rps, sampler, ts) -> BenchRecord:
    cpu, rss = sampler.latest if sampler else (None, None)
    return BenchRecord(
        pattern=cfg.pattern.value, mode=cfg.mode.value,
        payload_size=cfg.payload_size, degree=cfg.degree, iteration=iteration,
        latency_s=latency, throughput_rps=rps, cpu_percent=cpu, rss_kb=rss,
        timestamp=ts,
    )


def run_sequential(cfg: WorkloadConfig, session: ModeSession,
                   sampler: ResourceSampler | None = None) -> list[BenchRecord]:
    payload = _make_payload(cfg.payload_size)
    records = []
    for _ in range(cfg.warmup):
        session.roundtrip(payload)
    for i in range(cfg.iterations):
        t0 = time.perf_counter()
        session.roundtrip(payload)
        latency = time.perf_counter() - t0
        records.append(_record(cfg, i, latency, throughput(1, latency), sampler, time.time()))
    return records


def _concurrent_batch(cfg, session, sampler, targets: list[int]) -> list[BenchRecord]:
    payload = _make_payload(cfg.payload_size)

    def one(idx_target):
        idx, target = idx_target
        t0 = time.perf_counter()
        session.roundtrip(payload, target)
        return idx, time.perf_counter() - t0, time.time()

    workers = min(len(targets), MAX_INFLIGHT)
    batch_t0 = time.perf_counter()
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, enumerate(targets)))
    elapsed = time.perf_counter() - batch_t0
    rps = throughput(len(targets), elapsed)
    return [
        _record(cfg, idx, latency, rps, sampler, ts)
        for idx, latency, ts in sorted(results)
    ]


def run_fanout(cfg: WorkloadConfig, session: ModeSession,
               sampler: ResourceSampler | None = None) -> list[BenchRecord]:
    """One source issues cfg.degree concurrent dispatches, one per target."""
    for _ in range(cfg.warmup):
        session.roundtrip(b"warmup", 0)
    return _concurrent_batch(cfg, session, sampler, list(range(cfg.degree)))


def run_fanin(cfg: WorkloadConfig, session: ModeSession,
              sampler: ResourceSampler | None = None) -> list[BenchRecord]:
    """cfg.degree concurrent sources all dispatch to one receiver."""
    for _ in range(cfg.warmup):
        session.roundtrip(b"warmup", 0)
    return _concurrent_batch(cfg, session, sampler, [0] * cfg.degree)


RUNNERS = {
    Pattern.SEQUENTIAL: run_sequential,
    Pattern.FAN_OUT: run_fanout,
    Pattern.FAN_IN: run_fanin,
}


# -- output -------------------------------------------------------------------------

def emit_csv(records: list[BenchRecord], path: Path | str) -> Path:
    if not records:
        raise ValueError("refusing to emit an empty record set")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for r in records:
                writer.writerow([
                    r.pattern, r.mode, r.payload_size, r.degree, r.iteration,
                    repr(r.latency_s), repr(r.throughput_rps),
                    "" if r.cpu_percent is None else repr(r.cpu_percent),
                    "" if r.rss_kb is None else repr(r.rss_kb),
                    repr(r.timestamp),
                ])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path: Path | str) -> list[BenchRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(BenchRecord(
                pattern=row["pattern"], mode=row["mode"],
                payload_size=int(row["payload_size"]), degree=int(row["degree"]),
                iteration=int(row["iteration"]), latency_s=float(row["latency_s"]),
                throughput_rps=float(row["throughput_rps"]),
                cpu_percent=float(row["cpu_percent"]) if row["cpu_percent"] else None,
                rss_kb=float(row["rss_kb"]) if row["rss_kb"] else None,
                timestamp=float(row["timestamp"]),
            ))
    return records


def median(values: list[float]) -> float:
    if not values:
        raise ValueError("median of empty list")
    return statistics.median(values)


def median_latency(records: list[BenchRecord]) -> float:
    return median([r.latency_s for r in records])
