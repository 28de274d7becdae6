"""End-to-end acceptance checks for the communication runtime.

Each test prints one PASS/FAIL line so the suite doubles as a report. The
performance checks compare modes relative to each other on the same host;
absolute numbers are hardware-bound and deliberately not asserted.
"""

import json
import random
import statistics
import sys
import time

import pytest

from conftest import build_import_only_wasm, make_spec, wat_for_imports, write_bundle
from cwasi.bench import (
    Pattern,
    WorkloadConfig,
    build_session,
    handler_checksum_tag,
    median_latency,
    run_fanout,
    run_sequential,
    throughput,
)
from cwasi.broker import Broker, BrokerFrame, decode_broker_frame, encode_broker_frame, network_receiver
from cwasi.coordinator import CommunicationMode, Coordinator
from cwasi.engine import NativeEngine, NativeModule
from cwasi.errors import ZeroElapsed
from cwasi.funcspec import ROLE_KEY
from cwasi.linker import SnapshotStore, discover_embeddings, parse_binary_imports, scan_text_imports
from cwasi.localbuffer import LocalReceiver, decode_frame, encode_frame, send
from cwasi.memory import (
    DispatchEnvelope,
    MemorySpan,
    decode_envelope,
    encode_envelope,
    pack_span,
    unpack_span,
)
from cwasi.registry import RunningRegistry

MB = 1024 * 1024


@pytest.fixture
def report(request):
    """One PASS/FAIL line per criterion, visible even under output capture."""
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def _report(name, ok, detail=""):
        tail = f" ({detail})" if detail else ""
        line = f"[{'PASS' if ok else 'FAIL'}] {name}{tail}"
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line, file=sys.stderr, flush=True)
        assert ok, line

    return _report


def rand_name(rng):
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789-._"
    return "".join(rng.choice(alphabet) for _ in range(rng.randrange(1, 32)))


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.005)
    return False


def sequential_medians(mode, payload_size, tmp_path, iterations=10, warmup=2, degree=1):
    cfg = WorkloadConfig(
        Pattern.SEQUENTIAL, mode, payload_size=payload_size,
        degree=degree, iterations=iterations, warmup=warmup,
    )
    with build_session(
        mode, lambda p: p, degree=degree,
        running_dir=tmp_path, broker_addr=("127.0.0.1", 0),
    ) as session:
        return median_latency(run_sequential(cfg, session))


def test_mode_ordering(tmp_path, report):
    """Co-located modes must beat the broker path at 2 MB echo payloads."""
    results = {
        mode: sequential_medians(mode, 2 * MB, tmp_path)
        for mode in (
            CommunicationMode.NETWORKED_BUFFER,
            CommunicationMode.LOCAL_BUFFER,
            CommunicationMode.EMBEDDED,
        )
    }
    local = results[CommunicationMode.LOCAL_BUFFER]
    network = results[CommunicationMode.NETWORKED_BUFFER]
    embedded = results[CommunicationMode.EMBEDDED]
    detail = f"embedded {embedded:.6f}s local {local:.6f}s network {network:.6f}s"
    report("mode-ordering", local <= 0.5 * network and embedded <= local, detail)


def test_correctness_equivalence(tmp_path, report):
    """All three modes return byte-identical results for every handler."""
    rng = random.Random(2024)
    sizes = [0, 8 * MB] + [rng.randrange(0, 8 * MB + 1) for _ in range(48)]
    handlers = {
        "echo": lambda p: p,
        "reverse": lambda p: p[::-1],
        "checksum-tag": handler_checksum_tag,
    }
    mismatches = 0
    for hname, handler in handlers.items():
        (tmp_path / hname).mkdir(exist_ok=True)
        sessions = [
            build_session(mode, handler, running_dir=tmp_path / hname,
                          broker_addr=("127.0.0.1", 0))
            for mode in (CommunicationMode.EMBEDDED,
                         CommunicationMode.LOCAL_BUFFER,
                         CommunicationMode.NETWORKED_BUFFER)
        ]
        try:
            for size in sizes:
                payload = rng.randbytes(size)
                expected = handler(payload)
                for s in sessions:
                    if s.roundtrip(payload) != expected:
                        mismatches += 1
        finally:
            for s in sessions:
                s.close()
    report("correctness-equivalence", mismatches == 0,
           f"{len(sizes)} payloads x {len(handlers)} handlers x 3 modes")


def _oracle_selection(running_path, target):
    """Straight directory walk mirroring the documented selection contract."""
    best = None
    for bundle in sorted(running_path.iterdir()):
        config = bundle / "config.json"
        if not config.is_file():
            continue
        try:
            doc = json.loads(config.read_text())
            args = doc["args"]
        except (ValueError, KeyError, TypeError):
            continue
        if isinstance(args, list) and target in args and best is None:
            best = bundle
    if best is None:
        return None
    return best.parent / (best.name + ".sock")


def test_selection_oracle(tmp_path, report):
    rng = random.Random(11)
    names = [f"fn{i:02d}" for i in range(25)]
    checked = 0
    failures = 0
    for trial in range(200):
        root = tmp_path / f"layout{trial}"
        root.mkdir()
        registry = RunningRegistry(root)
        for name in rng.sample(names, rng.randrange(0, 21)):
            kind = rng.random()
            bundle = root / name
            bundle.mkdir()
            if kind < 0.1:
                pass  # bundle without config
            elif kind < 0.2:
                (bundle / "config.json").write_text("{not json")
            else:
                args = [name] + rng.sample(names, rng.randrange(0, 3))
                (bundle / "config.json").write_text(json.dumps({"args": args, "annotations": {}}))
        for target in rng.sample(names, 5) + ["absent-fn"]:
            checked += 1
            if registry.ifc_selection(target) != _oracle_selection(root, target):
                failures += 1
    report("selection-oracle", failures == 0, f"{checked} lookups over 200 layouts")


def _oracle_discovery(imports, root):
    wanted = {module for module, _ in imports if module != "cwasi"}
    hits = set()
    for p in root.rglob("*"):
        if p.is_file() and p.stem in wanted:
            hits.add(p)
        elif p.is_dir() and p.name in wanted:
            hits.add(p)
    return sorted(hits)


def test_discovery_oracle(tmp_path, report):
    rng = random.Random(5)
    stems = [f"mod{i}" for i in range(15)] + ["cwasi"]
    failures = 0
    for trial in range(100):
        root = tmp_path / f"store{trial}"
        root.mkdir()
        for stem in rng.sample(stems, rng.randrange(0, 10)):
            if rng.random() < 0.3:
                nested = root / "deep"
                nested.mkdir(exist_ok=True)
                (nested / f"{stem}.wasm").write_bytes(b"")
            else:
                (root / f"{stem}.wasm").write_bytes(b"")
        imports = {
            (rng.choice(stems), f"item{rng.randrange(4)}")
            for _ in range(rng.randrange(0, 6))
        }
        got = discover_embeddings(imports, SnapshotStore(root))
        if got != _oracle_discovery(imports, root):
            failures += 1

    # dual-encoded fixtures: the same import set in binary and text form
    agreements = 0
    for trial in range(12):
        imports = sorted({
            (f"m{rng.randrange(6)}", f"f{rng.randrange(6)}")
            for _ in range(rng.randrange(0, 7))
        })
        binary = parse_binary_imports(build_import_only_wasm(imports))
        text = scan_text_imports(wat_for_imports(imports))
        if binary == text == set(imports):
            agreements += 1
    report("discovery-oracle", failures == 0 and agreements == 12,
           f"100 store pairs, {agreements} dual-encoded fixtures agree")


def test_startup_observability(tmp_path, report):
    """Receivers exist before any guest event; embedding yields one instance."""
    running = tmp_path / "run"
    running.mkdir()
    registry = RunningRegistry(running)
    engine = NativeEngine()
    engine.register_module(NativeModule(name="fnb", run=lambda inst: inst.input_bytes()))
    ok = True
    with Broker(("127.0.0.1", 0)) as broker:
        coord = Coordinator(registry, engine, broker_addr=broker.address,
                            timeout=5, one_shot_receivers=False)
        spec = make_spec(running / "fnb", ["fnb"], {ROLE_KEY: "secondary"})
        with coord.coordinate(spec):
            ok &= (running / "fnb.sock").exists()
            ok &= wait_for(lambda: broker.subscriber_count("fnb") == 1)
            ok &= coord.event_log.named("guest-created", "fnb") == []
            send(running / "fnb.sock", b"ping")
        events = [e.event for e in coord.event_log.events if e.function == "fnb"]
        ok &= events[:2] == ["receiver-started", "receiver-started"]
        ok &= events[2:] == ["guest-created", "guest-start", "guest-finished"]

        # primary with an embeddable import: exactly one guest instance
        snapshot = tmp_path / "snapshot"
        snapshot.mkdir()
        (snapshot / "fn_utils.wasm").write_bytes(b"")
        engine.register_module(
            NativeModule(name="fn_utils", exports={"ping": lambda inst: 1})
        )
        engine.register_module(
            NativeModule(name="fna", imports=(("fn_utils", "ping"),))
        )
        coord2 = Coordinator(registry, engine, store=SnapshotStore(snapshot),
                             broker_addr=broker.address)
        with coord2.coordinate(make_spec(running / "fna", ["fna"])) as rf:
            rf.wait(5)
        created = coord2.event_log.named("guest-created", "fna")
        ok &= len(created) == 1 and created[0].mode == "embedded"
    report("startup-observability", ok)


def test_dispatch_branching(tmp_path, report):
    """Local registration routes over the socket; unregistered goes to the broker."""
    running = tmp_path / "run"
    running.mkdir()
    registry = RunningRegistry(running)
    with Broker(("127.0.0.1", 0)) as broker:
        coord = Coordinator(registry, NativeEngine(), broker_addr=broker.address, timeout=5)
        inst = NativeEngine().instantiate(NativeModule(name="probe"))

        def dispatch(payload):
            span = inst.write_bytes(encode_envelope(DispatchEnvelope("fna", "fnb", payload)))
            packed = coord.host_dispatch(inst, span.pointer, span.length)
            return inst.read_span(unpack_span(packed))

        bundle = write_bundle(running, "fnb", ["fnb"])
        with LocalReceiver(bundle.with_name("fnb.sock"), lambda p: p, one_shot=False):
            reply = dispatch(b"one")
        after_local = dict(coord.counters)
        registry.unregister("fnb")
        with network_receiver(broker.address, "fnb", lambda p: p):
            wait_for(lambda: broker.subscriber_count("fnb") == 1)
            reply2 = dispatch(b"two")
        ok = (
            reply == b"\x00one" and reply2 == b"\x00two"
            and after_local == {"local": 1, "network": 0}
            and coord.counters == {"local": 1, "network": 1}
        )
    report("dispatch-branching", ok, f"counters {coord.counters}")


def test_roundtrip_identities(report):
    """10,000 randomized round-trips per codec, zero failures allowed."""
    rng = random.Random(0xC0DEC)
    cases = 10_000
    failures = {"frame": 0, "broker-frame": 0, "envelope": 0, "span": 0}

    for _ in range(cases):
        body = rng.randbytes(rng.randrange(0, 512))
        if decode_frame(encode_frame(body)) != body:
            failures["frame"] += 1

    opcodes = (1, 2, 3)
    for _ in range(cases):
        frame = BrokerFrame(
            rng.choice(opcodes),
            rand_name(rng),
            rng.randbytes(rng.randrange(0, 256)),
        )
        if decode_broker_frame(encode_broker_frame(frame)) != frame:
            failures["broker-frame"] += 1

    for _ in range(cases):
        env = DispatchEnvelope(
            rand_name(rng),
            rand_name(rng),
            rng.randbytes(rng.randrange(0, 256)),
        )
        if decode_envelope(encode_envelope(env)) != env:
            failures["envelope"] += 1

    for _ in range(cases):
        span = MemorySpan(rng.randrange(0, 2 ** 32), rng.randrange(0, 2 ** 32))
        if unpack_span(pack_span(span)) != span:
            failures["span"] += 1

    report("roundtrip-identities", all(v == 0 for v in failures.values()),
           f"{cases} cases per codec, failures {failures}")


def test_lifecycle_hygiene(tmp_path, report):
    """Kill removes the socket and the name stays re-bindable, 20 cycles."""
    running = tmp_path / "run"
    running.mkdir()
    registry = RunningRegistry(running)
    engine = NativeEngine()
    engine.register_module(NativeModule(name="fnb", run=lambda inst: inst.input_bytes()))
    ok = True
    with Broker(("127.0.0.1", 0)) as broker:
        coord = Coordinator(registry, engine, broker_addr=broker.address,
                            timeout=5, one_shot_receivers=False)
        spec = make_spec(running / "fnb", ["fnb"], {ROLE_KEY: "secondary"})
        for cycle in range(20):
            rf = coord.coordinate(spec)
            ok &= (running / "fnb.sock").exists()
            ok &= send(running / "fnb.sock", b"alive") == b"alive"
            rf.kill()
            ok &= not (running / "fnb.sock").exists()
            if not ok:
                break
    report("lifecycle-hygiene", ok, "20 kill/restart cycles")


def test_scaling_shape(tmp_path, report):
    """Local sequential latency grows linearly with payload size."""
    sizes = [1, 2, 4, 8, 16, 32, 64]
    medians = [
        sequential_medians(CommunicationMode.LOCAL_BUFFER, s * MB, tmp_path,
                           iterations=7, warmup=2)
        for s in sizes
    ]
    r_squared = statistics.correlation([float(s) for s in sizes], medians) ** 2
    report("scaling-shape", r_squared >= 0.9, f"R^2 {r_squared:.4f}")


def fanout_median(degree, tmp_path):
    cfg = WorkloadConfig(Pattern.FAN_OUT, CommunicationMode.LOCAL_BUFFER,
                         payload_size=2 * MB, degree=degree, warmup=2)
    run_dir = tmp_path / f"deg{degree}"
    run_dir.mkdir()
    with build_session(CommunicationMode.LOCAL_BUFFER, lambda p: p,
                       degree=degree, running_dir=run_dir) as session:
        return median_latency(run_fanout(cfg, session))


def test_fanout_stability(tmp_path, report):
    m10 = fanout_median(10, tmp_path)
    m100 = fanout_median(100, tmp_path)
    report("fanout-stability", m100 <= 3 * m10,
           f"degree-10 {m10:.6f}s degree-100 {m100:.6f}s")


def test_throughput_rule(tmp_path, report):
    ok = throughput(10, 0.5) == 20.0
    with pytest.raises(ZeroElapsed):
        throughput(1, 0)
    cfg = WorkloadConfig(Pattern.SEQUENTIAL, CommunicationMode.EMBEDDED,
                         payload_size=1024, iterations=20, warmup=1)
    records = run_sequential(cfg, build_session(CommunicationMode.EMBEDDED, lambda p: p))
    for r in records:
        ok &= r.throughput_rps == throughput(1, r.latency_s)
    report("throughput-rule", ok, f"{len(records)} records recomputed")
