"""Benchmark command line: run a workload pattern and emit CSV results."""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

from . import bench
from .coordinator import CommunicationMode
from .errors import InfraUnavailable

_MODE_NAMES = {
    "embedded": CommunicationMode.EMBEDDED,
    "local": CommunicationMode.LOCAL_BUFFER,
    "network": CommunicationMode.NETWORKED_BUFFER,
}


def parse_size(text: str) -> int:
    """Byte count with optional K/M suffix, e.g. '2M' or '512K'."""
    text = text.strip()
    multiplier = 1
    if text[-1:].upper() == "K":
        multiplier, text = 1024, text[:-1]
    elif text[-1:].upper() == "M":
        multiplier, text = 1024 * 1024, text[:-1]
    return int(text) * multiplier


def parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cwasi-bench",
        description="Measure inter-function communication latency and throughput.",
    )
    p.add_argument("pattern", choices=[pt.value for pt in bench.Pattern])
    p.add_argument("--mode", choices=sorted(_MODE_NAMES), default="local")
    p.add_argument("--size", type=parse_size, default=2 * 1024 * 1024,
                   help="payload size in bytes, K/M suffix allowed (default 2M)")
    p.add_argument("--degree", type=int, default=1, help="fan-out/fan-in width")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out", default="results.csv")
    p.add_argument("--broker", type=parse_hostport, default=("127.0.0.1", 7077),
                   metavar="HOST:PORT")
    p.add_argument("--external-broker", action="store_true",
                   help="connect to an already-running broker instead of starting one")
    p.add_argument("--running-path", default=None,
                   help="directory for local-buffer sockets (default: temp dir)")
    p.add_argument("--handler", choices=sorted(bench.HANDLERS), default="echo")
    p.add_argument("--one-shot", action="store_true",
                   help="use one-shot receivers (new receiver per request)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    pattern = bench.Pattern(args.pattern)
    mode = _MODE_NAMES[args.mode]
    cfg = bench.WorkloadConfig(
        pattern=pattern, mode=mode, payload_size=args.size,
        degree=args.degree, iterations=args.iterations, warmup=args.warmup,
    )
    handler = bench.HANDLERS[args.handler]
    running_dir = Path(args.running_path) if args.running_path else None
    tmpdir = None
    if mode is CommunicationMode.LOCAL_BUFFER and running_dir is None:
        tmpdir = tempfile.TemporaryDirectory(prefix="cwasi-bench-")
        running_dir = Path(tmpdir.name)

    records = []
    status = 0
    try:
        with bench.build_session(
            mode, handler, degree=cfg.degree,
            running_dir=running_dir, broker_addr=args.broker,
            own_broker=not args.external_broker, one_shot=args.one_shot,
        ) as session, bench.ResourceSampler(os.getpid()) as sampler:
            records = bench.RUNNERS[pattern](cfg, session, sampler)
    except InfraUnavailable as exc:
        print(f"infrastructure failure: {exc}", file=sys.stderr)
        status = 1
    finally:
        if records:
            bench.emit_csv(records, args.out)
            print(f"{len(records)} records -> {args.out}")
        if tmpdir is not None:
            tmpdir.cleanup()
    if records:
        lat = bench.median_latency(records)
        print(f"median latency {lat * 1000:.3f} ms, "
              f"median throughput {bench.median([r.throughput_rps for r in records]):.1f} rps")
    return status


if __name__ == "__main__":
    sys.exit(main())
