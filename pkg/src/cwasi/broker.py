"""Networked buffer: a bundled pub/sub broker and its request/reply client.

Frame layout (bit-exact): u32-BE total length, u8 opcode (0x01 PUBLISH,
0x02 SUBSCRIBE, 0x03 MESSAGE), u16-BE queue length, queue (UTF-8), payload.
Delivery is at-most-once: a PUBLISH fans out to current subscribers and is
dropped when there are none.

Request/reply is layered on top: a request body carries the reply-queue name
(u16-BE length prefix) followed by the payload; the receiver publishes the
handler output to that reply queue. Reply queues are named
``<source>.reply.<correlation-id>`` so concurrent requests never cross.
"""

from __future__ import annotations

import contextlib
import socket
import struct
import threading
import uuid
from dataclasses import dataclass
from typing import Callable

from .errors import (
    BindFailure,
    BrokerUnreachable,
    FrameTooLarge,
    ProtocolError,
    RequestTimeout,
)
from .localbuffer import MAX_FRAME_SIZE, _recv_exact

OP_PUBLISH = 0x01
OP_SUBSCRIBE = 0x02
OP_MESSAGE = 0x03

DEFAULT_BROKER_ADDR = ("127.0.0.1", 7077)
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class BrokerFrame:
    opcode: int
    queue: str
    payload: bytes = b""


def encode_broker_frame(frame: BrokerFrame, max_frame: int = MAX_FRAME_SIZE) -> bytes:
    queue = frame.queue.encode("utf-8")
    if not queue or len(queue) > 0xFFFF:
        raise ProtocolError("queue name must be 1-65535 bytes")
    body = bytes([frame.opcode]) + struct.pack(">H", len(queue)) + queue + frame.payload
    if len(body) > max_frame:
        raise FrameTooLarge(f"{len(body)} bytes exceeds max frame {max_frame}")
    return struct.pack(">I", len(body)) + body


def decode_broker_frame(data: bytes) -> BrokerFrame:
    if len(data) < 7:
        raise ProtocolError("broker frame shorter than its fixed header")
    (total,) = struct.unpack(">I", data[:4])
    if total != len(data) - 4:
        raise ProtocolError(f"total_length {total} but body has {len(data) - 4} bytes")
    opcode = data[4]
    (qlen,) = struct.unpack(">H", data[5:7])
    if 7 + qlen > len(data):
        raise ProtocolError("queue name runs past the frame")
    try:
        queue = data[7:7 + qlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError("queue name is not UTF-8") from exc
    return BrokerFrame(opcode=opcode, queue=queue, payload=bytes(data[7 + qlen:]))


def _read_broker_frame(sock: socket.socket, max_frame: int = MAX_FRAME_SIZE) -> BrokerFrame:
    header = _recv_exact(sock, 4)
    (total,) = struct.unpack(">I", header)
    if total > max_frame:
        raise FrameTooLarge(f"peer announced {total} byte frame")
    return decode_broker_frame(header + _recv_exact(sock, total))


def encode_request(reply_queue: str, payload: bytes) -> bytes:
    """Request envelope carried as a MESSAGE payload on the target queue."""
    raw = reply_queue.encode("utf-8")
    if not raw or len(raw) > 0xFFFF:
        raise ProtocolError("reply queue name must be 1-65535 bytes")
    return struct.pack(">H", len(raw)) + raw + payload


def decode_request(body: bytes) -> tuple[str, bytes]:
    if len(body) < 2:
        raise ProtocolError("request body shorter than its header")
    (n,) = struct.unpack(">H", body[:2])
    if 2 + n > len(body) or n == 0:
        raise ProtocolError("bad reply queue length")
    return body[2:2 + n].decode("utf-8"), bytes(body[2 + n:])


class Broker:
    """TCP pub/sub broker: SUBSCRIBE registers, PUBLISH fans out MESSAGEs."""

    def __init__(self, bind_address: tuple[str, int] = DEFAULT_BROKER_ADDR):
        self._subs: dict[str, list[socket.socket]] = {}
        self._send_locks: dict[socket.socket, threading.Lock] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._server.bind(bind_address)
        except OSError as exc:
            self._server.close()
            raise BindFailure(f"cannot bind {bind_address}: {exc}") from exc
        self._server.listen(256)
        self.address = self._server.getsockname()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def subscriber_count(self, queue: str) -> int:
        with self._lock:
            return len(self._subs.get(queue, []))

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        queues: list[str] = []
        self._send_locks[conn] = threading.Lock()
        try:
            while True:
                try:
                    frame = _read_broker_frame(conn)
                except (ProtocolError, RequestTimeout, OSError):
                    break
                if frame.opcode == OP_SUBSCRIBE:
                    with self._lock:
                        self._subs.setdefault(frame.queue, []).append(conn)
                    queues.append(frame.queue)
                elif frame.opcode == OP_PUBLISH:
                    self._deliver(frame.queue, frame.payload)
                # other opcodes from clients are ignored
        finally:
            with self._lock:
                for q in queues:
                    with contextlib.suppress(ValueError, KeyError):
                        self._subs[q].remove(conn)
            self._send_locks.pop(conn, None)
            with contextlib.suppress(OSError):
                conn.close()

    def _deliver(self, queue: str, payload: bytes) -> None:
        with self._lock:
            targets = list(self._subs.get(queue, []))
        data = encode_broker_frame(BrokerFrame(OP_MESSAGE, queue, payload))
        for conn in targets:
            lock = self._send_locks.get(conn)
            if lock is None:
                continue
            with contextlib.suppress(OSError):
                with lock:
                    conn.sendall(data)

    def close(self) -> None:
        self._closed.set()
        with contextlib.suppress(OSError):
            self._server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def broker_serve(bind_address: tuple[str, int] = DEFAULT_BROKER_ADDR) -> Broker:
    return Broker(bind_address)


def _connect(broker_addr: tuple[str, int], timeout: float | None = None) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.settimeout(timeout)
        sock.connect(tuple(broker_addr))
    except OSError as exc:
        sock.close()
        raise BrokerUnreachable(f"cannot reach broker at {broker_addr}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class NetworkReceiver:
    """Subscription answering request envelopes on a function's queue."""

    def __init__(
        self,
        broker_addr: tuple[str, int],
        function_name: str,
        handler: Callable[[bytes], bytes],
    ):
        self.queue = function_name
        self.handler = handler
        self._closed = threading.Event()
        self._sock = _connect(broker_addr)
        self._sock.sendall(encode_broker_frame(BrokerFrame(OP_SUBSCRIBE, function_name)))
        self._send_lock = threading.Lock()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        while not self._closed.is_set():
            try:
                frame = _read_broker_frame(self._sock)
            except (ProtocolError, RequestTimeout, OSError):
                break
            if frame.opcode != OP_MESSAGE or frame.queue != self.queue:
                continue
            try:
                reply_queue, payload = decode_request(frame.payload)
            except (ProtocolError, UnicodeDecodeError):
                continue  # malformed request: discard, stay subscribed
            try:
                reply = self.handler(payload)
            except Exception:
                continue
            out = encode_broker_frame(BrokerFrame(OP_PUBLISH, reply_queue, reply))
            with contextlib.suppress(OSError):
                with self._send_lock:
                    self._sock.sendall(out)

    def close(self) -> None:
        self._closed.set()
        # shutdown first so the reader thread unblocks and the broker sees EOF
        with contextlib.suppress(OSError):
            self._sock.shutdown(socket.SHUT_RDWR)
        with contextlib.suppress(OSError):
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def network_receiver(
    broker_addr: tuple[str, int],
    function_name: str,
    handler: Callable[[bytes], bytes],
) -> NetworkReceiver:
    return NetworkReceiver(broker_addr, function_name, handler)


def publish_request(
    broker_addr: tuple[str, int],
    target: str,
    payload: bytes,
    timeout: float = DEFAULT_TIMEOUT,
    source: str = "client",
) -> bytes:
    """Publish to the target queue and block for the correlated reply."""
    correlation = uuid.uuid4().hex
    reply_queue = f"{source}.reply.{correlation}"
    sock = _connect(broker_addr, timeout)
    try:
        # SUBSCRIBE first on the same connection; the broker processes frames
        # per connection in order, so the reply queue exists before publishing.
        sock.sendall(encode_broker_frame(BrokerFrame(OP_SUBSCRIBE, reply_queue)))
        request = encode_request(reply_queue, payload)
        sock.sendall(encode_broker_frame(BrokerFrame(OP_PUBLISH, target, request)))
        while True:
            try:
                frame = _read_broker_frame(sock)
            except RequestTimeout:
                raise RequestTimeout(
                    f"no reply from {target!r} within {timeout}s"
                ) from None
            if frame.opcode == OP_MESSAGE and frame.queue == reply_queue:
                return frame.payload
    finally:
        sock.close()
