"""Synchronous request/reply between co-located shims over Unix sockets.

Wire format: one frame per message, a 4-byte big-endian length prefix
followed by the body. A receiver owns its socket file for exactly as long as
it is live; one-shot receivers shut down and unlink the file after the first
reply is sent, persistent receivers serve until closed.
"""

from __future__ import annotations

import contextlib
import os
import socket
import struct
import threading
from pathlib import Path
from typing import Callable

from .errors import (
    AddressInUse,
    ConnectRefused,
    FrameTooLarge,
    IoFailure,
    ProtocolError,
    RequestTimeout,
)
from .registry import socket_path_for

MAX_FRAME_SIZE = 256 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0


def encode_frame(body: bytes, max_frame: int = MAX_FRAME_SIZE) -> bytes:
    if len(body) > max_frame:
        raise FrameTooLarge(f"{len(body)} bytes exceeds max frame {max_frame}")
    return struct.pack(">I", len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
        except socket.timeout:
            raise RequestTimeout("timed out waiting for frame bytes") from None
        if not chunk:
            raise ProtocolError(f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket, max_frame: int = MAX_FRAME_SIZE) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > max_frame:
        raise FrameTooLarge(f"peer announced {length} byte frame, max is {max_frame}")
    return _recv_exact(sock, length)


def decode_frame(data: bytes) -> bytes:
    if len(data) < 4:
        raise ProtocolError("frame shorter than its length prefix")
    (length,) = struct.unpack(">I", data[:4])
    if len(data) - 4 != length:
        raise ProtocolError(f"prefix says {length} bytes, body has {len(data) - 4}")
    return data[4:]


def _unlink_if_stale(path: Path) -> None:
    """Remove a leftover socket file when nothing is listening behind it."""
    if not path.exists():
        return
    probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        probe.settimeout(0.2)
        probe.connect(str(path))
    except (ConnectionRefusedError, socket.timeout, OSError):
        with contextlib.suppress(OSError):
            path.unlink()
    else:
        probe.close()
        raise AddressInUse(f"live receiver already bound at {path}")
    finally:
        probe.close()


class LocalReceiver:
    """Socket server answering one frame per request via a handler."""

    def __init__(
        self,
        socket_path: Path,
        handler: Callable[[bytes], bytes],
        *,
        one_shot: bool = True,
        max_frame: int = MAX_FRAME_SIZE,
    ):
        self.socket_path = Path(socket_path)
        self.handler = handler
        self.one_shot = one_shot
        self.max_frame = max_frame
        self._closed = threading.Event()
        _unlink_if_stale(self.socket_path)
        self._server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self._server.bind(str(self.socket_path))
        except OSError as exc:
            self._server.close()
            if exc.errno == 98:  # EADDRINUSE
                raise AddressInUse(str(self.socket_path)) from exc
            raise IoFailure(f"cannot bind {self.socket_path}: {exc}") from exc
        self._server.listen(128)
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    @property
    def is_live(self) -> bool:
        return not self._closed.is_set()

    def _serve(self) -> None:
        try:
            while not self._closed.is_set():
                try:
                    conn, _ = self._server.accept()
                except OSError:
                    break
                if self.one_shot:
                    self._handle(conn)
                    break
                threading.Thread(target=self._handle, args=(conn,), daemon=True).start()
        finally:
            self.close()

    def _handle(self, conn: socket.socket) -> None:
        with contextlib.suppress(ProtocolError, RequestTimeout, OSError):
            with conn:
                while True:
                    request = read_frame(conn, self.max_frame)
                    reply = self.handler(request)
                    conn.sendall(encode_frame(reply, self.max_frame))
                    if self.one_shot:
                        return

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        with contextlib.suppress(OSError):
            self._server.close()
        with contextlib.suppress(OSError):
            self.socket_path.unlink()

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def start_receiver(
    name: str,
    bundle_path: Path | str,
    handler: Callable[[bytes], bytes],
    *,
    one_shot: bool = True,
    max_frame: int = MAX_FRAME_SIZE,
) -> LocalReceiver:
    """Create the receiver socket at ``<bundle_path parent>/<name>.sock``."""
    bundle_path = Path(bundle_path)
    if bundle_path.name != name:
        bundle_path = bundle_path.parent / name
    return LocalReceiver(
        socket_path_for(bundle_path), handler, one_shot=one_shot, max_frame=max_frame
    )


def send(
    socket_path: Path | str,
    request: bytes,
    timeout: float = DEFAULT_TIMEOUT,
    max_frame: int = MAX_FRAME_SIZE,
) -> bytes:
    """Send one frame and block until the reply frame or the deadline."""
    if len(request) > max_frame:
        raise FrameTooLarge(f"{len(request)} bytes exceeds max frame {max_frame}")
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        sock.settimeout(timeout)
        try:
            sock.connect(str(socket_path))
        except (ConnectionRefusedError, FileNotFoundError) as exc:
            raise ConnectRefused(f"no receiver at {socket_path}") from exc
        except socket.timeout:
            raise RequestTimeout(f"connect to {socket_path} timed out") from None
        try:
            sock.sendall(encode_frame(request, max_frame))
            return read_frame(sock, max_frame)
        except (ConnectionResetError, BrokenPipeError) as exc:
            # the receiver went away mid-exchange (e.g. a one-shot shutting down)
            raise ConnectRefused(f"receiver at {socket_path} dropped the connection") from exc
    finally:
        sock.close()
