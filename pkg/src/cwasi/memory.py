"""Guest memory spans, scalar span packing, and dispatch envelopes.

Guest ABIs only move numbers, so complex data crosses the boundary as a
(pointer, length) pair addressing bytes in guest linear memory. A span packs
into one u64 as ``(pointer << 32) | length`` so host calls can return it as a
single scalar.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import EmptyName, TruncatedEnvelope

U32_MAX = 0xFFFFFFFF


@dataclass(frozen=True)
class MemorySpan:
    pointer: int
    length: int

    def __post_init__(self):
        if not (0 <= self.pointer <= U32_MAX):
            raise ValueError(f"pointer out of u32 range: {self.pointer}")
        if not (0 <= self.length <= U32_MAX):
            raise ValueError(f"length out of u32 range: {self.length}")

    @property
    def end(self) -> int:
        return self.pointer + self.length


def pack_span(span: MemorySpan) -> int:
    return (span.pointer << 32) | span.length


def unpack_span(word: int) -> MemorySpan:
    if not (0 <= word <= 0xFFFFFFFFFFFFFFFF):
        raise ValueError(f"packed span out of u64 range: {word}")
    return MemorySpan(pointer=word >> 32, length=word & U32_MAX)


@dataclass(frozen=True)
class DispatchEnvelope:
    """Source name, target function type, and payload exchanged at dispatch."""

    source: str
    target: str
    payload: bytes = b""


def _check_name(name: str, what: str) -> bytes:
    if not name or "\x00" in name:
        raise EmptyName(f"{what} must be non-empty and NUL-free")
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise EmptyName(f"{what} exceeds 65535 bytes")
    return raw


def encode_envelope(env: DispatchEnvelope) -> bytes:
    """Layout: u16-BE |source|, source, u16-BE |target|, target, payload."""
    src = _check_name(env.source, "source")
    tgt = _check_name(env.target, "target")
    return struct.pack(">H", len(src)) + src + struct.pack(">H", len(tgt)) + tgt + env.payload


def decode_envelope(data: bytes) -> DispatchEnvelope:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedEnvelope(f"need {n} bytes at offset {pos}, have {len(data) - pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    names = []
    for what in ("source", "target"):
        (n,) = struct.unpack(">H", take(2))
        raw = take(n)
        if not raw or b"\x00" in raw:
            raise EmptyName(f"{what} must be non-empty and NUL-free")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise TruncatedEnvelope(f"{what} is not UTF-8") from exc
    return DispatchEnvelope(source=names[0], target=names[1], payload=bytes(data[pos:]))
