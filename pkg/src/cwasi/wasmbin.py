"""Binary module format helpers: LEB128, section walking, and a tiny builder.

Only what the runtime needs: decoding the import section from standard
binaries (magic ``\\0asm``, version 1) and assembling small fixture modules
for tests and the interpreter backend.
"""

from __future__ import annotations

import struct

from .errors import BadMagic, MalformedLeb128, TruncatedSection

MAGIC = b"\x00asm"
VERSION = b"\x01\x00\x00\x00"

SEC_TYPE = 1
SEC_IMPORT = 2
SEC_FUNCTION = 3
SEC_MEMORY = 5
SEC_GLOBAL = 6
SEC_EXPORT = 7
SEC_START = 8
SEC_CODE = 10
SEC_DATA = 11

KIND_FUNC = 0
KIND_TABLE = 1
KIND_MEM = 2
KIND_GLOBAL = 3


class Reader:
    """Cursor over module bytes with bounds-checked reads."""

    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def eof(self) -> bool:
        return self.pos >= self.end

    def bytes(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedSection(f"need {n} bytes at offset {self.pos}, have {self.end - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.bytes(1)[0]

    def leb_u32(self) -> int:
        result = shift = 0
        for _ in range(5):
            if self.pos >= self.end:
                raise MalformedLeb128("input ended inside a varint")
            b = self.data[self.pos]
            self.pos += 1
            result |= (b & 0x7F) << shift
            if not (b & 0x80):
                if result >= 1 << 32:
                    raise MalformedLeb128("u32 varint overflow")
                return result
            shift += 7
        raise MalformedLeb128("u32 varint longer than 5 bytes")

    def leb_s(self, bits: int) -> int:
        result = shift = 0
        limit = (bits + 6) // 7
        for _ in range(limit):
            if self.pos >= self.end:
                raise MalformedLeb128("input ended inside a varint")
            b = self.data[self.pos]
            self.pos += 1
            result |= (b & 0x7F) << shift
            shift += 7
            if not (b & 0x80):
                if shift < bits and (b & 0x40):
                    result |= -1 << shift
                return result
        raise MalformedLeb128(f"s{bits} varint too long")

    def name(self) -> str:
        n = self.leb_u32()
        raw = self.bytes(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TruncatedSection(f"name is not UTF-8: {exc}") from exc

    def limits(self) -> tuple[int, int | None]:
        flag = self.u8()
        lo = self.leb_u32()
        hi = self.leb_u32() if flag & 1 else None
        return lo, hi


def check_header(module_bytes: bytes) -> None:
    if module_bytes[:4] != MAGIC:
        raise BadMagic("missing \\0asm magic")
    if module_bytes[4:8] != VERSION:
        raise BadMagic(f"unsupported version {module_bytes[4:8]!r}")


def iter_sections(module_bytes: bytes):
    """Yield (section_id, Reader over the section body) pairs."""
    check_header(module_bytes)
    r = Reader(module_bytes, pos=8)
    while not r.eof():
        sec_id = r.u8()
        size = r.leb_u32()
        if r.pos + size > r.end:
            raise TruncatedSection(f"section {sec_id} declares {size} bytes past end of module")
        yield sec_id, Reader(module_bytes, pos=r.pos, end=r.pos + size)
        r.pos += size


def parse_imports(module_bytes: bytes) -> list[tuple[str, str, int, object]]:
    """Decode the import section: (module, name, kind, descriptor) entries."""
    for sec_id, body in iter_sections(module_bytes):
        if sec_id != SEC_IMPORT:
            continue
        count = body.leb_u32()
        entries = []
        for _ in range(count):
            module = body.name()
            item = body.name()
            kind = body.u8()
            if kind == KIND_FUNC:
                desc: object = body.leb_u32()
            elif kind == KIND_TABLE:
                body.u8()
                desc = body.limits()
            elif kind == KIND_MEM:
                desc = body.limits()
            elif kind == KIND_GLOBAL:
                body.u8()
                desc = body.u8()
            else:
                raise TruncatedSection(f"unknown import kind {kind}")
            entries.append((module, item, kind, desc))
        return entries
    return []


# -- encoding helpers ----------------------------------------------------------

def leb_u(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def leb_s(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        done = (n == 0 and not (b & 0x40)) or (n == -1 and (b & 0x40))
        out.append(b if done else b | 0x80)
        if done:
            return bytes(out)


def enc_name(s: str) -> bytes:
    raw = s.encode("utf-8")
    return leb_u(len(raw)) + raw


def _vec(items: list[bytes]) -> bytes:
    return leb_u(len(items)) + b"".join(items)


def _section(sec_id: int, body: bytes) -> bytes:
    return bytes([sec_id]) + leb_u(len(body)) + body


I32, I64, F32, F64 = 0x7F, 0x7E, 0x7D, 0x7C


class ModuleBuilder:
    """Assemble a minimal binary module (types, imports, funcs, memory, data)."""

    def __init__(self):
        self._types: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        self._imports: list[bytes] = []
        self._n_imported_funcs = 0
        self._funcs: list[tuple[int, list[int], bytes]] = []
        self._memory: tuple[int, int | None] | None = None
        self._exports: list[bytes] = []
        self._data: list[tuple[int, bytes]] = []

    def type_index(self, params: tuple[int, ...], results: tuple[int, ...]) -> int:
        sig = (tuple(params), tuple(results))
        if sig not in self._types:
            self._types.append(sig)
        return self._types.index(sig)

    def import_func(self, module: str, name: str, params=(), results=()) -> int:
        if self._funcs:
            raise ValueError("imports must be added before local functions")
        ti = self.type_index(tuple(params), tuple(results))
        self._imports.append(enc_name(module) + enc_name(name) + bytes([KIND_FUNC]) + leb_u(ti))
        idx = self._n_imported_funcs
        self._n_imported_funcs += 1
        return idx

    def add_func(self, params=(), results=(), locals_=(), body: bytes = b"\x0b") -> int:
        ti = self.type_index(tuple(params), tuple(results))
        idx = self._n_imported_funcs + len(self._funcs)
        self._funcs.append((ti, list(locals_), body))
        return idx

    def add_memory(self, min_pages: int = 1, max_pages: int | None = None):
        self._memory = (min_pages, max_pages)

    def export_func(self, name: str, func_index: int):
        self._exports.append(enc_name(name) + bytes([KIND_FUNC]) + leb_u(func_index))

    def export_memory(self, name: str = "memory", mem_index: int = 0):
        self._exports.append(enc_name(name) + bytes([KIND_MEM]) + leb_u(mem_index))

    def add_data(self, offset: int, data: bytes):
        self._data.append((offset, data))

    def build(self) -> bytes:
        out = bytearray(MAGIC + VERSION)
        if self._types:
            types = [
                b"\x60" + _vec([bytes([t]) for t in p]) + _vec([bytes([t]) for t in r])
                for p, r in self._types
            ]
            out += _section(SEC_TYPE, _vec(types))
        if self._imports:
            out += _section(SEC_IMPORT, _vec(self._imports))
        if self._funcs:
            out += _section(SEC_FUNCTION, _vec([leb_u(ti) for ti, _, _ in self._funcs]))
        if self._memory is not None:
            lo, hi = self._memory
            lim = (b"\x01" + leb_u(lo) + leb_u(hi)) if hi is not None else (b"\x00" + leb_u(lo))
            out += _section(SEC_MEMORY, _vec([lim]))
        if self._exports:
            out += _section(SEC_EXPORT, _vec(self._exports))
        if self._funcs:
            bodies = []
            for _, locals_, body in self._funcs:
                decl = _vec([leb_u(1) + bytes([t]) for t in locals_])
                code = decl + body
                bodies.append(leb_u(len(code)) + code)
            out += _section(SEC_CODE, _vec(bodies))
        if self._data:
            segs = [
                leb_u(0) + b"\x41" + leb_s(off) + b"\x0b" + leb_u(len(d)) + d
                for off, d in self._data
            ]
            out += _section(SEC_DATA, _vec(segs))
        return bytes(out)


class Asm:
    """Opcode byte helpers for hand-written fixture function bodies."""

    @staticmethod
    def i32_const(n: int) -> bytes:
        return b"\x41" + leb_s(n)

    @staticmethod
    def i64_const(n: int) -> bytes:
        return b"\x42" + leb_s(n)

    @staticmethod
    def local_get(i: int) -> bytes:
        return b"\x20" + leb_u(i)

    @staticmethod
    def local_set(i: int) -> bytes:
        return b"\x21" + leb_u(i)

    @staticmethod
    def local_tee(i: int) -> bytes:
        return b"\x22" + leb_u(i)

    @staticmethod
    def call(i: int) -> bytes:
        return b"\x10" + leb_u(i)

    @staticmethod
    def i32_load(offset: int = 0) -> bytes:
        return b"\x28\x02" + leb_u(offset)

    @staticmethod
    def i32_store(offset: int = 0) -> bytes:
        return b"\x36\x02" + leb_u(offset)

    @staticmethod
    def i32_load8_u(offset: int = 0) -> bytes:
        return b"\x2d\x00" + leb_u(offset)

    @staticmethod
    def i32_store8(offset: int = 0) -> bytes:
        return b"\x3a\x00" + leb_u(offset)

    # fixed one-byte opcodes
    UNREACHABLE = b"\x00"
    NOP = b"\x01"
    BLOCK = b"\x02\x40"
    LOOP = b"\x03\x40"
    IF = b"\x04\x40"
    ELSE = b"\x05"
    END = b"\x0b"
    RETURN = b"\x0f"
    DROP = b"\x1a"
    I32_EQZ = b"\x45"
    I32_EQ = b"\x46"
    I32_NE = b"\x47"
    I32_LT_U = b"\x49"
    I32_GT_U = b"\x4b"
    I32_GE_U = b"\x4f"
    I32_ADD = b"\x6a"
    I32_SUB = b"\x6b"
    I32_MUL = b"\x6c"
    I32_AND = b"\x71"
    I32_OR = b"\x72"
    I32_XOR = b"\x73"
    I32_SHL = b"\x74"
    I32_SHR_U = b"\x76"
    I64_ADD = b"\x7c"
    I64_AND = b"\x83"
    I64_OR = b"\x84"
    I64_SHL = b"\x86"
    I64_SHR_U = b"\x88"
    I32_WRAP_I64 = b"\xa7"
    I64_EXTEND_I32_U = b"\xad"
    MEMORY_SIZE = b"\x3f\x00"
    MEMORY_GROW = b"\x40\x00"
    MEMORY_COPY = b"\xfc\x0a\x00\x00"

    @staticmethod
    def br(depth: int) -> bytes:
        return b"\x0c" + leb_u(depth)

    @staticmethod
    def br_if(depth: int) -> bytes:
        return b"\x0d" + leb_u(depth)


def pack_u32_le(n: int) -> bytes:
    return struct.pack("<I", n)
