"""Interpreter backend for binary guest modules.

Covers the instruction subset the guest ABI needs: i32/i64 arithmetic and
logic, linear memory access, structured control flow with void block types,
and calls (host imports, local functions, and functions exported by embedded
modules). Embedded modules share the primary's linear memory, so spans remain
valid across module boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import wasmbin
from .engine import GuestInstance
from .errors import EngineError, LinkError, TruncatedSection
from .linker import HOST_NAMESPACES
from .wasmbin import (
    KIND_FUNC,
    KIND_MEM,
    SEC_CODE,
    SEC_DATA,
    SEC_EXPORT,
    SEC_FUNCTION,
    SEC_IMPORT,
    SEC_MEMORY,
    SEC_TYPE,
    Reader,
)

PAGE = 65536
MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF

_BLOCK_OPS = (0x02, 0x03, 0x04)
_MEM_OPS = {
    0x28: ("load", 4), 0x29: ("load", 8), 0x2D: ("load", 1),
    0x36: ("store", 4), 0x37: ("store", 8), 0x3A: ("store", 1),
}


@dataclass
class FuncBody:
    locals_: list[int]
    instrs: list[tuple[int, object]]
    matching: dict[int, tuple[int, int | None]]  # block pc -> (end pc, else pc)


@dataclass
class ParsedModule:
    types: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)
    imports: list[tuple[str, str, int, object]] = field(default_factory=list)
    func_types: list[int] = field(default_factory=list)
    exports: dict[str, tuple[int, int]] = field(default_factory=dict)
    memory: tuple[int, int | None] | None = None
    code: list[FuncBody] = field(default_factory=list)
    data: list[tuple[int, bytes]] = field(default_factory=list)


def _decode_body(r: Reader) -> FuncBody:
    locals_: list[int] = []
    for _ in range(r.leb_u32()):
        count = r.leb_u32()
        ty = r.u8()
        locals_.extend([ty] * count)

    instrs: list[tuple[int, object]] = []
    open_blocks: list[tuple[int, int]] = []  # (opcode, pc)
    pending_else: dict[int, int] = {}

    while True:
        op = r.u8()
        pc = len(instrs)
        arg: object = None
        if op in _BLOCK_OPS:
            bt = r.u8()
            if bt != 0x40:
                raise EngineError("only void block types are supported")
            open_blocks.append((op, pc))
        elif op == 0x05:  # else
            if not open_blocks or open_blocks[-1][0] != 0x04:
                raise TruncatedSection("else without matching if")
            pending_else[open_blocks[-1][1]] = pc
        elif op == 0x0B:  # end
            if not open_blocks:
                return FuncBody(locals_, instrs, _match(instrs, pending_else))
            open_blocks.pop()
        elif op in (0x0C, 0x0D, 0x10, 0x20, 0x21, 0x22):
            arg = r.leb_u32()
        elif op in _MEM_OPS:
            r.leb_u32()  # align hint
            arg = r.leb_u32()
        elif op in (0x3F, 0x40):
            r.u8()
        elif op == 0x41:
            arg = r.leb_s(32)
        elif op == 0x42:
            arg = r.leb_s(64)
        elif op == 0xFC:
            sub = r.leb_u32()
            if sub == 10:  # memory.copy
                r.u8(); r.u8()
            elif sub == 11:  # memory.fill
                r.u8()
            else:
                raise EngineError(f"unsupported 0xfc opcode {sub}")
            op = 0xFC00 | sub
        elif op in (
            0x00, 0x01, 0x0F, 0x1A,
            0x45, 0x46, 0x47, 0x49, 0x4B, 0x4F,
            0x6A, 0x6B, 0x6C, 0x71, 0x72, 0x73, 0x74, 0x76,
            0x7C, 0x83, 0x84, 0x86, 0x88,
            0xA7, 0xAD,
        ):
            pass
        else:
            raise EngineError(f"unsupported opcode 0x{op:02x}")
        instrs.append((op, arg))


def _match(instrs, pending_else) -> dict[int, tuple[int, int | None]]:
    matching: dict[int, tuple[int, int | None]] = {}
    stack: list[int] = []
    for pc, (op, _) in enumerate(instrs):
        if op in _BLOCK_OPS:
            stack.append(pc)
        elif op == 0x0B:
            start = stack.pop()
            matching[start] = (pc, pending_else.get(start))
    return matching


def parse_module(module_bytes: bytes) -> ParsedModule:
    mod = ParsedModule()
    for sec_id, body in wasmbin.iter_sections(module_bytes):
        if sec_id == SEC_TYPE:
            for _ in range(body.leb_u32()):
                if body.u8() != 0x60:
                    raise TruncatedSection("expected func type tag")
                params = tuple(body.u8() for _ in range(body.leb_u32()))
                results = tuple(body.u8() for _ in range(body.leb_u32()))
                mod.types.append((params, results))
        elif sec_id == SEC_IMPORT:
            count = body.leb_u32()
            for _ in range(count):
                m, i = body.name(), body.name()
                kind = body.u8()
                if kind == KIND_FUNC:
                    desc: object = body.leb_u32()
                elif kind == KIND_MEM:
                    desc = body.limits()
                else:
                    raise EngineError(f"unsupported import kind {kind}")
                mod.imports.append((m, i, kind, desc))
        elif sec_id == SEC_FUNCTION:
            mod.func_types = [body.leb_u32() for _ in range(body.leb_u32())]
        elif sec_id == SEC_MEMORY:
            count = body.leb_u32()
            if count:
                mod.memory = body.limits()
        elif sec_id == SEC_EXPORT:
            for _ in range(body.leb_u32()):
                name = body.name()
                kind = body.u8()
                mod.exports[name] = (kind, body.leb_u32())
        elif sec_id == SEC_CODE:
            for _ in range(body.leb_u32()):
                size = body.leb_u32()
                mod.code.append(_decode_body(Reader(body.data, body.pos, body.pos + size)))
                body.pos += size
        elif sec_id == SEC_DATA:
            for _ in range(body.leb_u32()):
                flag = body.leb_u32()
                if flag != 0:
                    raise EngineError("only active data segments for memory 0 are supported")
                if body.u8() != 0x41:
                    raise EngineError("data offset must be a constant")
                offset = body.leb_s(32)
                if body.u8() != 0x0B:
                    raise EngineError("malformed data offset expression")
                mod.data.append((offset, body.bytes(body.leb_u32())))
    return mod


@dataclass
class ModuleEnv:
    parsed: ParsedModule
    funcs: list = field(default_factory=list)
    # entries: ("host", callable, n_params, n_results)
    #          ("local", body_index, type_index)
    #          ("xmod", other_env, func_index)


class WasmInstance(GuestInstance):
    """One guest built from a primary module plus embedded extras."""

    def __init__(
        self,
        primary_bytes: bytes,
        extras: list[tuple[str, bytes]] = (),
        *,
        host_imports: dict | None = None,
        input_: bytes = b"",
        name: str = "guest",
    ):
        host_imports = host_imports or {}
        primary = parse_module(primary_bytes)
        pages = primary.memory[0] if primary.memory else 1
        super().__init__(name=name, input_=input_, initial_memory=pages * PAGE)

        extra_envs: dict[str, ModuleEnv] = {}
        for extra_name, extra_bytes in extras:
            extra_envs[extra_name] = self._build_env(
                parse_module(extra_bytes), host_imports, {}
            )
        self._env = self._build_env(primary, host_imports, extra_envs)
        for mod in [primary] + [env.parsed for env in extra_envs.values()]:
            for offset, data in mod.data:
                if offset + len(data) > len(self.memory):
                    raise EngineError("data segment exceeds memory")
                self.memory[offset:offset + len(data)] = data
        self._finish_init()

    def _build_env(self, parsed: ParsedModule, host_imports, extra_envs) -> ModuleEnv:
        env = ModuleEnv(parsed)
        for m, i, kind, desc in parsed.imports:
            if kind == KIND_MEM:
                continue  # all modules share the instance memory
            params, results = parsed.types[desc]
            if m in HOST_NAMESPACES and (m, i) in host_imports:
                env.funcs.append(("host", host_imports[(m, i)], len(params), len(results)))
            elif m in extra_envs:
                target = extra_envs[m]
                exp = target.parsed.exports.get(i)
                if exp is None or exp[0] != KIND_FUNC:
                    raise LinkError(f"embedded module {m!r} has no function export {i!r}")
                env.funcs.append(("xmod", target, exp[1]))
            else:
                raise LinkError(f"unresolved import ({m!r}, {i!r})")
        for body_idx, type_idx in enumerate(parsed.func_types):
            env.funcs.append(("local", body_idx, type_idx))
        return env

    # -- execution ---------------------------------------------------------------

    def call_export(self, export: str, *args: int) -> list[int]:
        exp = self._env.parsed.exports.get(export)
        if exp is None or exp[0] != KIND_FUNC:
            raise EngineError(f"no function export {export!r}")
        return self._call(self._env, exp[1], list(args))

    def _execute(self):
        if "run" not in self._env.parsed.exports:
            return None
        results = self.call_export("run")
        return results[0] if results else None

    def _call(self, env: ModuleEnv, fidx: int, args: list[int]) -> list[int]:
        try:
            entry = env.funcs[fidx]
        except IndexError:
            raise EngineError(f"function index {fidx} out of range") from None
        tag = entry[0]
        if tag == "host":
            _, fn, _, n_results = entry
            res = fn(self, *args)
            if res is None:
                return []
            return [res & MASK64][:n_results] if n_results else []
        if tag == "xmod":
            return self._call(entry[1], entry[2], args)
        _, body_idx, type_idx = entry
        params, results = env.parsed.types[type_idx]
        body = env.parsed.code[body_idx]
        locals_ = list(args) + [0] * len(body.locals_)
        return self._exec_body(env, body, locals_, len(results))

    def _exec_body(self, env, body: FuncBody, locals_: list[int], n_results: int) -> list[int]:
        instrs = body.instrs
        matching = body.matching
        mem = self.memory
        stack: list[int] = []
        ctrl: list[tuple[int, int]] = []  # (branch target pc, stack height)
        pc = 0
        steps = 0
        n = len(instrs)
        while pc < n:
            steps += 1
            if not steps & 0x3FF:
                self.check_killed()
            op, arg = instrs[pc]
            if op == 0x41 or op == 0x42:  # const
                stack.append(arg & (MASK32 if op == 0x41 else MASK64))
            elif op == 0x20:
                stack.append(locals_[arg])
            elif op == 0x21:
                locals_[arg] = stack.pop()
            elif op == 0x22:
                locals_[arg] = stack[-1]
            elif op == 0x02:  # block
                ctrl.append((matching[pc][0] + 1, len(stack)))
            elif op == 0x03:  # loop
                ctrl.append((pc + 1, len(stack)))
            elif op == 0x04:  # if
                cond = stack.pop()
                end_pc, else_pc = matching[pc]
                if cond:
                    ctrl.append((end_pc + 1, len(stack)))
                elif else_pc is not None:
                    ctrl.append((end_pc + 1, len(stack)))
                    pc = else_pc
                else:
                    pc = end_pc
            elif op == 0x05:  # else: true branch done, pop frame and skip past end
                pc = ctrl.pop()[0] - 1
            elif op == 0x0B:  # end
                if ctrl:
                    ctrl.pop()
            elif op == 0x0C or op == 0x0D:  # br / br_if
                if op == 0x0D and not stack.pop():
                    pc += 1
                    continue
                target, height = ctrl[-1 - arg]
                # loops keep their frame (target points just past the loop op)
                keep = len(ctrl) - arg - (0 if instrs[target - 1][0] == 0x03 else 1)
                del ctrl[keep:]
                del stack[height:]
                pc = target
                continue
            elif op == 0x0F:  # return
                return stack[-n_results:] if n_results else []
            elif op == 0x10:  # call
                entry = env.funcs[arg]
                if entry[0] == "host":
                    n_params = entry[2]
                elif entry[0] == "xmod":
                    tgt = entry[1]
                    n_params = len(tgt.parsed.types[_type_of(tgt, entry[2])][0])
                else:
                    n_params = len(env.parsed.types[entry[2]][0])
                call_args = stack[len(stack) - n_params:] if n_params else []
                del stack[len(stack) - n_params:]
                stack.extend(self._call(env, arg, call_args))
            elif op == 0x1A:
                stack.pop()
            elif op in _MEM_OPS:
                what, width = _MEM_OPS[op]
                if what == "store":
                    val = stack.pop()
                    ea = (stack.pop() & MASK32) + arg
                    if ea + width > len(mem):
                        raise EngineError(f"store at {ea} out of bounds")
                    mem[ea:ea + width] = (val & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
                else:
                    ea = (stack.pop() & MASK32) + arg
                    if ea + width > len(mem):
                        raise EngineError(f"load at {ea} out of bounds")
                    stack.append(int.from_bytes(mem[ea:ea + width], "little"))
            elif op == 0x3F:  # memory.size
                stack.append(len(mem) // PAGE)
            elif op == 0x40:  # memory.grow
                pages = stack.pop()
                old = len(mem) // PAGE
                mem.extend(bytes(pages * PAGE))
                # keep host writes above the newly grown guest pages
                self._bump = max(self._bump, len(mem))
                stack.append(old)
            elif op == 0x45:
                stack.append(1 if stack.pop() == 0 else 0)
            elif op in (0x46, 0x47, 0x49, 0x4B, 0x4F):
                b, a = stack.pop(), stack.pop()
                if op == 0x46:
                    stack.append(1 if a == b else 0)
                elif op == 0x47:
                    stack.append(1 if a != b else 0)
                elif op == 0x49:
                    stack.append(1 if a < b else 0)
                elif op == 0x4B:
                    stack.append(1 if a > b else 0)
                else:
                    stack.append(1 if a >= b else 0)
            elif op in (0x6A, 0x6B, 0x6C, 0x71, 0x72, 0x73, 0x74, 0x76):
                b, a = stack.pop(), stack.pop()
                if op == 0x6A:
                    v = a + b
                elif op == 0x6B:
                    v = a - b
                elif op == 0x6C:
                    v = a * b
                elif op == 0x71:
                    v = a & b
                elif op == 0x72:
                    v = a | b
                elif op == 0x73:
                    v = a ^ b
                elif op == 0x74:
                    v = a << (b & 31)
                else:
                    v = (a & MASK32) >> (b & 31)
                stack.append(v & MASK32)
            elif op in (0x7C, 0x83, 0x84, 0x86, 0x88):
                b, a = stack.pop(), stack.pop()
                if op == 0x7C:
                    v = a + b
                elif op == 0x83:
                    v = a & b
                elif op == 0x84:
                    v = a | b
                elif op == 0x86:
                    v = a << (b & 63)
                else:
                    v = (a & MASK64) >> (b & 63)
                stack.append(v & MASK64)
            elif op == 0xA7:  # i32.wrap_i64
                stack.append(stack.pop() & MASK32)
            elif op == 0xAD:  # i64.extend_i32_u
                stack.append(stack.pop() & MASK32)
            elif op == 0xFC0A:  # memory.copy
                cnt, src, dst = stack.pop(), stack.pop(), stack.pop()
                if src + cnt > len(mem) or dst + cnt > len(mem):
                    raise EngineError("memory.copy out of bounds")
                mem[dst:dst + cnt] = mem[src:src + cnt]
            elif op == 0xFC0B:  # memory.fill
                cnt, val, dst = stack.pop(), stack.pop(), stack.pop()
                if dst + cnt > len(mem):
                    raise EngineError("memory.fill out of bounds")
                mem[dst:dst + cnt] = bytes([val & 0xFF]) * cnt
            elif op == 0x00:
                raise EngineError("unreachable executed")
            elif op == 0x01:
                pass
            else:
                raise EngineError(f"unhandled opcode 0x{op:02x}")
            pc += 1
        return stack[-n_results:] if n_results else []


def _type_of(env: ModuleEnv, fidx: int) -> int:
    entry = env.funcs[fidx]
    if entry[0] == "local":
        return entry[2]
    raise EngineError("cross-module call target must be a local function")


class WasmEngine:
    """Engine backend executing binary modules in the interpreter."""

    def load_module(self, path: Path | str) -> bytes:
        return Path(path).read_bytes()

    def instantiate(
        self,
        primary,
        extras=(),
        *,
        host_imports: dict | None = None,
        input_: bytes = b"",
        name: str | None = None,
    ) -> WasmInstance:
        if isinstance(primary, (str, Path)):
            if name is None:
                name = Path(primary).stem
            primary = self.load_module(primary)
        resolved_extras = []
        for extra in extras:
            if isinstance(extra, (str, Path)):
                resolved_extras.append((Path(extra).stem, self.load_module(extra)))
            else:
                resolved_extras.append(extra)
        return WasmInstance(
            primary,
            resolved_extras,
            host_imports=host_imports,
            input_=input_,
            name=name or "guest",
        )
