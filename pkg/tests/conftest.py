import json

import pytest

from cwasi.engine import DISPATCH_IMPORT, NativeModule
from cwasi.funcspec import FunctionSpec
from cwasi.registry import RunningRegistry
from cwasi.wasmbin import I32, I64, Asm, ModuleBuilder


def make_spec(bundle_path, args, annotations=None, extra=None):
    return FunctionSpec(
        args=tuple(args),
        annotations=dict(annotations or {}),
        bundle_path=bundle_path,
        extra_fields=dict(extra or {}),
    )


def write_bundle(running_path, name, args, annotations=None):
    """Materialize a bundle directory directly, bypassing the registry."""
    bundle = running_path / name
    bundle.mkdir()
    doc = {"args": list(args), "annotations": dict(annotations or {})}
    (bundle / "config.json").write_text(json.dumps(doc))
    return bundle


@pytest.fixture
def running_path(tmp_path):
    p = tmp_path / "run"
    p.mkdir()
    return p


@pytest.fixture
def registry(running_path):
    return RunningRegistry(running_path)


# -- binary module fixtures -----------------------------------------------------

def build_echo_wasm() -> bytes:
    """Guest returning its input span: output == input."""
    b = ModuleBuilder()
    b.add_memory(1)
    body = (
        Asm.i32_const(0) + Asm.i32_load()          # input pointer
        + Asm.I64_EXTEND_I32_U
        + Asm.i64_const(32) + Asm.I64_SHL
        + Asm.i32_const(4) + Asm.i32_load()        # input length
        + Asm.I64_EXTEND_I32_U
        + Asm.I64_OR
        + Asm.END
    )
    run = b.add_func(results=(I64,), body=body)
    b.export_func("run", run)
    b.export_memory()
    return b.build()


def build_dispatch_wasm() -> bytes:
    """Guest forwarding its input (an encoded envelope) to the dispatch import."""
    b = ModuleBuilder()
    dispatch = b.import_func(*DISPATCH_IMPORT, params=(I32, I32), results=(I64,))
    b.add_memory(1)
    body = (
        Asm.i32_const(0) + Asm.i32_load()
        + Asm.i32_const(4) + Asm.i32_load()
        + Asm.call(dispatch)
        + Asm.END
    )
    run = b.add_func(results=(I64,), body=body)
    b.export_func("run", run)
    b.export_memory()
    return b.build()


def build_doubler_wasm() -> bytes:
    """Embeddable module exporting double(x) = 2 * x."""
    b = ModuleBuilder()
    body = Asm.local_get(0) + Asm.i32_const(2) + Asm.I32_MUL + Asm.END
    f = b.add_func(params=(I32,), results=(I32,), body=body)
    b.export_func("double", f)
    return b.build()


def build_embedding_primary_wasm(extra_name="fn_utils") -> bytes:
    """Primary calling <extra>.double(21) and returning a span over the byte."""
    b = ModuleBuilder()
    double = b.import_func(extra_name, "double", params=(I32,), results=(I32,))
    b.add_memory(1)
    body = (
        Asm.i32_const(32)
        + Asm.i32_const(21) + Asm.call(double)
        + Asm.i32_store8()
        + Asm.i64_const((32 << 32) | 1)
        + Asm.END
    )
    run = b.add_func(results=(I64,), body=body)
    b.export_func("run", run)
    b.export_memory()
    return b.build()


def build_import_only_wasm(imports) -> bytes:
    """Module whose only content is a list of function imports."""
    b = ModuleBuilder()
    for module, item in imports:
        b.import_func(module, item)
    b.add_memory(1)
    return b.build()


def wat_for_imports(imports) -> str:
    clauses = "\n".join(
        f'  (import "{m}" "{n}" (func ${m}_{n}))' for m, n in imports
    )
    return f"(module\n{clauses}\n  (memory 1)\n)\n"


# -- native module fixtures -------------------------------------------------------

def native_echo_module(name="fnb"):
    return NativeModule(name=name, run=lambda inst: inst.input_bytes())


def native_dispatch_module(name="fna"):
    def run(inst):
        span = inst.input_span
        return inst.call_import(*DISPATCH_IMPORT, span.pointer, span.length)

    return NativeModule(name=name, run=run, imports=(DISPATCH_IMPORT,))
