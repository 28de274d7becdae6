import random

import pytest

from conftest import make_spec, write_bundle
from cwasi.errors import DuplicateFunction, ScanFailure
from cwasi.funcspec import load_spec
from cwasi.registry import RunningRegistry, socket_path_for


def test_requires_existing_directory(tmp_path):
    with pytest.raises(ScanFailure):
        RunningRegistry(tmp_path / "missing")


def test_register_materializes_bundle(registry, running_path, tmp_path):
    spec = make_spec(tmp_path / "fnb", ["fnb.wasm", "fnb"])
    created = registry.register(spec)
    assert created == running_path / "fnb"
    loaded = load_spec(created)
    assert loaded.args == ("fnb.wasm", "fnb")
    assert loaded.bundle_path == created
    assert (created / "config.json").exists()
    assert [p.name for p in running_path.iterdir()] == ["fnb"]


def test_register_duplicate_rejected(registry, tmp_path):
    spec = make_spec(tmp_path / "fnb", ["fnb"])
    registry.register(spec)
    with pytest.raises(DuplicateFunction):
        registry.register(spec)


def test_unregister_then_reregister(registry, tmp_path):
    spec = make_spec(tmp_path / "fnb", ["fnb"])
    registry.register(spec)
    registry.unregister("fnb")
    registry.register(spec)


def test_ifc_selection_finds_local_target(registry, running_path):
    write_bundle(running_path, "fnb", ["fnb.wasm", "fnb"])
    sp = registry.ifc_selection("fnb")
    assert sp == running_path / "fnb.sock"
    assert str(sp).endswith(".sock")


def test_ifc_selection_empty_registry(registry):
    assert registry.ifc_selection("fnb") is None


def test_ifc_selection_exact_match_only(registry, running_path):
    write_bundle(running_path, "fnb", ["fnb-extended"])
    assert registry.ifc_selection("fnb") is None


def test_ifc_selection_lexicographic_tiebreak(registry, running_path):
    write_bundle(running_path, "b", ["fnb"])
    write_bundle(running_path, "a", ["fnb"])
    assert registry.ifc_selection("fnb") == running_path / "a.sock"


def test_ifc_selection_skips_malformed_configs(registry, running_path):
    bad = running_path / "aaa"
    bad.mkdir()
    (bad / "config.json").write_text("{broken")
    write_bundle(running_path, "fnb", ["fnb"])
    assert registry.ifc_selection("fnb") == running_path / "fnb.sock"


def test_ifc_selection_requires_target(registry):
    with pytest.raises(ValueError):
        registry.ifc_selection("")


def test_socket_path_convention(tmp_path):
    assert socket_path_for(tmp_path / "mycontainer") == tmp_path / "mycontainer.sock"


def _brute_force_selection(running_path, target):
    """Independent oracle: plain directory walk with the same matching rule."""
    for entry in sorted(running_path.iterdir()):
        config = entry / "config.json"
        if not entry.is_dir() or not config.exists():
            continue
        try:
            import json

            doc = json.loads(config.read_text())
        except Exception:
            continue
        if isinstance(doc, dict) and target in doc.get("args", []):
            return running_path / (entry.name + ".sock")
    return None


def test_ifc_selection_matches_brute_force_oracle(tmp_path):
    rng = random.Random(20240517)
    names = [f"fn{i}" for i in range(8)]
    for trial in range(50):
        root = tmp_path / f"t{trial}"
        root.mkdir()
        registry = RunningRegistry(root)
        for b in range(rng.randrange(0, 8)):
            args = rng.sample(names, rng.randrange(1, 4))
            write_bundle(root, f"bundle{b}", args)
        target = rng.choice(names)
        assert registry.ifc_selection(target) == _brute_force_selection(root, target)


def test_result_stable_across_calls(registry, running_path):
    write_bundle(running_path, "fnb", ["fnb"])
    first = registry.ifc_selection("fnb")
    assert all(registry.ifc_selection("fnb") == first for _ in range(5))
