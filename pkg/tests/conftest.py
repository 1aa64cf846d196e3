from __future__ import annotations

import importlib.util
import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
FIXTURES = TESTS / "fixtures"
TOY = FIXTURES / "toy"
for p in (FIXTURES, TOY, FIXTURES / "faults", FIXTURES / "synthetic"):
    if str(p) not in sys.path:
        sys.path.insert(0, str(p))


@pytest.fixture
def toy_blueprint():
    import scenario

    from repogen.blueprint import Blueprint

    return Blueprint.from_dict(scenario.blueprint_reply())


@pytest.fixture
def toy_index():
    from repogen.doc_index import build_index, load_document

    return build_index(load_document(TOY / "paper.md"))


def _load(name: str, path: Path):
    spec = importlib.util.spec_from_file_location(name, path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


toy_regen = _load("toy_regen", TOY / "regen.py")


def toy_config(workspace: Path, **overrides):
    return toy_regen.toy_config(workspace, **overrides)


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so its confinement check sees every audit log of the session
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, note in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{note}]" if note else ""))
