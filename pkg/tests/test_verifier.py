from __future__ import annotations

import difflib
import json

import pytest
from hypothesis import given, settings, strategies as st

import scenarios
from conftest import FIXTURES
from repogen.blueprint import Blueprint
from repogen.errors import OverlappingEdits, RangeOutOfBounds, SetupFailed
from repogen.gateway import CannedProvider, LlmGateway
from repogen.sandbox import Sandbox
from repogen.verifier import (
    Edit,
    Issue,
    PatchInstruction,
    StaticReport,
    apply_patch,
    discover_entry,
    execute,
    parse_errors,
    reconcile_manifest,
    refine_loop,
    refine_static,
    settings_env,
    setup_environment,
    static_analyze,
    structural_issues,
)

FAULTS = FIXTURES / "faults"
TEN = "".join(f"line {i}\n" for i in range(1, 11))


def patch(*edits, file="f.py"):
    return PatchInstruction(file, tuple(Edit(*e) for e in edits))


def reply(obj) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


# -- patches ---------------------------------------------------------------------------


def test_replace_single_line():
    out = apply_patch(TEN, patch((3, 3, "three")))
    lines = out.splitlines(keepends=True)
    assert lines[2] == "three\n"
    assert lines[:2] + lines[3:] == TEN.splitlines(keepends=True)[:2] + TEN.splitlines(keepends=True)[3:]


def test_insert_delete_and_compose():
    assert apply_patch(TEN, patch((1, 0, "head"))).startswith("head\nline 1\n")
    assert apply_patch(TEN, patch((11, 10, "tail"))).endswith("line 10\ntail\n")
    assert "line 5" not in apply_patch(TEN, patch((5, 5, "")))
    p1, p2 = patch((2, 2, "two")), patch((8, 9, "eight-nine"))
    both = patch((2, 2, "two"), (8, 9, "eight-nine"))
    assert apply_patch(apply_patch(TEN, p1), p2) == apply_patch(TEN, both)
    assert apply_patch("a\nb", patch((3, 2, "c"))) == "a\nb\nc\n"


def test_bad_edits_rejected():
    with pytest.raises(RangeOutOfBounds):
        apply_patch(TEN, patch((11, 11, "x")))
    with pytest.raises(RangeOutOfBounds):
        apply_patch(TEN, patch((4, 2, "x")))
    with pytest.raises(OverlappingEdits):
        apply_patch(TEN, patch((2, 4, "x"), (4, 5, "y")))
    with pytest.raises(OverlappingEdits):
        apply_patch(TEN, patch((3, 2, "x"), (3, 2, "y")))


@st.composite
def edits(draw):
    n = draw(st.integers(1, 30))
    text = "".join(f"l{i}\n" for i in range(1, n + 1))
    cuts = sorted(draw(st.sets(st.integers(1, n + 1), max_size=6)))
    es = []
    prev_end = 0
    for c in cuts:
        if c <= prev_end + 1 and es:
            continue
        end = draw(st.integers(c - 1, min(n, c + 2)))
        if end < c - 1:
            continue
        es.append((c, end, draw(st.sampled_from(["", "new", "x\ny"]))))
        prev_end = max(end, c)
    return text, es


@settings(max_examples=200, deadline=None)
@given(edits())
def test_patch_locality(case):
    """Lines outside every edited range survive byte-for-byte (independent difflib oracle)."""
    text, es = case
    try:
        out = apply_patch(text, patch(*es))
    except OverlappingEdits:
        return
    touched = set()
    for s, e, _ in es:
        touched.update(range(s, e + 1))
    old = text.splitlines(keepends=True)
    new = out.splitlines(keepends=True)
    sm = difflib.SequenceMatcher(a=old, b=new, autojunk=False)
    kept = set()
    for a, _, size in sm.get_matching_blocks():
        kept.update(range(a + 1, a + size + 1))
    untouched = set(range(1, len(old) + 1)) - touched
    assert untouched <= kept
    assert len(new) == len(old) - len(touched) + sum(len(t.splitlines()) for _, _, t in es)


# -- static ------------------------------------------------------------------------------


def test_structural_issues(tmp_path, toy_blueprint):
    for p in toy_blueprint.files:
        (tmp_path / p).write_text("x\n")
    assert structural_issues(tmp_path, toy_blueprint) == []
    (tmp_path / "model.py").unlink()
    (tmp_path / "data.py").write_text("")
    found = {(i.file, "missing" in i.description) for i in structural_issues(tmp_path, toy_blueprint)}
    assert found == {("model.py", True), ("data.py", False)}


def test_refine_static_regenerates_and_patches(tmp_path, toy_blueprint):
    for p in toy_blueprint.files:
        (tmp_path / p).write_text("a = 1\nb = 2\n")
    (tmp_path / "model.py").unlink()
    gw = LlmGateway(
        "live",
        CannedProvider(
            [
                reply({"score": 0.5, "issues": [{"line": 2, "description": "b is unused", "instruction": "drop it"}]}),
                *[reply({"score": 0.9, "issues": []})] * 7,
                "```python\nclass Model:\n    pass\n```",
                reply({"file": "requirements.txt", "edits": [{"start_line": 2, "end_line": 2, "text": ""}]}),
            ]
        ),
    )
    report = static_analyze(tmp_path, toy_blueprint, gw)
    assert [i.category for i in report.issues] == ["structural-discrepancy", "quality-deficiency"]
    res = refine_static(tmp_path, report, gw, blueprint=toy_blueprint)
    assert (tmp_path / "model.py").read_text() == "class Model:\n    pass\n"
    assert (tmp_path / "requirements.txt").read_text() == "a = 1\n"
    assert res.unfixable == [] and structural_issues(tmp_path, toy_blueprint) == []


def test_empty_report_leaves_repo_untouched(tmp_path, toy_blueprint):
    (tmp_path / "a.py").write_text("x = 1\n")
    gw = LlmGateway("live", CannedProvider("unused"))
    res = refine_static(tmp_path, StaticReport(), gw, blueprint=toy_blueprint)
    assert res.log == [] and gw.records == [] and (tmp_path / "a.py").read_text() == "x = 1\n"


def test_rejected_fix_marked_unfixable(tmp_path):
    (tmp_path / "a.py").write_text("x = 1\n")
    report = StaticReport([Issue("Q1", "quality-deficiency", "a.py", 1, "bad")])
    gw = LlmGateway("live", CannedProvider(reply({"file": "a.py", "edits": [{"start_line": 9, "end_line": 9, "text": ""}]})))
    res = refine_static(tmp_path, report, gw, attempts=2)
    assert res.unfixable == ["Q1"] and len(gw.records) == 2
    assert (tmp_path / "a.py").read_text() == "x = 1\n"


# -- environment ---------------------------------------------------------------------------


def test_reconcile_manifest():
    text, added, replaced = reconcile_manifest(
        "numpy==1.0\n# comment\nrequests\n", [{"name": "numpy", "version": "2.0"}, {"name": "scipy", "version": ""}, {"name": "requests", "version": "2.1"}]
    )
    assert text == "numpy==2.0\n# comment\nrequests\nscipy\n"
    assert added == ["scipy"] and replaced == ["numpy==1.0 -> numpy==2.0"]
    assert reconcile_manifest("", [])[0] == ""


def _bp(deps, setup=None, entry_points=()):
    return Blueprint.from_dict(
        {
            "file_hierarchy": [{"path": "main.py", "priority": 0, "description": ""}],
            "component_specs": {"main.py": {"items": [], "depends_on": []}},
            "verification_protocol": {"setup": setup or {}, "metrics": [], "success_criteria": [], "entry_points": list(entry_points)},
            "execution_environment": {"dependencies": deps},
            "staged_plan": [{"name": "s", "files": ["main.py"], "check": ""}],
        }
    )


def test_setup_environment(tmp_path):
    sb = Sandbox(tmp_path)
    repo = tmp_path / "repo"
    repo.mkdir()
    res = setup_environment(repo, _bp([{"name": "json5x-not-real-but-skipped", "version": ""}]), sb, installer="none")
    assert res.ok and res.added == ["json5x-not-real-but-skipped"]
    assert "json5x" in (repo / "requirements.txt").read_text()
    res = setup_environment(repo, _bp([]), sb, installer=["python", "-c", "print('installed')"])
    assert res.traces[0].stdout.strip() == "installed"
    with pytest.raises(SetupFailed):
        setup_environment(repo, _bp([]), sb, installer="verify")  # the unknown package is not importable
    with pytest.raises(SetupFailed):
        setup_environment(repo, _bp([]), sb, installer=["python", "-c", "raise SystemExit(1)"])


def test_execute_and_parse(tmp_path):
    sb = Sandbox(tmp_path)
    repo = tmp_path / "repo"
    repo.mkdir()
    (repo / "ok.py").write_text("print('hi')\n")
    (repo / "bad.py").write_text("x = 1\nprint(y)\n")
    (repo / "slow.py").write_text("import time\ntime.sleep(30)\n")
    t = execute(repo, ["python", "ok.py"], sb)
    assert t.ok and t.stdout == "hi\n" and t.error_records == []
    t = execute(repo, "python bad.py", sb)
    assert not t.ok
    assert t.error_records == [{"file": "bad.py", "line": 2, "message": "NameError: name 'y' is not defined", "parsed": True}]
    assert str(repo) not in t.stderr
    t = execute(repo, ["python", "slow.py"], sb, timeout=2)
    assert t.timed_out and t.duration < 10 and "timeout" in t.error_records[0]["message"]


def test_parse_errors_fallbacks():
    assert parse_errors("", 0) == []
    rec = parse_errors("usage: x\nmain.py: error: unrecognized arguments: --n 4\n", 2)
    assert rec[0]["file"] == "main.py" and "unrecognized" in rec[0]["message"]
    assert parse_errors("reproduce.sh: line 3: foo: command not found\n", 127)[0]["line"] == 3
    rec = parse_errors("something odd\n", 1)
    assert rec == [{"file": None, "line": 0, "message": "something odd", "parsed": False}]


def test_settings_and_entry(tmp_path):
    env = settings_env({"epochs": 20, "lr": 0.1, "flag": True}, 0.5)
    assert env == {"REPOGEN_SCALE": "0.5", "REPOGEN_SETTING_EPOCHS": "10", "REPOGEN_SETTING_LR": "0.1", "REPOGEN_SETTING_FLAG": "True"}
    assert settings_env({"epochs": 1}, 0.1)["REPOGEN_SETTING_EPOCHS"] == "1"
    assert discover_entry(tmp_path, None) is None
    assert discover_entry(tmp_path, _bp([], entry_points=["python main.py --epochs {epochs}"]), {"epochs": "3"}) == [
        "python", "main.py", "--epochs", "3"
    ]
    (tmp_path / "main.py").write_text("")
    assert discover_entry(tmp_path, None) == ["python", "main.py"]
    (tmp_path / "reproduce.sh").write_text("")
    assert discover_entry(tmp_path, None) == ["bash", "reproduce.sh"]


# -- repair loop -------------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["name_typo", "missing_module", "wrong_argument"])
def test_single_faults_repaired(tmp_path, name):
    repo = scenarios.write_tree(scenarios.start_tree(name), tmp_path / "repo")
    gw = LlmGateway("replay", replay_from=FAULTS / "transcripts" / f"{name}.jsonl")
    res = refine_loop(repo, Sandbox(tmp_path), gw, 5, timeout=30)
    first = res.to_dict()["iterations"][0]["errors"][0]["message"]
    assert scenarios.FIRST_ERROR[name] in first
    assert res.status == "clean" and res.iterations <= 5
    for path, text in scenarios.truth_files().items():
        assert (repo / path).read_text(encoding="utf-8") == text


def test_unfixable_hits_limit(tmp_path):
    repo = scenarios.write_tree(scenarios.start_tree("unfixable"), tmp_path / "repo")
    gw = LlmGateway("replay", replay_from=FAULTS / "transcripts" / "unfixable.jsonl")
    res = refine_loop(repo, Sandbox(tmp_path), gw, 5, timeout=30)
    assert res.status == "max-iterations" and res.iterations == 5
    assert res.to_dict()["iterations"][-1]["patches"] == []


def test_no_entry_point_is_setup_failure(tmp_path):
    repo = tmp_path / "repo"
    repo.mkdir()
    res = refine_loop(repo, Sandbox(tmp_path), LlmGateway("live", CannedProvider("x")), 3)
    assert res.status == "setup-failed" and res.iterations == 0
    with pytest.raises(ValueError):
        refine_loop(repo, Sandbox(tmp_path), LlmGateway("live", CannedProvider("x")), 0)
