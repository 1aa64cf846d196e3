from __future__ import annotations

import json

import pytest

from conftest import TOY, toy_config
from repogen.cli import main
from repogen.errors import ConfigError, DigestMismatch, WorkspaceLocked
from repogen.pipeline import (
    PHASES,
    PipelineConfig,
    RunState,
    load_config,
    read_report,
    resume,
    run_pipeline,
    tree_digest,
)


def write_config(tmp_path, **overrides):
    tmp_path.mkdir(parents=True, exist_ok=True)
    cfg = toy_config(tmp_path / "ws", **overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()), encoding="utf-8")
    return path


def test_toml_config_sections(tmp_path):
    (tmp_path / "doc.md").write_text("# T\n\ntext\n")
    (tmp_path / "tr").mkdir()
    (tmp_path / "cfg.toml").write_text(
        'input = "doc.md"\nworkspace = "ws"\n'
        '[gateway]\nmode = "replay"\ntranscripts = "tr"\n[gateway.budgets]\ncoder = 9000\n'
        '[verify]\nmax_iter = 3\n'
    )
    cfg = load_config(tmp_path / "cfg.toml")
    assert cfg.input == tmp_path / "doc.md" and cfg.workspace == tmp_path / "ws"
    assert cfg.max_iter == 3 and cfg.budgets == {"coder": 9000}
    cfg.validate()


@pytest.mark.parametrize(
    "override",
    [
        {"input": "/nonexistent/paper.md"},
        {"workspace": "/proc/definitely/not/writable"},
        {"gateway_mode": "psychic"},
        {"transcripts": "/nonexistent/transcripts"},
        {"gateway_mode": "live"},
        {"max_iter": 0},
        {"timeout": 0},
        {"default_budget": -1},
    ],
)
def test_invalid_config_rejected_before_any_phase(tmp_path, override):
    override = dict(override)
    ws = override.pop("workspace", tmp_path / "ws")
    cfg = toy_config(ws, **override)
    with pytest.raises(ConfigError):
        run_pipeline(cfg)
    assert not (tmp_path / "ws" / "state.json").exists()


def test_unparseable_config(tmp_path):
    (tmp_path / "bad.toml").write_text("= nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
    assert main(["run", "--config", str(tmp_path / "bad.toml")]) == 4
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 4


def test_stop_resume_and_noop(tmp_path):
    ws = tmp_path / "ws"
    repo, report = run_pipeline(toy_config(ws), stop_after="blueprinted")
    assert report is None and RunState.load(ws).phase == "blueprinted"
    with pytest.raises(ConfigError):
        run_pipeline(toy_config(ws))
    with pytest.raises(ConfigError):
        read_report(ws)
    repo, report = resume(ws)
    assert report["status"] == "clean" and RunState.load(ws).phase == "verified"
    before = tree_digest(ws)
    resume(ws)
    assert tree_digest(ws) == before


def test_tampered_artifact_detected(tmp_path):
    ws = tmp_path / "ws"
    run_pipeline(toy_config(ws), stop_after="generated")
    bp = ws / "blueprint.json"
    bp.write_text(bp.read_text().replace("optim.py", "optimizer.py", 1))
    with pytest.raises(DigestMismatch):
        resume(ws)
    assert main(["resume", str(ws)]) == 4


def test_lock_blocks_second_writer(tmp_path):
    ws = tmp_path / "ws"
    run_pipeline(toy_config(ws), stop_after="indexed")
    (ws / ".lock").write_text("1")
    with pytest.raises(WorkspaceLocked):
        resume(ws)


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    assert "repository:" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "ws")]) == 0
    out = capsys.readouterr().out
    assert "status: clean (exit 0)" in out and "timings:" in out
    assert main(["report", "--json", str(tmp_path / "ws")]) == 0
    assert json.loads(capsys.readouterr().out)["report"]["status"] == "clean"

    # one execution, typo still present, no repair after the last run
    cfg = write_config(tmp_path / "two", max_iter=1)
    assert main(["run", "--config", str(cfg)]) == 2

    cfg = write_config(tmp_path / "three", installer=["python", "-c", "raise SystemExit(1)"])
    assert main(["run", "--config", str(cfg)]) == 3
    assert json.loads((tmp_path / "three" / "ws" / "report.json").read_text())["status"] == "setup-failed"

    cfg = write_config(tmp_path / "four", max_iter=0)
    assert main(["run", "--config", str(cfg)]) == 4


def test_report_is_deterministic(tmp_path):
    a = run_pipeline(toy_config(tmp_path / "a"))[1]
    b = run_pipeline(toy_config(tmp_path / "b"))[1]
    assert a == b
    assert a["phases"] == list(PHASES)
    golden = json.loads((TOY / "golden_artifacts" / "report.json").read_text())
    assert a == golden


def test_retrieval_off_matches_empty_index(tmp_path):
    provider = {"kind": "python", "target": f"{TOY / 'scenario.py'}:respond"}
    off = run_pipeline(toy_config(tmp_path / "off", gateway_mode="record", transcripts=None, provider=provider, retrieval=False))
    empty = run_pipeline(toy_config(tmp_path / "empty", gateway_mode="record", transcripts=None, provider=provider, rag_repos=[]))
    assert off[1]["repository"] == empty[1]["repository"]
    gen = [
        [(r["prompt"], r["reply"]) for r in map(json.loads, (p / "transcripts" / "generate.jsonl").read_text().splitlines())]
        for p in (tmp_path / "off", tmp_path / "empty")
    ]
    assert gen[0] == gen[1]
    assert off[1]["invariants"]["generation"]["retrieval_steps"] == 0
