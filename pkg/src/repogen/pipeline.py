"""Three-phase pipeline with checkpointed workspace state.

Workspace layout::

    index/            content index and analysis schemas
    blueprint.json
    rag_index.json
    memory/           one memory snapshot per generation step, plus steps.json
    repo/             the generated repository
    transcripts/      one JSONL transcript per gateway session
    verify_log.json
    report.json
    state.json        phase reached and artifact digests
    config.json       resolved configuration (used by resume)
    timings.json      wall-clock phase durations (kept out of report.json)
"""

from __future__ import annotations

import hashlib
import importlib
import importlib.util
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import analysis, codemem, coderag, verifier
from .blueprint import AlgorithmSchema, Blueprint, validate_blueprint
from .doc_index import ContentIndex, build_index, load_document
from .errors import ConfigError, DigestMismatch, PhaseError, RepogenError, WorkspaceLocked
from .gateway import MODES, HttpProvider, LlmGateway, ScriptedProvider, TranscriptRecord, load_transcript, merge_usage
from .prompts import TemplateStore
from .sandbox import make_sandbox
from .tokens import DEFAULT_BUDGET

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

PHASES = ("indexed", "blueprinted", "generated", "verified")
EXIT_CODES = {"clean": 0, "max-iterations": 2, "setup-failed": 3}
CONFIG_ERROR_EXIT = 4

PHASE_ARTIFACTS = {
    "indexed": ["index/content_index.json"],
    "blueprinted": [
        "index/concept_schema.json",
        "index/algorithm_schema.json",
        "blueprint.json",
        "transcripts/concept.jsonl",
        "transcripts/algorithm.jsonl",
        "transcripts/planner.jsonl",
    ],
    "generated": ["rag_index.json", "memory", "repo", "transcripts/rag.jsonl", "transcripts/generate.jsonl"],
    "verified": ["repo", "verify_log.json", "transcripts/verify.jsonl", "report.json"],
}


# -- configuration -------------------------------------------------------------------


@dataclass
class PipelineConfig:
    input: Path
    workspace: Path
    format: str | None = None
    gateway_mode: str = "replay"
    transcripts: Path | None = None
    provider: dict = field(default_factory=dict)
    default_budget: int = DEFAULT_BUDGET
    budgets: dict = field(default_factory=dict)
    rag_repos: list = field(default_factory=list)
    retrieval: bool = True
    blacklist: list = field(default_factory=list)
    rag_workers: int = 1
    max_iter: int = verifier.MAX_ITER
    timeout: float = verifier.DEFAULT_TIMEOUT
    installer: str | list = "verify"
    sandbox: str = "process"
    scale: float = 1.0
    concept_keywords: list = field(default_factory=lambda: list(analysis.CONCEPT_KEYWORDS))
    algorithm_keywords: list = field(default_factory=lambda: list(analysis.ALGORITHM_KEYWORDS))
    query_budget: int = analysis.QUERY_BUDGET
    retries: int = 2
    template_dir: Path | None = None

    def validate(self) -> None:
        if not self.input.is_file():
            raise ConfigError(f"input document not found: {self.input}")
        ws = self.workspace
        if ws.exists():
            if not ws.is_dir() or not os.access(ws, os.W_OK):
                raise ConfigError(f"workspace is not a writable directory: {ws}")
        elif not ws.parent.is_dir() or not os.access(ws.parent, os.W_OK):
            raise ConfigError(f"workspace parent is not a writable directory: {ws.parent}")
        if self.gateway_mode not in MODES:
            raise ConfigError(f"gateway mode must be one of {MODES}")
        if self.gateway_mode == "replay" and (self.transcripts is None or not self.transcripts.is_dir()):
            raise ConfigError("replay mode needs an existing transcripts directory")
        if self.gateway_mode != "replay" and not self.provider:
            raise ConfigError(f"{self.gateway_mode} mode needs a provider")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.default_budget <= 0 or any(int(v) <= 0 for v in self.budgets.values()):
            raise ConfigError("token budgets must be positive")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input", "workspace", "transcripts", "template_dir"):
            d[k] = None if d[k] is None else str(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "PipelineConfig":
        base = base or Path.cwd()

        def path(v):
            if v is None:
                return None
            p = Path(os.path.expanduser(str(v)))
            return p if p.is_absolute() else (base / p)

        try:
            repos = []
            for r in d.get("rag_repos", []):
                r = dict(r) if isinstance(r, dict) else {"path": r}
                r["path"] = str(path(r["path"]))
                repos.append(r)
            return cls(
                input=path(d["input"]),
                workspace=path(d["workspace"]),
                format=d.get("format"),
                gateway_mode=d.get("gateway_mode", "replay"),
                transcripts=path(d.get("transcripts")),
                provider=dict(d.get("provider") or {}),
                default_budget=int(d.get("default_budget", DEFAULT_BUDGET)),
                budgets={k: int(v) for k, v in (d.get("budgets") or {}).items()},
                rag_repos=repos,
                retrieval=bool(d.get("retrieval", True)),
                blacklist=[str(path(b)) if "://" not in str(b) else str(b) for b in d.get("blacklist", [])],
                rag_workers=int(d.get("rag_workers", 1)),
                max_iter=int(d.get("max_iter", verifier.MAX_ITER)),
                timeout=float(d.get("timeout", verifier.DEFAULT_TIMEOUT)),
                installer=d.get("installer", "verify"),
                sandbox=d.get("sandbox", "process"),
                scale=float(d.get("scale", 1.0)),
                concept_keywords=list(d.get("concept_keywords", analysis.CONCEPT_KEYWORDS)),
                algorithm_keywords=list(d.get("algorithm_keywords", analysis.ALGORITHM_KEYWORDS)),
                query_budget=int(d.get("query_budget", analysis.QUERY_BUDGET)),
                retries=int(d.get("retries", 2)),
                template_dir=path(d.get("template_dir")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc


def _flatten(raw: dict) -> dict:
    """Map the sectioned TOML/JSON file layout onto PipelineConfig fields."""
    flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    gw = raw.get("gateway", {})
    if gw:
        flat["gateway_mode"] = gw.get("mode", flat.get("gateway_mode", "replay"))
        for k in ("transcripts", "provider", "default_budget", "budgets"):
            if k in gw:
                flat[k] = gw[k]
    rag = raw.get("rag", {})
    if rag:
        flat["rag_repos"] = rag.get("repos", [])
        flat["retrieval"] = rag.get("enabled", True)
        flat["blacklist"] = rag.get("blacklist", [])
        flat["rag_workers"] = rag.get("workers", 1)
    ver = raw.get("verify", {})
    for k in ("max_iter", "timeout", "installer", "sandbox", "scale"):
        if k in ver:
            flat[k] = ver[k]
    kw = raw.get("keywords", {})
    if "concept" in kw:
        flat["concept_keywords"] = kw["concept"]
    if "algorithm" in kw:
        flat["algorithm_keywords"] = kw["algorithm"]
    an = raw.get("analysis", {})
    for k in ("query_budget", "retries", "template_dir"):
        if k in an:
            flat[k] = an[k]
    return flat


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    flat = _flatten(raw)
    flat.update(overrides or {})
    return PipelineConfig.from_dict(flat, base=path.resolve().parent)


def load_provider(spec: dict):
    kind = spec.get("kind", "http")
    if kind == "http":
        return HttpProvider(spec.get("base_url"), spec.get("model"), spec.get("api_key_env", "REPOGEN_API_KEY"))
    if kind == "python":
        target = spec["target"]
        mod_name, _, attr = target.partition(":")
        if mod_name.endswith(".py"):
            modspec = importlib.util.spec_from_file_location(Path(mod_name).stem, mod_name)
            module = importlib.util.module_from_spec(modspec)
            sys.modules[modspec.name] = module
            modspec.loader.exec_module(module)
        else:
            module = importlib.import_module(mod_name)
        return ScriptedProvider(getattr(module, attr or "respond"))
    raise ConfigError(f"unknown provider kind {kind!r}")


# -- workspace state ---------------------------------------------------------------------------


def artifact_digest(path: Path) -> str | None:
    if not path.exists():
        return None
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    for p in sorted(path.rglob("*")):
        if p.is_file() and "__pycache__" not in p.parts:
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


@dataclass
class RunState:
    phase: str | None = None
    digests: dict = field(default_factory=dict)
    resumable: bool = True
    status: str | None = None

    def save(self, ws: Path) -> None:
        (ws / "state.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, ws: Path) -> "RunState":
        p = ws / "state.json"
        if not p.exists():
            raise ConfigError(f"{ws} has no run state")
        return cls(**json.loads(p.read_text(encoding="utf-8")))

    def next_phase(self) -> str | None:
        if self.phase is None:
            return PHASES[0]
        i = PHASES.index(self.phase)
        return PHASES[i + 1] if i + 1 < len(PHASES) else None

    def record(self, ws: Path, phase: str) -> None:
        if self.phase is not None and PHASES.index(phase) <= PHASES.index(self.phase):
            raise RepogenError(f"phase {phase} does not advance past {self.phase}")
        self.phase = phase
        for rel in PHASE_ARTIFACTS[phase]:
            d = artifact_digest(ws / rel)
            if d is not None:
                self.digests[rel] = d

    def verify(self, ws: Path) -> None:
        bad = [rel for rel, d in sorted(self.digests.items()) if artifact_digest(ws / rel) != d]
        if bad:
            raise DigestMismatch("workspace artifacts changed since checkpoint: " + ", ".join(bad))


class _Lock:
    def __init__(self, ws: Path):
        self.path = ws / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceLocked(f"{self.path} exists; another run holds the workspace") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# -- phases ------------------------------------------------------------------------------------------


class Runner:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.ws = cfg.workspace
        self.templates = TemplateStore([cfg.template_dir] if cfg.template_dir else [])
        self._provider = None

    def gateway(self, session: str) -> LlmGateway:
        cfg = self.cfg
        out = self.ws / "transcripts" / f"{session}.jsonl"
        common = dict(budgets=cfg.budgets, default_budget=cfg.default_budget, transcript_path=out)
        if cfg.gateway_mode == "replay":
            return LlmGateway("replay", replay_from=cfg.transcripts / f"{session}.jsonl", **common)
        if self._provider is None:
            self._provider = load_provider(cfg.provider)
        return LlmGateway(cfg.gateway_mode, self._provider, **common)

    def phase_indexed(self) -> None:
        doc = load_document(self.cfg.input, self.cfg.format)
        index = build_index(doc)
        (self.ws / "index").mkdir(parents=True, exist_ok=True)
        index.save(self.ws / "index" / "content_index.json")

    def phase_blueprinted(self) -> None:
        cfg = self.cfg
        index = ContentIndex.load(self.ws / "index" / "content_index.json")
        concept, algo = analysis.run_analysis(
            index,
            self.gateway("concept"),
            self.gateway("algorithm"),
            query_budget=cfg.query_budget,
            retries=cfg.retries,
            templates=self.templates,
            concept_keywords=cfg.concept_keywords,
            algorithm_keywords=cfg.algorithm_keywords,
        )
        _write_json(self.ws / "index" / "concept_schema.json", concept.to_dict())
        _write_json(self.ws / "index" / "algorithm_schema.json", algo.to_dict())
        bp = analysis.synthesize_blueprint(concept, algo, index, self.gateway("planner"), retries=cfg.retries, templates=self.templates)
        bp.save(self.ws / "blueprint.json")

    def phase_generated(self) -> None:
        cfg = self.cfg
        bp = Blueprint.load(self.ws / "blueprint.json")
        rag_gw = self.gateway("rag")
        repos = cfg.rag_repos if cfg.retrieval else []
        rag_index = coderag.build_index(
            repos, bp, rag_gw, workers=cfg.rag_workers, blacklist=cfg.blacklist, retries=cfg.retries, templates=self.templates
        )
        rag_index.save(self.ws / "rag_index.json")
        repo = self.ws / "repo"
        if repo.exists():
            shutil.rmtree(repo)
        mem_dir = self.ws / "memory"
        if mem_dir.exists():
            shutil.rmtree(mem_dir)
        result = codemem.run_generation(
            bp,
            self.gateway("generate"),
            repo,
            memory_dir=mem_dir,
            rag_index=rag_index if cfg.retrieval else None,
            retrieval=cfg.retrieval,
            templates=self.templates,
            retries=cfg.retries,
        )
        _write_json(
            mem_dir / "steps.json",
            {
                "steps": [s.to_dict() for s in result.steps],
                "warnings": result.warnings,
                "contradictions": result.contradictions,
                "invariants": result.invariant_summary(rag_gw.budget_for("coder")),
            },
        )

    def phase_verified(self) -> None:
        cfg = self.cfg
        bp = Blueprint.load(self.ws / "blueprint.json")
        repo = self.ws / "repo"
        sandbox = make_sandbox(cfg.sandbox, self.ws, self.ws / "sandbox_audit.jsonl")
        gw = self.gateway("verify")
        report = verifier.static_analyze(repo, bp, gw, sandbox=sandbox, retries=cfg.retries, templates=self.templates)
        refinement = verifier.refine_static(repo, report, gw, blueprint=bp, sandbox=sandbox, templates=self.templates)
        remaining = [i.to_dict() for i in verifier.structural_issues(repo, bp, sandbox)]
        loop = verifier.refine_loop(
            repo,
            sandbox,
            gw,
            cfg.max_iter,
            blueprint=bp,
            timeout=cfg.timeout,
            installer=cfg.installer,
            scale=cfg.scale,
            retries=cfg.retries,
            templates=self.templates,
        )
        _write_json(
            self.ws / "verify_log.json",
            {
                "static_report": report.to_dict(),
                "static_refinement": refinement.log,
                "structural_after_refinement": remaining,
                "sandbox": loop.to_dict(),
            },
        )
        _write_json(self.ws / "report.json", build_report(self.ws))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def transcript_usage(ws: Path) -> dict:
    reports = []
    for p in sorted((ws / "transcripts").glob("*.jsonl")):
        records: list[TranscriptRecord] = load_transcript(p)
        g = LlmGateway("replay", replay_from=records)
        g.transcript.records.extend(records)
        reports.append(g.usage_report())
    return merge_usage(reports)


def tree_digest(repo: Path) -> dict[str, str]:
    return {
        p.relative_to(repo).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(repo.rglob("*"))
        if p.is_file() and "__pycache__" not in p.parts
    }


def build_report(ws: Path) -> dict:
    index = ContentIndex.load(ws / "index" / "content_index.json")
    bp = Blueprint.load(ws / "blueprint.json")
    algo = AlgorithmSchema.from_dict(_read_json(ws / "index" / "algorithm_schema.json"))
    rag = coderag.RagIndex.load(ws / "rag_index.json")
    steps = _read_json(ws / "memory" / "steps.json")
    vlog = _read_json(ws / "verify_log.json")
    sandbox_log = vlog["sandbox"]
    per_target_sorted = all(
        all(a.confidence >= b.confidence for a, b in zip(ts, ts[1:])) for ts in rag.per_target.values()
    )
    status = sandbox_log["status"]
    return {
        "status": status,
        "exit_code": EXIT_CODES[status],
        "phases": list(PHASES),
        "repository": tree_digest(ws / "repo"),
        "usage": transcript_usage(ws),
        "invariants": {
            "index": {
                "chunks": len(index),
                "blocks": len(index.blocks),
                "spans_tile_blocks": _spans_tile(index),
            },
            "blueprint": {
                "files": len(bp.files),
                "violations": len(validate_blueprint(bp, algo)),
                "reconciliation_notes": len(bp.notes),
            },
            "generation": steps["invariants"],
            "rag": {"tuples": len(rag), "targets": len(rag.per_target), "per_target_sorted": per_target_sorted},
            "verification": {
                "structural_after_refinement": len(vlog["structural_after_refinement"]),
                "executions": sandbox_log["executions"],
                "terminal_iteration": sandbox_log["terminal_iteration"],
            },
        },
        "warnings": [w for m in rag.repo_manifest for w in m.get("warnings", [])] + steps["warnings"],
        "contradictions": steps["contradictions"],
    }


def _spans_tile(index: ContentIndex) -> bool:
    pos = 0
    for c in index.chunks:
        if c.span[0] != pos or c.span[1] <= c.span[0]:
            return False
        pos = c.span[1]
    return pos == len(index.blocks)


def _load_timings(ws: Path) -> dict:
    p = ws / "timings.json"
    return _read_json(p) if p.exists() else {}


def _advance(runner: Runner, state: RunState, stop_after: str | None) -> None:
    ws = runner.ws
    timings = _load_timings(ws)
    while (phase := state.next_phase()) is not None:
        start = time.perf_counter()
        logger.info("phase %s", phase)
        try:
            getattr(runner, f"phase_{phase}")()
        except RepogenError as exc:
            state.save(ws)
            raise PhaseError(phase, exc) from exc
        timings[phase] = round(time.perf_counter() - start, 3)
        state.record(ws, phase)
        if phase == "verified":
            state.status = _read_json(ws / "report.json")["status"]
        state.save(ws)
        _write_json(ws / "timings.json", timings)
        if stop_after == phase:
            return


def _workspace_artifacts(ws: Path) -> list[Path]:
    names = ["index", "blueprint.json", "rag_index.json", "memory", "repo", "transcripts", "verify_log.json",
             "report.json", "state.json", "config.json", "timings.json", "sandbox_audit.jsonl", ".sandbox"]
    return [ws / n for n in names if (ws / n).exists()]


def run_pipeline(cfg: PipelineConfig, *, stop_after: str | None = None, force: bool = False) -> tuple[Path, dict | None]:
    """Run every phase; returns the final repository path and the run report.

    ``stop_after`` ends the run at a phase boundary (the workspace stays
    resumable), which is how interrupted runs are simulated.
    """
    cfg.validate()
    ws = cfg.workspace
    ws.mkdir(exist_ok=True)
    if (ws / "state.json").exists():
        if not force:
            raise ConfigError(f"{ws} already holds a run; use resume or force")
        for p in _workspace_artifacts(ws):
            shutil.rmtree(p) if p.is_dir() and not p.is_symlink() else p.unlink()
    with _Lock(ws):
        _write_json(ws / "config.json", cfg.to_dict())
        state = RunState()
        state.save(ws)
        _advance(Runner(cfg), state, stop_after)
    report = _read_json(ws / "report.json") if (ws / "report.json").exists() else None
    return ws / "repo", report


def resume(workspace: str | Path, *, stop_after: str | None = None) -> tuple[Path, dict | None]:
    ws = Path(workspace)
    state = RunState.load(ws)
    if not state.resumable:
        raise ConfigError(f"{ws} is not resumable")
    state.verify(ws)
    cfg = PipelineConfig.from_dict(_read_json(ws / "config.json"))
    cfg.workspace = ws
    if state.next_phase() is not None:
        cfg.validate()
        with _Lock(ws):
            _advance(Runner(cfg), state, stop_after)
    report = _read_json(ws / "report.json") if (ws / "report.json").exists() else None
    return ws / "repo", report


def read_report(workspace: str | Path) -> dict:
    ws = Path(workspace)
    p = ws / "report.json"
    if not p.exists():
        raise ConfigError(f"{ws} has no report yet (phase: {RunState.load(ws).phase})")
    return {"report": _read_json(p), "timings": _load_timings(ws)}
