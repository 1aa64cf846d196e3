"""Phase 3: static analysis, line-level patching, and the execute-and-repair loop."""

from __future__ import annotations

import hashlib
import logging
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .blueprint import Blueprint
from .errors import (
    GatewayError,
    OverlappingEdits,
    RangeOutOfBounds,
    SandboxUnavailable,
    SchemaParseError,
    SetupFailed,
)
from .gateway import LlmGateway
from .prompts import DEFAULT_RETRIES, DEFAULT_TEMPLATES, TemplateStore, ask_json, dumps, extract_code
from .sandbox import Sandbox

logger = logging.getLogger(__name__)

MAX_ITER = 5
DEFAULT_TIMEOUT = 60.0
STRUCTURAL = "structural-discrepancy"
QUALITY = "quality-deficiency"
STATUSES = ("clean", "max-iterations", "setup-failed")

IMPORT_NAMES = {
    "scikit-learn": "sklearn",
    "pyyaml": "yaml",
    "pillow": "PIL",
    "opencv-python": "cv2",
    "opencv-python-headless": "cv2",
    "beautifulsoup4": "bs4",
    "python-dateutil": "dateutil",
}


# -- static analysis -------------------------------------------------------------------


@dataclass
class Issue:
    id: str
    category: str
    file: str
    location: int | None
    description: str
    instruction: str = ""
    status: str = "open"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StaticReport:
    issues: list[Issue] = field(default_factory=list)
    quality_scores: dict[str, float] = field(default_factory=dict)

    def structural(self, include_unfixable: bool = True) -> list[Issue]:
        return [
            i for i in self.issues if i.category == STRUCTURAL and (include_unfixable or i.status != "unfixable")
        ]

    def to_dict(self) -> dict:
        return {"issues": [i.to_dict() for i in self.issues], "quality_scores": dict(sorted(self.quality_scores.items()))}


def _read(repo: Path, rel: str, sandbox: Sandbox | None) -> str | None:
    p = repo / rel
    if sandbox is not None:
        if not sandbox.exists(p):
            return None
        return sandbox.read_text(p)
    return p.read_text(encoding="utf-8") if p.exists() else None


def _write(repo: Path, rel: str, text: str, sandbox: Sandbox | None) -> None:
    p = repo / rel
    if sandbox is not None:
        sandbox.write_text(p, text)
    else:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")


def structural_issues(repo: str | Path, blueprint: Blueprint, sandbox: Sandbox | None = None) -> list[Issue]:
    repo = Path(repo)
    issues = []
    for path in blueprint.files:
        text = _read(repo, path, sandbox)
        if text is None:
            issues.append(Issue("", STRUCTURAL, path, None, f"planned file {path} is missing"))
        elif text == "":
            issues.append(Issue("", STRUCTURAL, path, None, f"planned file {path} is empty (zero bytes)"))
    for n, issue in enumerate(issues, 1):
        issue.id = f"S{n}"
    return issues


_QUALITY_SCHEMA = {
    "type": "object",
    "properties": {
        "score": {"type": "number"},
        "issues": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"line": {"type": "integer"}, "description": {"type": "string"}, "instruction": {"type": "string"}},
                "required": ["description"],
            },
        },
    },
    "required": ["score", "issues"],
}


def static_analyze(
    repo: str | Path,
    blueprint: Blueprint,
    gateway: LlmGateway | None,
    *,
    sandbox: Sandbox | None = None,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> StaticReport:
    """Structural checks without the model, then a per-file quality pass through ``gateway``."""
    repo = Path(repo)
    report = StaticReport(structural_issues(repo, blueprint, sandbox))
    if gateway is None:
        return report
    q = 0
    for path in blueprint.files:
        text = _read(repo, path, sandbox)
        if not text:
            continue
        prompt = templates.render("quality", file=path, source=_numbered(text))
        data, _ = ask_json(gateway, "verifier", "quality", prompt, schema=_QUALITY_SCHEMA, retries=retries, templates=templates)
        report.quality_scores[path] = min(1.0, max(0.0, float(data["score"])))
        for item in data["issues"]:
            q += 1
            report.issues.append(
                Issue(f"Q{q}", QUALITY, path, item.get("line"), item["description"], item.get("instruction", ""))
            )
    return report


# -- patching ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Edit:
    """Replace lines ``start..end`` (1-based, inclusive); ``end == start - 1`` inserts before ``start``."""

    start: int
    end: int
    text: str

    @property
    def is_insert(self) -> bool:
        return self.end == self.start - 1

    def positions(self) -> tuple[int, int]:
        # gap before line k is 2k-1, line k itself is 2k
        if self.is_insert:
            return 2 * self.start - 1, 2 * self.start - 1
        return 2 * self.start, 2 * self.end


@dataclass(frozen=True)
class PatchInstruction:
    file: str
    edits: tuple[Edit, ...]
    rationale: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "PatchInstruction":
        return cls(
            d["file"],
            tuple(Edit(int(e["start_line"]), int(e["end_line"]), e.get("text", "")) for e in d["edits"]),
            d.get("rationale", ""),
        )

    def to_dict(self) -> dict:
        return {
            "file": self.file,
            "edits": [{"start_line": e.start, "end_line": e.end, "text": e.text} for e in self.edits],
            "rationale": self.rationale,
        }


def check_edits(n_lines: int, edits: Iterable[Edit]) -> None:
    edits = list(edits)
    for e in edits:
        if not (1 <= e.start <= n_lines + 1 and e.start - 1 <= e.end <= n_lines):
            raise RangeOutOfBounds(f"edit {e.start}-{e.end} outside a {n_lines}-line file")
    ordered = sorted(edits, key=Edit.positions)
    for ea, eb in zip(ordered, ordered[1:]):
        if eb.positions()[0] <= ea.positions()[1]:
            raise OverlappingEdits(f"edits {ea.start}-{ea.end} and {eb.start}-{eb.end} overlap")


def apply_patch(text: str, instruction: PatchInstruction) -> str:
    """Apply line edits bottom-up; lines outside the edit ranges keep their bytes."""
    lines = text.splitlines(keepends=True)
    check_edits(len(lines), instruction.edits)
    for e in sorted(instruction.edits, key=lambda e: e.positions()[0], reverse=True):
        new = e.text
        if new and not new.endswith("\n"):
            new += "\n"
        if e.start == len(lines) + 1 and lines and not lines[-1].endswith("\n") and new:
            new = "\n" + new
        lines[e.start - 1 : e.end] = [new] if new else []
    return "".join(lines)


def _numbered(text: str, start: int = 1, stop: int | None = None) -> str:
    lines = text.splitlines()
    stop = len(lines) if stop is None else min(stop, len(lines))
    return "\n".join(f"{i:>5}| {lines[i - 1]}" for i in range(max(1, start), stop + 1))


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _safe_rel(repo: Path, rel: str) -> bool:
    if not rel or rel.startswith("/") or "\\" in rel:
        return False
    target = (repo / rel).resolve()
    return repo.resolve() in target.parents


_FIX_SCHEMA = {
    "type": "object",
    "properties": {
        "file": {"type": "string"},
        "edits": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"start_line": {"type": "integer"}, "end_line": {"type": "integer"}, "text": {"type": "string"}},
                "required": ["start_line", "end_line", "text"],
            },
        },
        "rationale": {"type": "string"},
    },
    "required": ["file", "edits"],
}


@dataclass
class StaticRefinement:
    repo: Path
    report: StaticReport
    log: list[dict] = field(default_factory=list)

    @property
    def unfixable(self) -> list[str]:
        return [i.id for i in self.report.issues if i.status == "unfixable"]


def refine_static(
    repo: str | Path,
    report: StaticReport,
    gateway: LlmGateway,
    *,
    blueprint: Blueprint | None = None,
    sandbox: Sandbox | None = None,
    attempts: int = 2,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> StaticRefinement:
    """Visit every issue once: regenerate missing/empty files, patch quality issues.

    An issue whose fix is rejected ``attempts`` times is marked unfixable.
    """
    repo = Path(repo)
    result = StaticRefinement(repo, report)
    for issue in report.issues:
        if issue.status != "open":
            continue
        if issue.category == STRUCTURAL:
            ok = _regenerate(repo, issue, gateway, blueprint, sandbox, attempts, templates)
        else:
            ok = _fix_quality(repo, issue, gateway, sandbox, attempts, templates, result.log)
        issue.status = "fixed" if ok else "unfixable"
        result.log.append({"issue": issue.id, "file": issue.file, "status": issue.status})
    return result


def _regenerate(repo, issue, gateway, blueprint, sandbox, attempts, templates) -> bool:
    spec = blueprint.spec(issue.file) if blueprint is not None else {}
    prompt = templates.render(
        "regenerate",
        file=issue.file,
        spec=dumps(spec),
        blueprint=dumps(blueprint.to_dict()) if blueprint is not None else "{}",
    )
    for _ in range(attempts):
        try:
            reply = gateway.complete(gateway.request("coder", "regenerate", prompt))
        except GatewayError as exc:
            logger.warning("regenerating %s failed: %s", issue.file, exc)
            return False
        code = extract_code(reply)
        if code:
            _write(repo, issue.file, code, sandbox)
            return True
    return False


def _fix_quality(repo, issue, gateway, sandbox, attempts, templates, log) -> bool:
    text = _read(repo, issue.file, sandbox)
    if text is None:
        return False
    where = f" (line {issue.location})" if issue.location else ""
    prompt = templates.render(
        "fix_issue",
        issue=f"{issue.description}{where}. {issue.instruction}".strip(),
        file=issue.file,
        source=_numbered(text),
    )
    n = len(text.splitlines(keepends=True))

    def check(d):
        if d["file"] != issue.file:
            return [f"patch targets {d['file']!r}, expected {issue.file!r}"]
        try:
            check_edits(n, PatchInstruction.from_dict(d).edits)
        except (RangeOutOfBounds, OverlappingEdits) as exc:
            return [str(exc)]
        return []

    try:
        data, _ = ask_json(
            gateway, "verifier", "fix_issue", prompt, schema=_FIX_SCHEMA, check=check, retries=attempts - 1, templates=templates
        )
    except (SchemaParseError, GatewayError) as exc:
        logger.warning("issue %s rejected: %s", issue.id, exc)
        return False
    instr = PatchInstruction.from_dict(data)
    new = apply_patch(text, instr)
    _write(repo, issue.file, new, sandbox)
    log.append({"issue": issue.id, "patch": instr.to_dict(), "before": _sha(text), "after": _sha(new)})
    return True


# -- environment -----------------------------------------------------------------------------


_REQ_NAME = re.compile(r"^\s*([A-Za-z0-9][A-Za-z0-9._-]*)")


def _norm_pkg(name: str) -> str:
    return re.sub(r"[-_.]+", "-", name).lower()


def import_name(package: str) -> str:
    return IMPORT_NAMES.get(_norm_pkg(package), _norm_pkg(package).replace("-", "_"))


@dataclass
class ExecutionTrace:
    command: list[str]
    stdout: str
    stderr: str
    exit_code: int
    duration: float
    error_records: list[dict] = field(default_factory=list)
    timed_out: bool = False

    @property
    def ok(self) -> bool:
        return self.exit_code == 0 and not self.error_records

    def digest(self) -> str:
        payload = "\0".join([" ".join(self.command), str(self.exit_code), self.stdout, self.stderr])
        return _sha(payload)


@dataclass
class SetupResult:
    ok: bool
    manifest: str
    added: list[str]
    replaced: list[str]
    traces: list[ExecutionTrace]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "manifest": self.manifest,
            "added": self.added,
            "replaced": self.replaced,
            "commands": [{"command": t.command, "exit_code": t.exit_code, "digest": t.digest()} for t in self.traces],
        }


def reconcile_manifest(manifest_text: str, dependencies: list[dict]) -> tuple[str, list[str], list[str]]:
    """Add blueprint dependencies missing from a requirements manifest, fix conflicting pins."""
    lines = manifest_text.splitlines()
    index: dict[str, int] = {}
    for i, line in enumerate(lines):
        if line.strip().startswith("#"):
            continue
        m = _REQ_NAME.match(line)
        if m:
            index[_norm_pkg(m.group(1))] = i
    added, replaced = [], []
    for dep in dependencies:
        name, version = dep["name"], dep.get("version", "")
        want = f"{name}=={version}" if version and version[0].isdigit() else f"{name}{version}"
        key = _norm_pkg(name)
        if key not in index:
            lines.append(want)
            index[key] = len(lines) - 1
            added.append(want)
        elif version:
            current = lines[index[key]].strip()
            if current != want and re.search(r"[=<>!~]", current):
                lines[index[key]] = want
                replaced.append(f"{current} -> {want}")
    text = "\n".join(lines) + ("\n" if lines else "")
    return text, added, replaced


def setup_environment(
    repo: str | Path,
    blueprint: Blueprint,
    sandbox: Sandbox,
    *,
    installer: str | list[str] = "verify",
    timeout: float = 600.0,
    manifest: str = "requirements.txt",
) -> SetupResult:
    """Reconcile the manifest with the blueprint and run the installer inside the sandbox.

    ``installer`` is ``"verify"`` (check each dependency is importable),
    ``"pip"``, ``"none"``, or an explicit argv.
    """
    repo = Path(repo)
    current = _read(repo, manifest, sandbox) or ""
    deps = blueprint.execution_environment.get("dependencies", [])
    fixed, added, replaced = reconcile_manifest(current, deps)
    if fixed != current and (current or deps):
        _write(repo, manifest, fixed, sandbox)
    names = [m.group(1) for line in fixed.splitlines() if not line.strip().startswith("#") and (m := _REQ_NAME.match(line))]
    if installer == "none":
        commands = []
    elif installer == "verify":
        commands = [
            ["python", "-c", f"import importlib.util, sys; sys.exit(importlib.util.find_spec({import_name(n)!r}) is None)"]
            for n in names
        ]
    elif installer == "pip":
        commands = [["python", "-m", "pip", "install", "-r", manifest]] if names else []
    else:
        commands = [list(installer)]
    traces = []
    for argv in commands:
        trace = execute(repo, argv, sandbox, timeout)
        traces.append(trace)
        if trace.exit_code != 0:
            raise SetupFailed(f"setup command failed ({trace.exit_code}): {' '.join(argv)}\n{trace.stderr}", trace)
    return SetupResult(True, manifest, added, replaced, traces)


# -- execution ---------------------------------------------------------------------------------

_FRAME = re.compile(r'File "(?P<file>[^"]+)", line (?P<line>\d+)')
DEFAULT_PATTERNS = (
    r"^(?P<file>[\w./-]+\.\w+): error: (?P<message>.+)$",
    r"^(?P<file>[\w./-]+\.\w+):(?P<line>\d+):(?:\d+:)?\s*(?P<message>.+)$",
    r"^(?P<file>[\w./-]+\.sh): line (?P<line>\d+): (?P<message>.+)$",
)


def normalize_output(text: str, repo: Path) -> str:
    root = str(repo.resolve())
    return text.replace(root + "/", "").replace(root, ".")


def parse_errors(stderr: str, exit_code: int, patterns: Iterable[str] = DEFAULT_PATTERNS) -> list[dict]:
    """File/line error records from normalized stderr; empty iff the run succeeded."""
    if exit_code == 0:
        return []
    lines = [l for l in stderr.splitlines() if l.strip()]
    last = lines[-1].strip() if lines else f"exit code {exit_code}"
    frames = [(m.group("file"), int(m.group("line"))) for m in _FRAME.finditer(stderr)]
    local = [f for f in frames if not f[0].startswith(("/", "<"))]
    if local:
        file, line = local[-1]
        return [{"file": file, "line": line, "message": last, "parsed": True}]
    for pat in patterns:
        rx = re.compile(pat, re.MULTILINE)
        found = [m.groupdict() for m in rx.finditer(stderr)]
        if found:
            return [
                {"file": g.get("file"), "line": int(g.get("line") or 0), "message": g.get("message", last).strip(), "parsed": True}
                for g in found
            ]
    return [{"file": None, "line": 0, "message": last, "parsed": False}]


def execute(
    repo: str | Path,
    entry: list[str] | str,
    sandbox: Sandbox,
    timeout: float = DEFAULT_TIMEOUT,
    *,
    env: dict[str, str] | None = None,
    patterns: Iterable[str] = DEFAULT_PATTERNS,
) -> ExecutionTrace:
    if not sandbox.available():
        raise SandboxUnavailable(f"{sandbox.backend} sandbox unavailable")
    repo = Path(repo)
    argv = shlex.split(entry) if isinstance(entry, str) else list(entry)
    res = sandbox.run(argv, cwd=repo, timeout=timeout, env=env)
    stdout = normalize_output(res.stdout, repo)
    stderr = normalize_output(res.stderr, repo)
    if res.timed_out:
        records = [{"file": None, "line": 0, "message": f"timeout after {timeout:g} s", "parsed": True}]
    else:
        records = parse_errors(stderr, res.exit_code, patterns)
    return ExecutionTrace(argv, stdout, stderr, res.exit_code, max(0.0, res.duration), records, res.timed_out)


def scaled_settings(setup: dict, factor: float) -> dict[str, str]:
    """Integer settings scaled by ``factor`` (at least 1); other values unchanged."""
    out = {}
    for k, v in setup.items():
        if isinstance(v, bool) or not isinstance(v, int):
            out[k] = str(v)
        else:
            out[k] = str(max(1, int(round(v * factor))))
    return out


def settings_env(setup: dict, factor: float) -> dict[str, str]:
    env = {"REPOGEN_SCALE": f"{factor:g}"}
    for k, v in scaled_settings(setup, factor).items():
        env["REPOGEN_SETTING_" + re.sub(r"\W+", "_", k).upper()] = v
    return env


def discover_entry(repo: str | Path, blueprint: Blueprint | None, settings: dict[str, str] | None = None) -> list[str] | None:
    repo = Path(repo)
    if (repo / "reproduce.sh").is_file():
        return ["bash", "reproduce.sh"]
    candidates = []
    if blueprint is not None:
        candidates += blueprint.verification_protocol.get("entry_points", [])
        candidates += [s["check"] for s in reversed(blueprint.staged_plan) if s.get("check")]
    for cmd in candidates:
        try:
            return shlex.split(cmd.format(**(settings or {})))
        except (KeyError, IndexError, ValueError):
            continue
    if (repo / "main.py").is_file():
        return ["python", "main.py"]
    return None


# -- repair loop ---------------------------------------------------------------------------------

_FAULT_SCHEMA = {
    "type": "object",
    "properties": {"patches": {"type": "array", "items": _FIX_SCHEMA}},
    "required": ["patches"],
}


@dataclass
class LoopResult:
    repo: Path
    status: str
    log: list[dict]
    final_trace: ExecutionTrace | None = None
    setup: SetupResult | None = None

    @property
    def iterations(self) -> int:
        return sum(1 for e in self.log if "iteration" in e)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "executions": self.iterations,
            "terminal_iteration": self.iterations - 1 if self.iterations else None,
            "setup": self.setup.to_dict() if self.setup else None,
            "iterations": [e for e in self.log if "iteration" in e],
            "events": [e for e in self.log if "iteration" not in e],
        }


def _fault_prompt(repo: Path, trace: ExecutionTrace, sandbox: Sandbox, templates: TemplateStore) -> str:
    errors = "\n".join(f"{r['file'] or '?'}:{r['line']}: {r['message']}" for r in trace.error_records)
    detail = ""
    if any(not r.get("parsed", True) for r in trace.error_records):
        detail = "UNPARSED STDERR\n" + "\n".join(trace.stderr.splitlines()[-60:]) + "\n"
    shown: list[str] = []
    for r in trace.error_records:
        if r["file"] and r["file"] not in shown and _safe_rel(repo, r["file"]):
            shown.append(r["file"])
    for arg in trace.command[1:]:
        if arg.endswith((".sh", ".py")) and arg not in shown and _safe_rel(repo, arg):
            shown.append(arg)
    blocks = []
    for rel in shown:
        text = _read(repo, rel, sandbox)
        if text is None:
            blocks.append(f"--- {rel} (does not exist) ---")
        else:
            blocks.append(f"--- {rel} ---\n{_numbered(text)}")
    listing = "\n".join(sandbox.list_files(repo))
    return templates.render(
        "fault",
        command=" ".join(trace.command),
        errors=errors,
        detail=detail,
        files="\n".join(blocks) + f"\n\nREPOSITORY FILES\n{listing}",
    )


def _repair(repo: Path, trace: ExecutionTrace, sandbox: Sandbox, gateway: LlmGateway, retries: int, templates: TemplateStore):
    prompt = _fault_prompt(repo, trace, sandbox, templates)

    def check(d):
        errs = []
        for p in d["patches"]:
            if not _safe_rel(repo, p["file"]):
                errs.append(f"patch path {p['file']!r} is outside the repository")
                continue
            text = _read(repo, p["file"], sandbox) or ""
            try:
                check_edits(len(text.splitlines(keepends=True)), PatchInstruction.from_dict(p).edits)
            except (RangeOutOfBounds, OverlappingEdits) as exc:
                errs.append(f"{p['file']}: {exc}")
        if not d["patches"]:
            errs.append("no patches proposed")
        return errs

    data, _ = ask_json(gateway, "verifier", "fault", prompt, schema=_FAULT_SCHEMA, check=check, retries=retries, templates=templates)
    applied = []
    for p in data["patches"]:
        instr = PatchInstruction.from_dict(p)
        before = _read(repo, instr.file, sandbox) or ""
        after = apply_patch(before, instr)
        _write(repo, instr.file, after, sandbox)
        applied.append({"patch": instr.to_dict(), "before": _sha(before), "after": _sha(after)})
    return applied


def refine_loop(
    repo: str | Path,
    sandbox: Sandbox,
    gateway: LlmGateway,
    max_iter: int = MAX_ITER,
    *,
    entry: list[str] | str | None = None,
    blueprint: Blueprint | None = None,
    timeout: float = DEFAULT_TIMEOUT,
    installer: str | list[str] = "verify",
    scale: float = 1.0,
    patterns: Iterable[str] = DEFAULT_PATTERNS,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> LoopResult:
    """Execute, diagnose and patch until the run is clean or ``max_iter`` executions happened.

    No patch is applied after the last execution, so the returned repository
    is exactly the state that produced the final trace.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    repo = Path(repo)
    log: list[dict] = []
    setup = None
    if blueprint is not None:
        try:
            setup = setup_environment(repo, blueprint, sandbox, installer=installer, timeout=max(timeout, 600.0))
        except SetupFailed as exc:
            log.append({"event": "setup-failed", "message": str(exc)})
            return LoopResult(repo, "setup-failed", log, exc.trace)
    setup_vars = blueprint.verification_protocol.get("setup", {}) if blueprint is not None else {}
    env = settings_env(setup_vars, scale)
    if entry is None:
        entry = discover_entry(repo, blueprint, scaled_settings(setup_vars, scale))
    if entry is None:
        log.append({"event": "setup-failed", "message": "no entry point found"})
        return LoopResult(repo, "setup-failed", log, None, setup)

    status = "max-iterations"
    trace = None
    for j in range(max_iter):
        trace = execute(repo, entry, sandbox, timeout, env=env, patterns=patterns)
        record = {
            "iteration": j,
            "command": trace.command,
            "exit_code": trace.exit_code,
            "trace_digest": trace.digest(),
            "errors": [{k: r[k] for k in ("file", "line", "message")} for r in trace.error_records],
            "patches": [],
        }
        log.append(record)
        if trace.ok:
            status = "clean"
            break
        if j == max_iter - 1:
            break
        try:
            record["patches"] = _repair(repo, trace, sandbox, gateway, retries, templates)
        except (SchemaParseError, GatewayError) as exc:
            record["repair_error"] = str(exc)
    return LoopResult(repo, status, log, trace, setup)
