"""Reference-repository index and adaptive retrieval.

Indexing runs filter, then understand, then map for each reference repo.
The result is a set of relationship tuples linking reference files to
planned files. During generation, a deterministic gate decides whether a
target gets the context of its highest-confidence tuple.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from .blueprint import Blueprint
from .errors import EmptyRepo, GatewayError, NoTuple, RagIndexError, SchemaParseError
from .gateway import LlmGateway
from .prompts import DEFAULT_RETRIES, DEFAULT_TEMPLATES, TemplateStore, ask_json, dumps

if TYPE_CHECKING:
    from .codemem import GenerationContext

logger = logging.getLogger(__name__)

RELATION_TYPES = ("direct-implementation", "partial-pattern", "utility", "conceptual")
DETAIL_THRESHOLD = 0.6
COMPLEXITY_THRESHOLD = 3

SOURCE_EXTENSIONS = frozenset(
    ".py .pyx .c .cc .cpp .h .hpp .cu .js .ts .java .go .rs .jl .r .m .sh .scala .kt .swift .lua".split()
)
VENDORED_DIRS = frozenset(
    "vendor vendored third_party thirdparty node_modules .git site-packages __pycache__ dist build .venv venv .tox .eggs".split()
)


def _is_binary(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return b"\0" in fh.read(4096)
    except OSError:
        return True


def list_source_files(repo: str | Path) -> list[str]:
    """Repo-relative POSIX paths of source files, vendored and binary files excluded."""
    repo = Path(repo)
    out = []
    for dirpath, dirnames, filenames in os.walk(repo):
        dirnames[:] = sorted(d for d in dirnames if d not in VENDORED_DIRS and not d.endswith(".egg-info"))
        for name in sorted(filenames):
            p = Path(dirpath) / name
            if p.suffix.lower() not in SOURCE_EXTENSIONS or p.is_symlink() or _is_binary(p):
                continue
            out.append(p.relative_to(repo).as_posix())
    return out


def numbered(text: str, limit: int | None = None) -> str:
    lines = text.splitlines()
    if limit is not None and len(lines) > limit:
        lines = lines[:limit] + ["... (truncated)"]
    return "\n".join(f"{i:>5}| {line}" for i, line in enumerate(lines, 1))


@dataclass(frozen=True)
class SourceSummary:
    file: str
    purpose: str
    concepts: tuple[str, ...] = ()
    public_interface: tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {
            "file": self.file,
            "purpose": self.purpose,
            "concepts": list(self.concepts),
            "public_interface": [dict(i) for i in self.public_interface],
        }


@dataclass(frozen=True)
class RelationshipTuple:
    source_file: str
    target_file: str
    relation_type: str
    confidence: float
    context: dict

    def to_dict(self) -> dict:
        return {
            "source_file": self.source_file,
            "target_file": self.target_file,
            "relation_type": self.relation_type,
            "confidence": self.confidence,
            "context": self.context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RelationshipTuple":
        return cls(d["source_file"], d["target_file"], d["relation_type"], float(d["confidence"]), d["context"])


def _sort_key(t: RelationshipTuple):
    return (-t.confidence, t.source_file)


@dataclass(frozen=True)
class RagIndex:
    tuples: tuple[RelationshipTuple, ...] = ()
    repo_manifest: tuple[dict, ...] = ()
    per_target: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        grouped: dict[str, list[RelationshipTuple]] = {}
        for t in self.tuples:
            grouped.setdefault(t.target_file, []).append(t)
        self.per_target.clear()
        for target in sorted(grouped):
            self.per_target[target] = sorted(grouped[target], key=_sort_key)

    def __len__(self) -> int:
        return len(self.tuples)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "repos": list(self.repo_manifest),
            "tuples": [t.to_dict() for t in sorted(self.tuples, key=lambda t: (t.target_file, *_sort_key(t)))],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RagIndex":
        return cls(tuple(RelationshipTuple.from_dict(t) for t in d["tuples"]), tuple(d.get("repos", [])))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RagIndex":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- indexing steps -----------------------------------------------------------------


def filter_relevant_files(
    repo: str | Path,
    blueprint: Blueprint,
    gateway: LlmGateway,
    *,
    warnings: list[str] | None = None,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> list[str]:
    repo = Path(repo)
    if not repo.is_dir():
        raise EmptyRepo(f"{repo} is not a directory")
    candidates = list_source_files(repo)
    if not candidates:
        raise EmptyRepo(f"{repo.name}: no source files")
    listing = "\n".join(
        f"{p} ({len((repo / p).read_text(encoding='utf-8', errors='replace').splitlines())} lines)" for p in candidates
    )
    prompt = templates.render("rag_filter", files="\n".join(blueprint.files), listing=listing)
    schema = {"type": "object", "properties": {"selected": {"type": "array", "items": {"type": "string"}}}, "required": ["selected"]}
    data, _ = ask_json(gateway, "rag", "rag_filter", prompt, schema=schema, retries=retries, templates=templates)
    known = set(candidates)
    picked = []
    for p in data["selected"]:
        if p not in known:
            msg = f"{repo.name}: model selected unknown file {p!r}; dropped"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
        elif p not in picked:
            picked.append(p)
    return picked


_UNDERSTAND_SCHEMA = {
    "type": "object",
    "properties": {
        "purpose": {"type": "string", "minLength": 1},
        "concepts": {"type": "array", "items": {"type": "string"}},
        "public_interface": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"kind": {"type": "string"}, "name": {"type": "string"}, "signature": {"type": "string"}},
                "required": ["name"],
            },
        },
    },
    "required": ["purpose", "public_interface"],
}


def understand_source(
    file: str,
    text: str,
    gateway: LlmGateway,
    *,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> SourceSummary:
    if not text:
        raise ValueError("empty source")
    overhead = gateway.count(templates.render("rag_understand", file=file, source=""))
    room_lines = max(20, (gateway.budget_for("rag") - overhead) * 4 // 60)
    prompt = templates.render("rag_understand", file=file, source=numbered(text, room_lines))
    data, _ = ask_json(
        gateway, "rag", "rag_understand", prompt, schema=_UNDERSTAND_SCHEMA, retries=retries, templates=templates
    )
    return SourceSummary(
        file=file,
        purpose=data["purpose"],
        concepts=tuple(data.get("concepts", [])),
        public_interface=tuple(
            {"kind": i.get("kind", ""), "name": i["name"], "signature": i.get("signature", ""), "purpose": i.get("purpose", "")}
            for i in data["public_interface"]
        ),
    )


_MAP_SCHEMA = {
    "type": "object",
    "properties": {
        "relationships": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "target": {"type": "string"},
                    "relation_type": {"type": "string"},
                    "confidence": {"type": "number"},
                    "snippets": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {"start_line": {"type": "integer"}, "end_line": {"type": "integer"}},
                            "required": ["start_line", "end_line"],
                        },
                    },
                    "usage_notes": {"type": "string"},
                },
                "required": ["target", "relation_type", "confidence"],
            },
        }
    },
    "required": ["relationships"],
}


def map_relationships(
    summary: SourceSummary,
    blueprint: Blueprint,
    gateway: LlmGateway,
    source_text: str,
    *,
    source_path: str | None = None,
    warnings: list[str] | None = None,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> list[RelationshipTuple]:
    """Link one summarized reference file to planned files; invalid parts are dropped with a warning."""
    warns: list[str] = warnings if warnings is not None else []
    first_new = len(warns)
    lines = source_text.splitlines(keepends=True)
    prompt = templates.render(
        "rag_map", files="\n".join(blueprint.files), summary=dumps(summary.to_dict()), line_count=len(lines)
    )
    data, _ = ask_json(gateway, "rag", "rag_map", prompt, schema=_MAP_SCHEMA, retries=retries, templates=templates)
    src = source_path or summary.file
    planned = set(blueprint.files)
    out = []
    for rel in data["relationships"]:
        target = rel["target"]
        if target not in planned:
            warns.append(f"{src}: target {target!r} is not a planned file; dropped")
            continue
        if rel["relation_type"] not in RELATION_TYPES:
            warns.append(f"{src}: unknown relation type {rel['relation_type']!r}; dropped")
            continue
        conf = float(rel["confidence"])
        if not 0.0 <= conf <= 1.0:
            clamped = min(1.0, max(0.0, conf))
            warns.append(f"{src} -> {target}: confidence {conf} clamped to {clamped}")
            conf = clamped
        snippets = []
        for sp in rel.get("snippets", []):
            a, b = sp["start_line"], sp["end_line"]
            if not 1 <= a <= b <= len(lines):
                warns.append(f"{src}: snippet span {a}-{b} outside 1-{len(lines)}; dropped")
                continue
            snippets.append({"path": src, "start_line": a, "end_line": b, "text": "".join(lines[a - 1 : b])})
        out.append(
            RelationshipTuple(src, target, rel["relation_type"], conf, {"snippets": snippets, "usage_notes": rel.get("usage_notes", "")})
        )
    for w in warns[first_new:]:
        logger.warning(w)
    return out


def _index_repo(repo: dict, blueprint: Blueprint, gateway: LlmGateway, workers: int, templates: TemplateStore, retries: int):
    path = Path(repo["path"])
    name = repo.get("name") or path.name
    warns: list[str] = []
    selected = filter_relevant_files(path, blueprint, gateway, warnings=warns, retries=retries, templates=templates)

    def one(rel: str) -> list[RelationshipTuple]:
        text = (path / rel).read_text(encoding="utf-8", errors="replace")
        if not text:
            return []
        summary = understand_source(rel, text, gateway, retries=retries, templates=templates)
        return map_relationships(
            summary, blueprint, gateway, text, source_path=f"{name}/{rel}", warnings=warns, retries=retries, templates=templates
        )

    if workers > 1 and gateway.mode != "replay":
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, selected))
    else:
        results = [one(rel) for rel in selected]
    tuples = [t for r in results for t in r]
    manifest = {"name": name, "license": repo.get("license", ""), "files": selected, "warnings": warns}
    return tuples, manifest


def _repo_entry(repo) -> dict:
    if isinstance(repo, dict):
        return dict(repo)
    return {"path": str(repo)}


def is_blacklisted(path: str | Path, blacklist: Iterable[str]) -> bool:
    p = Path(path).resolve().as_posix()
    for entry in blacklist:
        if "://" in entry:
            continue
        e = Path(entry).resolve().as_posix()
        if p == e or p.startswith(e.rstrip("/") + "/"):
            return True
    return False


def build_index(
    repos: Iterable,
    blueprint: Blueprint,
    gateway: LlmGateway,
    *,
    workers: int = 1,
    blacklist: Iterable[str] = (),
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> RagIndex:
    blacklist = list(blacklist)
    entries = [_repo_entry(r) for r in repos]
    tuples: list[RelationshipTuple] = []
    manifest: list[dict] = []
    failures = 0
    for repo in entries:
        name = repo.get("name") or Path(repo["path"]).name
        if is_blacklisted(repo["path"], blacklist):
            manifest.append({"name": name, "license": repo.get("license", ""), "files": [], "error": "blacklisted"})
            failures += 1
            continue
        try:
            ts, man = _index_repo(repo, blueprint, gateway, workers, templates, retries)
        except (EmptyRepo, SchemaParseError, GatewayError, OSError) as exc:
            logger.warning("indexing %s failed: %s", name, exc)
            manifest.append({"name": name, "license": repo.get("license", ""), "files": [], "error": str(exc)})
            failures += 1
            continue
        tuples.extend(ts)
        manifest.append(man)
    if entries and failures == len(entries):
        raise RagIndexError("every reference repository failed to index: " + "; ".join(m["error"] for m in manifest))
    return RagIndex(tuple(tuples), tuple(manifest))


# -- retrieval ----------------------------------------------------------------------------


def detail_score(spec: dict) -> float:
    """Share of specification detail: half for a signature, half for a described item."""
    items = spec.get("items", [])
    if not items:
        return 0.0
    total = 0.0
    for it in items:
        sig = it.get("signature", "")
        if "(" in sig or (it.get("kind") == "constant" and sig):
            total += 0.5
        if len(it.get("description", "").split()) >= 5:
            total += 0.5
    return total / len(items)


def decide_retrieval(
    ctx: "GenerationContext | None",
    target: str,
    blueprint: Blueprint,
    index: RagIndex | None,
    *,
    detail_threshold: float = DETAIL_THRESHOLD,
    complexity_threshold: int = COMPLEXITY_THRESHOLD,
) -> int:
    """1 when the target is under-specified or complex and the index has something for it."""
    if index is None or not index.per_target.get(target):
        return 0
    spec = blueprint.spec(target)
    sparse = detail_score(spec) < detail_threshold
    complex_ = len(spec.get("links", [])) >= complexity_threshold
    return int(sparse or complex_)


def retrieve(index: RagIndex, target: str) -> dict:
    ranked = index.per_target.get(target)
    if not ranked:
        raise NoTuple(target)
    top = ranked[0]
    return {
        "source_file": top.source_file,
        "target_file": target,
        "relation_type": top.relation_type,
        "confidence": top.confidence,
        "snippets": [dict(s) for s in top.context.get("snippets", [])],
        "usage_notes": top.context.get("usage_notes", ""),
    }


def render_augmentation(aug: dict) -> str:
    lines = [
        f"REFERENCE CONTEXT from {aug['source_file']} ({aug['relation_type']}, confidence {aug['confidence']:.2f}):",
        f"usage notes: {aug['usage_notes']}",
    ]
    for s in aug["snippets"]:
        lines.append(f"--- {s['path']} lines {s['start_line']}-{s['end_line']} ---")
        lines.append(s["text"].rstrip("\n"))
    return "\n".join(lines) + "\n"
