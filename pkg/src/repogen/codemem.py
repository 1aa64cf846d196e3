"""Stateful file-by-file generation driven by a compressed code memory.

Each step builds a context from the blueprint plus interface summaries of
the already-implemented files the target depends on (never their source),
generates the target file, summarizes it, and appends the summary to the
memory.
"""

from __future__ import annotations

import json
import logging
import posixpath
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from . import coderag
from .blueprint import Blueprint
from .errors import BudgetExceeded, CyclicDependency, DuplicateFile, EmptyGeneration
from .gateway import LlmGateway
from .prompts import DEFAULT_RETRIES, DEFAULT_TEMPLATES, TemplateStore, ask_json, dumps, extract_code
from .tokens import DEFAULT_BUDGET, Tokenizer, count_tokens, shared_ngrams

logger = logging.getLogger(__name__)

CODE_RETRIES = 1
LEAK_NGRAM = 12

_FROM_RE = re.compile(r"^\s*from\s+(\.*[\w.]*)\s+import\s+(.*)$")
_IMPORT_RE = re.compile(r"^\s*import\s+(.+)$")


# -- lexical import scan ---------------------------------------------------------


def scan_imports(text: str) -> list[tuple[str, list[str]]]:
    """``(module, symbols)`` for every import statement, found by line patterns."""
    out: list[tuple[str, list[str]]] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        m = _FROM_RE.match(line)
        if m:
            names = m.group(2).split("#")[0]
            if "(" in names:
                while ")" not in names and i + 1 < len(lines):
                    i += 1
                    names += " " + lines[i].split("#")[0]
            names = names.replace("(", " ").replace(")", " ").replace("\\", " ")
            syms = [n.strip().split(" as ")[0].strip() for n in names.split(",") if n.strip()]
            out.append((m.group(1), syms))
        else:
            m = _IMPORT_RE.match(line)
            if m:
                for part in m.group(1).split("#")[0].split(","):
                    mod = part.strip().split(" as ")[0].strip()
                    if mod:
                        out.append((mod, []))
        i += 1
    return out


def resolve_module(module: str, importer: str, files: Iterable[str]) -> str | None:
    """Planned path an import refers to, or None for external packages."""
    fileset = set(files)
    level = len(module) - len(module.lstrip("."))
    name = module.lstrip(".")
    importer_dir = posixpath.dirname(importer)
    if level:
        base = importer_dir
        for _ in range(level - 1):
            base = posixpath.dirname(base)
        stems = [posixpath.join(base, *name.split(".")) if name else base]
    else:
        rel = posixpath.join(*name.split("."))
        stems = [rel]
        if importer_dir:
            stems.append(posixpath.join(importer_dir, rel))
        stems.append(posixpath.join("src", rel))
    for stem in stems:
        for cand in (f"{stem}.py", f"{stem}/__init__.py"):
            cand = posixpath.normpath(cand)
            if cand in fileset:
                return cand
    return None


def internal_dependencies(file: str, text: str, files: Iterable[str]) -> list[str]:
    files = list(files)
    if not file.endswith(".py"):
        return []
    deps: list[str] = []
    for module, syms in scan_imports(text):
        target = resolve_module(module, file, files)
        if target is not None and target != file and target not in deps:
            deps.append(target)
        # `from pkg import submodule`
        for s in syms:
            sub = resolve_module(f"{module}.{s}" if module.strip(".") else module + s, file, files)
            if sub is not None and sub != file and sub not in deps:
                deps.append(sub)
    return deps


# -- memory ---------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryEntry:
    file: str
    purpose: str
    public_interface: tuple[dict, ...] = ()
    afferent: tuple[dict, ...] = ()
    efferent_predicted: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "file": self.file,
            "purpose": self.purpose,
            "public_interface": [dict(i) for i in self.public_interface],
            "afferent": [dict(a) for a in self.afferent],
            "efferent_predicted": list(self.efferent_predicted),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryEntry":
        return cls(
            d["file"],
            d["purpose"],
            tuple(dict(i) for i in d.get("public_interface", [])),
            tuple({"module": a["module"], "symbols": list(a.get("symbols", []))} for a in d.get("afferent", [])),
            tuple(d.get("efferent_predicted", [])),
        )

    def render(self) -> str:
        lines = [f"### {self.file}", f"purpose: {self.purpose}"]
        if self.public_interface:
            lines.append("interface:")
            for item in self.public_interface:
                lines.append(f"  - {item['kind']} {item['signature'] or item['name']}: {item.get('purpose', '')}")
        if self.afferent:
            imports = "; ".join(
                a["module"] + (f" ({', '.join(a['symbols'])})" if a["symbols"] else "") for a in self.afferent
            )
            lines.append(f"imports: {imports}")
        if self.efferent_predicted:
            lines.append(f"expected users: {', '.join(self.efferent_predicted)}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CodeMemory:
    entries: dict = field(default_factory=dict)
    generation_order: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.generation_order)

    def __contains__(self, path: str) -> bool:
        return path in self.entries

    def to_dict(self) -> dict:
        return {
            "generation_order": list(self.generation_order),
            "entries": [self.entries[p].to_dict() for p in self.generation_order],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodeMemory":
        entries = {e["file"]: MemoryEntry.from_dict(e) for e in d["entries"]}
        return cls(entries, tuple(d["generation_order"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def update_memory(memory: CodeMemory, entry: MemoryEntry) -> CodeMemory:
    if entry.file in memory.entries:
        raise DuplicateFile(entry.file)
    entries = dict(memory.entries)
    entries[entry.file] = entry
    return CodeMemory(entries, memory.generation_order + (entry.file,))


# -- context ----------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationContext:
    blueprint: Blueprint
    selected_summaries: tuple[MemoryEntry, ...]
    target: str
    next_target_hint: str | None = None
    retrieved_context: dict | None = None
    truncated: bool = False

    def render(self) -> str:
        bp = self.blueprint
        spec = bp.spec(self.target)
        desc = next((f["description"] for f in bp.file_hierarchy if f["path"] == self.target), "")
        parts = [f"TARGET FILE: {self.target}", f"DESCRIPTION: {desc}", "TARGET SPECIFICATION:", dumps(spec)]
        linked = {k: bp.algorithm_items[k] for k in spec.get("links", []) if k in bp.algorithm_items}
        if linked:
            parts += ["LINKED ALGORITHM ITEMS:", dumps(linked)]
        if self.next_target_hint:
            parts.append(f"NEXT PLANNED FILE (advisory): {self.next_target_hint}")
        parts += ["BLUEPRINT:", dumps(bp.to_dict())]
        parts.append("IMPLEMENTED FILE SUMMARIES:")
        if self.selected_summaries:
            parts += [e.render() for e in self.selected_summaries]
        else:
            parts.append("(none)")
        if self.retrieved_context is not None:
            parts.append(coderag.render_augmentation(self.retrieved_context))
        return "\n".join(parts) + "\n"


def _ranked_candidates(memory: CodeMemory, target: str, blueprint: Blueprint) -> list[MemoryEntry]:
    deps = set(blueprint.depends_on(target))
    pos = {p: i for i, p in enumerate(blueprint.files)}
    direct = sorted((e for e in memory.entries.values() if e.file in deps), key=lambda e: pos.get(e.file, len(pos)))
    users = sorted(
        (e for e in memory.entries.values() if e.file not in deps and target in e.efferent_predicted),
        key=lambda e: pos.get(e.file, len(pos)),
    )
    return direct + users


def select_relevant_memory(
    memory: CodeMemory,
    target: str,
    blueprint: Blueprint,
    budget: int | None = None,
    tokenizer: Tokenizer | None = None,
) -> tuple[list[MemoryEntry], bool]:
    """Dependency summaries first, then predicted-consumer links; prefix that fits ``budget``.

    Returns ``(entries, truncated)``.
    """
    ranked = _ranked_candidates(memory, target, blueprint)
    if budget is None:
        return ranked, False
    kept, used = [], 0
    for e in ranked:
        size = count_tokens(e.render() + "\n", tokenizer)
        if used + size > budget:
            return kept, True
        kept.append(e)
        used += size
    return kept, False


def formulate_context(
    blueprint: Blueprint,
    memory: CodeMemory,
    target: str,
    retrieval: dict | None = None,
    *,
    budget: int = DEFAULT_BUDGET,
    tokenizer: Tokenizer | None = None,
    next_hint: str | None = None,
) -> GenerationContext:
    if target not in blueprint.files:
        raise ValueError(f"{target!r} is not a planned file")
    if target in memory:
        raise ValueError(f"{target!r} is already implemented")
    base = GenerationContext(blueprint, (), target, next_hint, retrieval)
    base_tokens = count_tokens(base.render(), tokenizer)
    if base_tokens > budget:
        raise BudgetExceeded(f"context for {target!r} without summaries is {base_tokens} tokens; budget {budget}")
    entries, truncated = select_relevant_memory(memory, target, blueprint, budget - base_tokens, tokenizer)
    return replace(base, selected_summaries=tuple(entries), truncated=truncated)


# -- model calls ---------------------------------------------------------------------


def generate_file(
    ctx: GenerationContext,
    gateway: LlmGateway,
    repo_dir: str | Path | None = None,
    *,
    retries: int = CODE_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> str:
    context = ctx.render()
    for attempt in range(retries + 1):
        tid = "coder" if attempt == 0 else "coder_retry"
        reply = gateway.complete(gateway.request("coder", tid, templates.render(tid, context=context)))
        code = extract_code(reply)
        if code is not None:
            if repo_dir is not None:
                out = Path(repo_dir) / ctx.target
                out.parent.mkdir(parents=True, exist_ok=True)
                out.write_text(code, encoding="utf-8")
            return code
    raise EmptyGeneration(f"no code for {ctx.target!r} after {retries + 1} attempts")


_SUMMARY_SCHEMA = {
    "type": "object",
    "properties": {
        "purpose": {"type": "string", "minLength": 1},
        "public_interface": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "kind": {"type": "string"},
                    "name": {"type": "string", "minLength": 1},
                    "signature": {"type": "string"},
                    "purpose": {"type": "string"},
                },
                "required": ["kind", "name", "signature"],
            },
        },
        "afferent": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"module": {"type": "string", "minLength": 1}, "symbols": {"type": "array"}},
                "required": ["module"],
            },
        },
        "efferent_predicted": {"type": "array", "items": {"type": "string"}},
        "next_target": {"type": ["string", "null"]},
    },
    "required": ["purpose", "public_interface", "afferent", "efferent_predicted"],
}


def summary_problems(file: str, text: str, data: dict, planned: Iterable[str] | None = None) -> list[str]:
    """Consistency of a summarizer reply with the file it describes."""
    errs = []
    names = [i["name"] for i in data["public_interface"]]
    for n in sorted({n for n in names if names.count(n) > 1}):
        errs.append(f"public_interface name {n!r} listed twice")
    present: dict[str, set[str]] = {}
    if file.endswith(".py"):
        for mod, syms in scan_imports(text):
            present.setdefault(mod, set()).update(syms)
    claimed = {a["module"]: set(a.get("symbols", [])) for a in data["afferent"]}
    for mod in sorted(set(claimed) - set(present)):
        errs.append(f"afferent claims import of {mod!r}, which the file does not import")
    for mod in sorted(set(present) - set(claimed)):
        errs.append(f"file imports {mod!r} but afferent omits it")
    for mod in sorted(set(claimed) & set(present)):
        extra = claimed[mod] - present[mod]
        if extra and present[mod]:
            errs.append(f"afferent claims symbols {sorted(extra)} from {mod!r} that are not imported")
    if planned is not None:
        planned = set(planned)
        for p in data["efferent_predicted"]:
            if p not in planned:
                errs.append(f"efferent_predicted path {p!r} is not a planned file")
            elif p == file:
                errs.append("efferent_predicted lists the file itself")
    return errs


def summarize_with_hint(
    file: str,
    text: str,
    gateway: LlmGateway,
    *,
    blueprint: Blueprint | None = None,
    memory: CodeMemory | None = None,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> tuple[MemoryEntry, str | None]:
    if not text:
        raise ValueError("cannot summarize an empty file")
    planned = blueprint.files if blueprint is not None else None
    implemented = list(memory.generation_order) if memory is not None else []
    prompt = templates.render(
        "summarizer",
        file=file,
        files=", ".join(planned or []),
        implemented=", ".join(implemented) or "(none)",
        source=text,
    )
    data, _ = ask_json(
        gateway,
        "summarizer",
        "summarizer",
        prompt,
        schema=_SUMMARY_SCHEMA,
        check=lambda d: summary_problems(file, text, d, planned),
        retries=retries,
        templates=templates,
    )
    entry = MemoryEntry(
        file=file,
        purpose=data["purpose"],
        public_interface=tuple(
            {"kind": i["kind"], "name": i["name"], "signature": i["signature"], "purpose": i.get("purpose", "")}
            for i in data["public_interface"]
        ),
        afferent=tuple({"module": a["module"], "symbols": list(a.get("symbols", []))} for a in data["afferent"]),
        efferent_predicted=tuple(data["efferent_predicted"]),
    )
    return entry, data.get("next_target")


def summarize_file(file: str, text: str, gateway: LlmGateway, **kwargs) -> MemoryEntry:
    return summarize_with_hint(file, text, gateway, **kwargs)[0]


# -- scheduling ------------------------------------------------------------------------


def _order_key(blueprint: Blueprint, path: str) -> tuple[int, int, int]:
    return (blueprint.stage_of(path), blueprint.priority(path), blueprint.position(path))


def eligible_targets(done: Iterable[str], blueprint: Blueprint) -> list[str]:
    done = set(done)
    ready = [f for f in blueprint.files if f not in done and all(d in done for d in blueprint.depends_on(f))]
    return sorted(ready, key=lambda p: _order_key(blueprint, p))


def topological_order(blueprint: Blueprint) -> list[str]:
    done: list[str] = []
    while len(done) < len(blueprint.files):
        ready = eligible_targets(done, blueprint)
        if not ready:
            raise CyclicDependency([f for f in blueprint.files if f not in done])
        done.append(ready[0])
    return done


def select_next_target(
    memory: CodeMemory,
    blueprint: Blueprint,
    gateway: LlmGateway | None = None,
    *,
    hint: str | None = None,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> str | None:
    """Next file to implement, or None when every planned file is in memory.

    A model suggestion (``hint``, or asked from ``gateway``) is accepted only
    if the file is unimplemented and all its planned dependencies are done;
    otherwise the topological choice with stage-priority tiebreak wins.
    """
    remaining = [f for f in blueprint.files if f not in memory]
    if not remaining:
        return None
    ready = eligible_targets(memory.generation_order, blueprint)
    if not ready:
        raise CyclicDependency(remaining)
    if hint is None and gateway is not None:
        prompt = templates.render(
            "next_target", implemented=", ".join(memory.generation_order) or "(none)", remaining=", ".join(remaining)
        )
        try:
            data, _ = ask_json(gateway, "planner", "next_target", prompt, retries=0, templates=templates)
            hint = data.get("next_target") if isinstance(data, dict) else None
        except Exception as exc:  # a bad suggestion only costs the advisory hint
            logger.info("next-target suggestion unusable: %s", exc)
    if hint in ready:
        return hint
    if hint is not None:
        logger.info("model suggested %r, not eligible; using %r", hint, ready[0])
    return ready[0]


# -- the loop ----------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    target: str
    selected: list[str]
    truncated: bool
    retrieved_from: str | None
    context_tokens: int
    naive_tokens: int
    leaked_ngrams: int
    dependencies_ready: bool
    model_hint: str | None
    hint_followed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GenerationResult:
    memory: CodeMemory
    steps: list[StepRecord]
    files: dict[str, str]
    warnings: list[str] = field(default_factory=list)
    contradictions: list[str] = field(default_factory=list)

    def invariant_summary(self, budget: int) -> dict:
        return {
            "steps": len(self.steps),
            "max_context_tokens": max((s.context_tokens for s in self.steps), default=0),
            "contexts_over_budget": sum(s.context_tokens > budget for s in self.steps),
            "leaked_ngram_steps": sum(s.leaked_ngrams > 0 for s in self.steps),
            "dependency_violations": sum(not s.dependencies_ready for s in self.steps),
            "truncated_steps": sum(s.truncated for s in self.steps),
            "retrieval_steps": sum(s.retrieved_from is not None for s in self.steps),
        }


def run_generation(
    blueprint: Blueprint,
    gateway: LlmGateway,
    repo_dir: str | Path,
    *,
    memory_dir: str | Path | None = None,
    rag_index: "coderag.RagIndex | None" = None,
    retrieval: bool = True,
    budget: int | None = None,
    tokenizer: Tokenizer | None = None,
    templates: TemplateStore = DEFAULT_TEMPLATES,
    retries: int = DEFAULT_RETRIES,
    leak_n: int = LEAK_NGRAM,
) -> GenerationResult:
    """Generate every planned file, one per step, in dependency order."""
    repo_dir = Path(repo_dir)
    repo_dir.mkdir(parents=True, exist_ok=True)
    if memory_dir is not None:
        Path(memory_dir).mkdir(parents=True, exist_ok=True)
    budget = budget if budget is not None else gateway.budget_for("coder")
    overhead = count_tokens(templates.render("coder", context=""), tokenizer)
    ctx_budget = budget - overhead
    bp_text = dumps(blueprint.to_dict())

    memory = CodeMemory()
    files: dict[str, str] = {}
    steps: list[StepRecord] = []
    warnings: list[str] = []
    contradictions: list[str] = []
    hint: str | None = None
    for step in range(1, len(blueprint.files) + 1):
        target = select_next_target(memory, blueprint, hint=hint, templates=templates)
        if target is None:  # pragma: no cover - loop is bounded by the file count
            break
        deps_ready = all(d in memory for d in blueprint.depends_on(target))
        after = eligible_targets(memory.generation_order + (target,), blueprint)
        next_hint = after[0] if after else None

        ctx = formulate_context(blueprint, memory, target, budget=ctx_budget, tokenizer=tokenizer, next_hint=next_hint)
        retrieved_from = None
        if retrieval and rag_index is not None and coderag.decide_retrieval(ctx, target, blueprint, rag_index):
            aug = coderag.retrieve(rag_index, target)
            try:
                ctx = formulate_context(
                    blueprint, memory, target, aug, budget=ctx_budget, tokenizer=tokenizer, next_hint=next_hint
                )
                retrieved_from = aug["source_file"]
            except BudgetExceeded:
                warnings.append(f"{target}: retrieved context does not fit the budget; generated without it")

        rendered = ctx.render()
        code = generate_file(ctx, gateway, repo_dir, templates=templates)
        prior = list(files.values())
        leaked = shared_ngrams(rendered, prior, leak_n) if prior else 0
        naive = count_tokens(bp_text + "".join(prior), tokenizer)

        entry, model_hint = summarize_with_hint(
            target, code, gateway, blueprint=blueprint, memory=memory, retries=retries, templates=templates
        )
        actual = internal_dependencies(target, code, blueprint.files)
        for dep in actual:
            if dep not in memory:
                warnings.append(f"{target} imports {dep}, which was not implemented before it")
        for e in memory.entries.values():
            if target in e.efferent_predicted and e.file not in actual:
                contradictions.append(f"{e.file} predicted {target} as a consumer, but {target} does not import it")

        memory = update_memory(memory, entry)
        files[target] = code
        if memory_dir is not None:
            (Path(memory_dir) / f"{step:03d}.json").write_text(memory.dumps(), encoding="utf-8")
        hint = model_hint
        steps.append(
            StepRecord(
                step=step,
                target=target,
                selected=[e.file for e in ctx.selected_summaries],
                truncated=ctx.truncated,
                retrieved_from=retrieved_from,
                context_tokens=count_tokens(rendered, tokenizer),
                naive_tokens=naive,
                leaked_ngrams=leaked,
                dependencies_ready=deps_ready,
                model_hint=model_hint,
                hint_followed=False,
            )
        )
        if len(steps) > 1:
            steps[-2].hint_followed = steps[-2].model_hint == target
    remaining = [f for f in blueprint.files if f not in memory]
    if remaining:  # pragma: no cover - select_next_target raises first
        raise CyclicDependency(remaining)
    return GenerationResult(memory, steps, files, warnings, contradictions)
