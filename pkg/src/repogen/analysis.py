"""Phase 1 agents: concept analysis, algorithm extraction, blueprint planning.

Both analysis agents read the document only through :func:`query_index`.
Fetched chunks are packed into prompt batches that fit the role budget;
each batch yields a partial schema and the partials are merged.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

from .blueprint import (
    ALGORITHM_SCHEMA,
    BLUEPRINT_SCHEMA,
    CONCEPT_SCHEMA,
    AlgorithmSchema,
    Blueprint,
    ConceptSchema,
    validate_blueprint,
)
from .doc_index import Chunk, ContentIndex, query_index
from .errors import BlueprintValidationError, SchemaParseError
from .gateway import LlmGateway
from .prompts import DEFAULT_RETRIES, DEFAULT_TEMPLATES, TemplateStore, ask_json, dumps

logger = logging.getLogger(__name__)

CONCEPT_KEYWORDS = (
    "introduction",
    "overview",
    "method",
    "approach",
    "architecture",
    "experiment",
    "results",
    "conclusion",
)
ALGORITHM_KEYWORDS = (
    "algorithm",
    "equation",
    "loss",
    "model architecture",
    "training",
    "optimization",
    "hyperparameter",
    "implementation details",
)
QUERY_BUDGET = 16
HITS_PER_QUERY = 2
MAX_REQUERIES = 2


class SearchProvider(Protocol):
    def search(self, query: str) -> list[dict]: ...


@dataclass
class Reading:
    """Chunks fetched for one agent, plus the query log."""

    chunks: list[Chunk]
    queries: list[tuple[str, list[str]]] = field(default_factory=list)


def gather_chunks(
    index: ContentIndex,
    keywords: Iterable[str],
    query_budget: int = QUERY_BUDGET,
    per_query: int = HITS_PER_QUERY,
) -> Reading:
    picked: dict[int, Chunk] = {}
    log = []
    for n, kw in enumerate(keywords):
        if n >= query_budget:
            break
        hits = query_index(index, kw, per_query)
        log.append((kw, [h.chunk.id for h in hits]))
        for h in hits:
            picked.setdefault(h.chunk.k, h.chunk)
    if not picked:
        # nothing matched: fall back to the top-level sections
        for c in index.roots():
            picked[c.k] = c
    return Reading([picked[k] for k in sorted(picked)], log)


def render_chunk(chunk: Chunk, max_tokens: int | None = None, count: Callable[[str], int] | None = None) -> str:
    body = chunk.content
    text = f"[{chunk.id}] {chunk.heading}\n{body}"
    if max_tokens is not None and count is not None and count(text) > max_tokens:
        keep = max(0, max_tokens * 4 - 64)
        text = f"[{chunk.id}] {chunk.heading}\n{body[:keep]}\n[truncated]\n"
    return text


def pack_batches(
    chunks: list[Chunk], overhead: int, budget: int, count: Callable[[str], int]
) -> list[list[tuple[Chunk, str]]]:
    """Greedy, order-preserving packing of rendered chunks under ``budget`` tokens."""
    room = budget - overhead
    if room <= 0:
        raise SchemaParseError("prompt template alone exceeds the role budget")
    batches: list[list[tuple[Chunk, str]]] = []
    cur: list[tuple[Chunk, str]] = []
    used = 0
    for c in chunks:
        text = render_chunk(c, room, count)
        size = count(text + "\n")
        if cur and used + size > room:
            batches.append(cur)
            cur, used = [], 0
        cur.append((c, text))
        used += size
    if cur:
        batches.append(cur)
    return batches


def _batched_prompts(
    gateway: LlmGateway, role: str, template_id: str, reading: Reading, templates: TemplateStore, **extra
) -> list[tuple[list[Chunk], str]]:
    budget = gateway.budget_for(role)
    overhead = gateway.count(templates.render(template_id, chunks="", **extra)) + 8
    out = []
    for batch in pack_batches(reading.chunks, overhead, budget, gateway.count):
        prompt = templates.render(template_id, chunks="\n".join(t for _, t in batch), **extra)
        out.append(([c for c, _ in batch], prompt))
    return out


def _ws(s: str) -> str:
    return " ".join(s.split())


# -- concept agent -------------------------------------------------------------


def run_concept_agent(
    index: ContentIndex,
    gateway: LlmGateway,
    *,
    keywords: Iterable[str] = CONCEPT_KEYWORDS,
    query_budget: int = QUERY_BUDGET,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> ConceptSchema:
    reading = gather_chunks(index, keywords, query_budget)
    merged = ConceptSchema([], [], [], [], chunks_read=[c.id for c in reading.chunks])
    total_retries = 0
    for batch, prompt in _batched_prompts(gateway, "concept", "concept", reading, templates):
        allowed = {c.id: c.heading for c in batch}
        headings = {_ws(c.heading).casefold(): c.heading for c in batch}

        def check(data, allowed=allowed, headings=headings):
            errs = []
            if not data["structure_map"]:
                errs.append("structure_map is empty")
            for e in data["structure_map"]:
                s = e["section"]
                if s not in allowed and _ws(s).casefold() not in headings:
                    errs.append(f"structure_map section {s!r} is not one of the provided chunks")
            referenced = {e["component"] for e in data["implementation_map"]}
            for comp in data["method_components"]:
                if comp["name"] not in referenced:
                    errs.append(f"method component {comp['name']!r} has no implementation_map entry")
            return errs

        data, used = ask_json(
            gateway, "concept", "concept", prompt, schema=CONCEPT_SCHEMA, check=check, retries=retries, templates=templates
        )
        total_retries += used
        for e in data["structure_map"]:
            s = e["section"]
            heading = allowed.get(s) or headings[_ws(s).casefold()]
            if all(x["section"] != heading for x in merged.structure_map):
                merged.structure_map.append({"section": heading, "summary": e["summary"]})
        for comp in data["method_components"]:
            if all(x["name"] != comp["name"] for x in merged.method_components):
                merged.method_components.append(dict(comp))
        for e in data["implementation_map"]:
            if e not in merged.implementation_map:
                merged.implementation_map.append(dict(e))
        for r in data["reproduction_roadmap"]:
            if r not in merged.reproduction_roadmap:
                merged.reproduction_roadmap.append(r)
    merged.retries = total_retries
    problems = merged.violations()
    if problems:
        raise SchemaParseError("concept schema incomplete after merging batches", problems)
    return merged


# -- algorithm agent -----------------------------------------------------------


def run_algorithm_agent(
    index: ContentIndex,
    gateway: LlmGateway,
    search: SearchProvider | None = None,
    *,
    keywords: Iterable[str] = ALGORITHM_KEYWORDS,
    query_budget: int = QUERY_BUDGET,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
    url_blacklist: Iterable[str] = (),
) -> AlgorithmSchema:
    reading = gather_chunks(index, keywords, query_budget, per_query=3)
    out = AlgorithmSchema(chunks_read=[c.id for c in reading.chunks])
    total_retries = 0
    for batch, prompt in _batched_prompts(gateway, "algorithm", "algorithm", reading, templates):
        by_id = {c.id: c for c in batch}

        def check(data, by_id=by_id):
            errs = []
            for kind in ("pseudocode", "equations", "architectures", "hyperparameters"):
                for item in data[kind]:
                    if item["chunk"] not in by_id:
                        errs.append(f"{kind} item cites unknown chunk {item['chunk']!r}")
            for p in data["pseudocode"]:
                c = by_id.get(p["chunk"])
                if c is not None and _ws(p["text"]) not in _ws(c.content):
                    errs.append(f"pseudocode {p['label']!r} is not verbatim text of chunk {p['chunk']}")
            for kind, key in (("hyperparameters", "name"), ("equations", "id"), ("pseudocode", "label")):
                names = [i[key] for i in data[kind]]
                for n in sorted({n for n in names if names.count(n) > 1}):
                    errs.append(f"duplicate {kind} entry {n!r}")
            return errs

        data, used = ask_json(
            gateway,
            "algorithm",
            "algorithm",
            prompt,
            schema=ALGORITHM_SCHEMA,
            check=check,
            retries=retries,
            templates=templates,
        )
        total_retries += used
        for p in data["pseudocode"]:
            if all(x["label"] != p["label"] for x in out.pseudocode):
                out.pseudocode.append(dict(p))
        for e in data["equations"]:
            if all(x["id"] != e["id"] for x in out.equations):
                out.equations.append(dict(e))
        out.architectures.extend(dict(a) for a in data["architectures"])
        for h in data["hyperparameters"]:
            prev = next((x for x in out.hyperparameters if x["name"] == h["name"]), None)
            if prev is None:
                out.hyperparameters.append(dict(h))
            elif prev["value"] != h["value"]:
                out.warnings.append(
                    f"hyperparameter {h['name']!r}: kept {prev['value']!r} ({prev['chunk']}), "
                    f"ignored {h['value']!r} ({h['chunk']})"
                )
    out.retries = total_retries
    if search is not None:
        _web_lookup(out, search, url_blacklist)
    return out


def _web_lookup(schema: AlgorithmSchema, search: SearchProvider, blacklist: Iterable[str]) -> None:
    denied = tuple(blacklist)
    for p in schema.pseudocode:
        query = f"{p['label']} implementation"
        try:
            results = search.search(query)
        except Exception as exc:  # any search backend failure degrades to offline
            schema.warnings.append(f"web search failed ({exc}); continuing offline")
            return
        for r in results:
            url = r.get("url", "")
            if any(url.startswith(d) or d in url for d in denied):
                continue
            schema.web_references.append(
                {"query": query, "title": r.get("title", ""), "url": url, "snippet": r.get("snippet", "")}
            )


def run_analysis(
    index: ContentIndex,
    concept_gateway: LlmGateway,
    algorithm_gateway: LlmGateway,
    **kwargs,
) -> tuple[ConceptSchema, AlgorithmSchema]:
    """Run both analysis agents concurrently, each on its own gateway session."""
    ck = {k[len("concept_") :]: v for k, v in kwargs.items() if k.startswith("concept_")}
    ak = {k[len("algorithm_") :]: v for k, v in kwargs.items() if k.startswith("algorithm_")}
    common = {k: v for k, v in kwargs.items() if not k.startswith(("concept_", "algorithm_"))}
    search = common.pop("search", None)
    with ThreadPoolExecutor(max_workers=2) as pool:
        fc = pool.submit(run_concept_agent, index, concept_gateway, **common, **ck)
        fa = pool.submit(run_algorithm_agent, index, algorithm_gateway, search, **common, **ak)
        return fc.result(), fa.result()


# -- code planning agent ---------------------------------------------------------


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except (TypeError, ValueError):
            pass
    return value


def reconcile(blueprint: Blueprint, algo: AlgorithmSchema) -> list[str]:
    """Algorithm-schema hyperparameter values override conflicting setup values."""
    notes = []
    setup = blueprint.verification_protocol.setdefault("setup", {})
    for name, value in algo.hyperparameter_map().items():
        if name in setup and str(setup[name]) != str(value):
            notes.append(f"setup[{name!r}]: {setup[name]!r} replaced by algorithm value {value!r}")
            setup[name] = _coerce(value)
    return notes


_QUOTED = re.compile(r"'([^']+)'")


def _requery_context(index: ContentIndex, violations: list[str], limit: int = 4) -> str:
    terms = []
    for v in violations:
        for t in _QUOTED.findall(v):
            t = t.rsplit("/", 1)[-1].rsplit(".", 1)[0]
            if t not in terms:
                terms.append(t)
    seen: dict[int, Chunk] = {}
    for t in terms[:limit]:
        for hit in query_index(index, t, 1):
            seen.setdefault(hit.chunk.k, hit.chunk)
    return "\n".join(render_chunk(seen[k]) for k in sorted(seen)) or "(no matching sections)"


def synthesize_blueprint(
    concept: ConceptSchema,
    algo: AlgorithmSchema,
    index: ContentIndex,
    gateway: LlmGateway,
    *,
    retries: int = DEFAULT_RETRIES,
    max_requeries: int = MAX_REQUERIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> Blueprint:
    prompt = templates.render(
        "planner",
        concept=dumps(concept.to_dict()),
        algorithm=dumps({k: v for k, v in algo.to_dict().items() if k not in ("chunks_read", "warnings")}),
    )
    data, _ = ask_json(gateway, "planner", "planner", prompt, schema=BLUEPRINT_SCHEMA, retries=retries, templates=templates)
    attempt = 0
    while True:
        bp = Blueprint.from_dict({**data, "algorithm_items": algo.items(), "schema_version": 1})
        bp.notes = reconcile(bp, algo)
        violations = validate_blueprint(bp, algo)
        if not violations:
            return bp
        if attempt >= max_requeries:
            raise BlueprintValidationError(violations)
        attempt += 1
        logger.info("blueprint has %d violations; targeted re-query %d", len(violations), attempt)
        fix_prompt = templates.render(
            "planner_fix",
            blueprint=dumps(data),
            violations="\n".join(f"- {v}" for v in violations),
            chunks=_requery_context(index, violations),
        )
        data, _ = ask_json(
            gateway, "planner", "planner_fix", fix_prompt, schema=BLUEPRINT_SCHEMA, retries=retries, templates=templates
        )
