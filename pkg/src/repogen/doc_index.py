"""Hierarchical content index over a source document.

The document is split into tagged blocks (text, equation, table,
figure-caption, pseudocode), then grouped into heading-delimited chunks.
Agents query the index by keyword instead of reading the whole document.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyInput, UnsupportedFormat

FORMATS = ("markdown", "plain")
TAGS = ("text", "equation", "table", "figure-caption", "pseudocode")
FRONTMATTER = "frontmatter"
INDEX_VERSION = 1

_LINE_RE = re.compile(r"[^\n]*\n|[^\n]+$")
_HASH_HEADING = re.compile(r"^(#{1,6})[ \t]+(.*?)[ \t]*#*[ \t]*$")
_NUMBERED = re.compile(r"^(\d{1,2}(?:\.\d{1,2})*)\.?[ \t]+(\S.*?)[ \t]*$")
_FENCE_OPEN = re.compile(r"^[ \t]{0,3}(`{3,}|~{3,})")
_FIGURE = re.compile(r"^[ \t]*(!\[|(Figure|Fig\.)[ \t]*\d+[:.])")
_MATH_ENV = re.compile(r"^[ \t]*\\begin\{(equation\*?|align\*?|gather\*?|multline\*?)\}")
_TOKEN_RE = re.compile(r"\w+")


def normalize_newlines(raw: str) -> str:
    return raw.replace("\r\n", "\n").replace("\r", "\n")


@dataclass(frozen=True)
class Heading:
    level: int
    title: str
    line: str
    number: str | None = None


@dataclass(frozen=True)
class Block:
    tag: str
    text: str
    heading: Heading | None = None


@dataclass(frozen=True)
class SourceDocument:
    elements: tuple[Block, ...]
    origin: str = ""
    format: str = "markdown"

    @property
    def text(self) -> str:
        return "".join(b.text for b in self.elements)


def _split_lines(text: str) -> list[str]:
    return _LINE_RE.findall(text)


def _blank(line: str | None) -> bool:
    return line is None or not line.strip()


def _numbered_heading(lines: list[str], i: int) -> Heading | None:
    stripped = lines[i].strip()
    m = _NUMBERED.match(stripped)
    if not m:
        return None
    number, title = m.group(1), m.group(2)
    if not title[0].isupper() or title[-1] in ".:;,":
        return None
    if len(title) > 80 or len(title.split()) > 12:
        return None
    prev = lines[i - 1] if i > 0 else None
    nxt = lines[i + 1] if i + 1 < len(lines) else None
    if not (_blank(prev) and _blank(nxt)):
        return None
    return Heading(level=number.count(".") + 1, title=title, line=stripped, number=number)


def _hash_heading(line: str) -> Heading | None:
    m = _HASH_HEADING.match(line.rstrip("\n"))
    if not m or not m.group(2):
        return None
    title = m.group(2)
    number = None
    nm = re.match(r"^(\d{1,2}(?:\.\d{1,2})*)\.?[ \t]+(\S.*)$", title)
    if nm:
        number, title = nm.group(1), nm.group(2)
    return Heading(level=len(m.group(1)), title=title, line=line.strip(), number=number)


def _heading_at(lines: list[str], i: int, fmt: str) -> Heading | None:
    if fmt == "markdown":
        h = _hash_heading(lines[i])
        if h is not None:
            return h
    return _numbered_heading(lines, i)


def _special_end(lines: list[str], i: int, fmt: str) -> tuple[str, int] | None:
    """If a delimited region starts at line ``i``, return (tag, end_exclusive)."""
    line = lines[i]
    stripped = line.strip()
    n = len(lines)

    fence = _FENCE_OPEN.match(line)
    if fence:
        marker = fence.group(1)
        j = i + 1
        while j < n:
            s = lines[j].strip()
            if s.startswith(marker[0] * len(marker)) and not s.strip(marker[0]):
                return "pseudocode", j + 1
            j += 1
        return "pseudocode", n

    if stripped.startswith("$$"):
        if len(stripped) > 2 and stripped.endswith("$$") and len(stripped) >= 4:
            return "equation", i + 1
        j = i + 1
        while j < n and not lines[j].strip().endswith("$$"):
            j += 1
        return "equation", min(j + 1, n)

    if stripped.startswith("\\["):
        j = i
        while j < n and "\\]" not in lines[j]:
            j += 1
        return "equation", min(j + 1, n)

    env = _MATH_ENV.match(line)
    if env:
        closing = "\\end{" + env.group(1) + "}"
        j = i
        while j < n and closing not in lines[j]:
            j += 1
        return "equation", min(j + 1, n)

    if fmt == "markdown" and stripped.startswith("|"):
        j = i
        while j < n and lines[j].strip().startswith("|"):
            j += 1
        return "table", j

    if _FIGURE.match(line) and (fmt == "markdown" or not stripped.startswith("![")):
        return "figure-caption", i + 1

    return None


def parse_document(raw: str, format: str = "markdown", origin: str = "") -> SourceDocument:
    """Split ``raw`` into tagged blocks whose concatenation is the LF-normalized text."""
    if format not in FORMATS:
        raise UnsupportedFormat(f"unsupported format {format!r}; expected one of {FORMATS}")
    if not raw:
        raise EmptyInput("document is empty")
    text = normalize_newlines(raw)
    lines = _split_lines(text)
    blocks: list[Block] = []
    pending: list[str] = []

    def flush():
        if pending:
            blocks.append(Block("text", "".join(pending)))
            pending.clear()

    i = 0
    while i < len(lines):
        special = _special_end(lines, i, format)
        if special is not None:
            flush()
            tag, end = special
            blocks.append(Block(tag, "".join(lines[i:end])))
            i = end
            continue
        heading = _heading_at(lines, i, format)
        if heading is not None:
            flush()
            blocks.append(Block("text", lines[i], heading))
            i += 1
            continue
        pending.append(lines[i])
        i += 1
    flush()
    return SourceDocument(tuple(blocks), origin=origin, format=format)


def load_document(path: str | Path, format: str | None = None) -> SourceDocument:
    path = Path(path)
    if format is None:
        format = "markdown" if path.suffix.lower() in (".md", ".markdown") else "plain"
    raw = path.read_text(encoding="utf-8")
    return parse_document(raw, format, origin=path.name)


@dataclass(frozen=True)
class Chunk:
    """One heading-delimited section; ``span`` is a half-open block range."""

    k: int
    heading: str
    title: str
    depth: int
    span: tuple[int, int]
    parent: int | None
    content: str

    @property
    def id(self) -> str:
        return f"s{self.k + 1}"


@dataclass(frozen=True)
class ContentIndex:
    chunks: tuple[Chunk, ...]
    blocks: tuple[Block, ...]
    origin: str = ""
    format: str = "markdown"
    _by_id: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._by_id.update({c.id: c for c in self.chunks})

    def __len__(self) -> int:
        return len(self.chunks)

    def get(self, chunk_id: str) -> Chunk | None:
        return self._by_id.get(chunk_id)

    def children(self, k: int) -> list[Chunk]:
        return [c for c in self.chunks if c.parent == k]

    def roots(self) -> list[Chunk]:
        return [c for c in self.chunks if c.parent is None]

    def chunk_blocks(self, k: int) -> tuple[Block, ...]:
        start, end = self.chunks[k].span
        return self.blocks[start:end]

    @property
    def text(self) -> str:
        return "".join(c.content for c in self.chunks)

    def to_dict(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "origin": self.origin,
            "format": self.format,
            "chunks": [
                {
                    "id": c.id,
                    "heading": c.heading,
                    "title": c.title,
                    "depth": c.depth,
                    "span": list(c.span),
                    "parent": c.parent,
                    "content": c.content,
                    "tags": [b.tag for b in self.blocks[c.span[0] : c.span[1]]],
                }
                for c in self.chunks
            ],
            "blocks": [
                {
                    "tag": b.tag,
                    "text": b.text,
                    "heading": None
                    if b.heading is None
                    else {"level": b.heading.level, "title": b.heading.title, "line": b.heading.line, "number": b.heading.number},
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContentIndex":
        blocks = tuple(
            Block(b["tag"], b["text"], None if b["heading"] is None else Heading(**b["heading"])) for b in d["blocks"]
        )
        chunks = tuple(
            Chunk(k, c["heading"], c["title"], c["depth"], tuple(c["span"]), c["parent"], c["content"])
            for k, c in enumerate(d["chunks"])
        )
        return cls(chunks, blocks, d.get("origin", ""), d.get("format", "markdown"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ContentIndex":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_index(doc: SourceDocument) -> ContentIndex:
    blocks = doc.elements
    if not blocks:
        raise EmptyInput("document has no blocks")
    starts = [i for i, b in enumerate(blocks) if b.heading is not None]
    bounds: list[tuple[int, int, Heading | None]] = []
    if not starts or starts[0] > 0:
        bounds.append((0, starts[0] if starts else len(blocks), None))
    for n, s in enumerate(starts):
        e = starts[n + 1] if n + 1 < len(starts) else len(blocks)
        bounds.append((s, e, blocks[s].heading))

    chunks: list[Chunk] = []
    stack: list[Chunk] = []
    for k, (s, e, h) in enumerate(bounds):
        content = "".join(b.text for b in blocks[s:e])
        if h is None:
            heading, title, depth = FRONTMATTER, FRONTMATTER, 1
        else:
            heading, title, depth = h.line.lstrip("#").strip(), h.title, h.level
        while stack and stack[-1].depth >= depth:
            stack.pop()
        parent = stack[-1].k if stack else None
        chunk = Chunk(k, heading, title, depth, (s, e), parent, content)
        chunks.append(chunk)
        stack.append(chunk)
    return ContentIndex(tuple(chunks), tuple(blocks), doc.origin, doc.format)


@dataclass(frozen=True)
class QueryHit:
    chunk: Chunk
    score: float
    rule: str


def _norm(s: str) -> str:
    return " ".join(s.casefold().split())


def _tokens(s: str) -> set[str]:
    return set(_TOKEN_RE.findall(s.casefold()))


def match_score(chunk: Chunk, keyword: str) -> tuple[float, str]:
    """Lexical score: exact heading 3, heading substring 2, content substring 1, else Jaccard * 0.9."""
    kw = _norm(keyword)
    if not kw:
        return 0.0, "none"
    if kw == _norm(chunk.title) or kw == _norm(chunk.heading):
        return 3.0, "exact"
    if kw in _norm(chunk.heading):
        return 2.0, "heading"
    if kw in _norm(chunk.content):
        return 1.0, "content"
    a, b = _tokens(keyword), _tokens(chunk.heading + " " + chunk.content)
    if a and b:
        j = len(a & b) / len(a | b)
        if j > 0:
            return round(0.9 * j, 9), "overlap"
    return 0.0, "none"


def query_index(index: ContentIndex, keyword: str, limit: int = 5) -> list[QueryHit]:
    if limit < 1:
        raise ValueError("limit must be >= 1")
    hits = []
    for c in index.chunks:
        score, rule = match_score(c, keyword)
        if score > 0:
            hits.append(QueryHit(c, score, rule))
    hits.sort(key=lambda h: (-h.score, h.chunk.k))
    return hits[:limit]
