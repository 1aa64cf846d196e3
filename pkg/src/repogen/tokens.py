"""Token accounting helpers.

Counting is pluggable: anything callable as ``fn(text) -> int`` works as a
tokenizer. Without one, a character quotient is used (4 characters per
token, rounded up), which is stable across platforms and good enough for
budget enforcement.
"""

from __future__ import annotations

import math
import re
from typing import Callable, Iterable

Tokenizer = Callable[[str], int]

CHARS_PER_TOKEN = 4
DEFAULT_BUDGET = 16_000

_WORD_RE = re.compile(r"\S+")


def char_quotient_tokens(text: str) -> int:
    return math.ceil(len(text) / CHARS_PER_TOKEN)


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    if tokenizer is None:
        return char_quotient_tokens(text)
    return int(tokenizer(text))


def words(text: str) -> list[str]:
    """Whitespace tokens; the unit used for n-gram leak detection."""
    return _WORD_RE.findall(text)


def ngrams(tokens: list[str], n: int) -> set[tuple[str, ...]]:
    return {tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)}


def shared_ngrams(text: str, sources: Iterable[str], n: int = 12) -> int:
    """Number of distinct ``n``-token windows of ``text`` that occur in any source."""
    own = ngrams(words(text), n)
    if not own:
        return 0
    hits: set[tuple[str, ...]] = set()
    for src in sources:
        hits |= own & ngrams(words(src), n)
    return len(hits)
