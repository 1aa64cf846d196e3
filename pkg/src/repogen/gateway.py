"""Single choke point for model traffic.

Every prompt issued by an agent goes through :class:`LlmGateway.complete`.
The gateway enforces per-role token budgets, keeps token accounting, and
supports three modes:

``record``
    call the provider and append every exchange to a JSONL transcript.
``replay``
    serve replies from a stored transcript; request digests must match the
    stored sequence exactly.
``live``
    call the provider; the transcript is kept in memory and only written
    out when a ``transcript_path`` is given.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .errors import BudgetExceeded, ConcurrentReplay, ProviderError, ReplayMismatch
from .tokens import DEFAULT_BUDGET, Tokenizer, count_tokens

logger = logging.getLogger(__name__)

ROLES = ("concept", "algorithm", "planner", "coder", "summarizer", "rag", "verifier")
MODES = ("record", "replay", "live")


def request_digest(role_tag: str, template_id: str, rendered_text: str) -> str:
    payload = json.dumps([role_tag, template_id, rendered_text], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptRequest:
    role_tag: str
    template_id: str
    rendered_text: str
    token_estimate: int
    schema_id: str | None = None

    def __post_init__(self):
        if self.role_tag not in ROLES:
            raise ValueError(f"unknown role {self.role_tag!r}; expected one of {ROLES}")

    @property
    def digest(self) -> str:
        return request_digest(self.role_tag, self.template_id, self.rendered_text)


@dataclass
class TranscriptRecord:
    digest: str
    role: str
    template_id: str
    schema_id: str | None
    prompt: str
    reply: str
    latency: float
    prompt_tokens: int
    reply_tokens: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TranscriptRecord":
        return cls(
            digest=d["digest"],
            role=d["role"],
            template_id=d["template_id"],
            schema_id=d.get("schema_id"),
            prompt=d.get("prompt", ""),
            reply=d["reply"],
            latency=float(d.get("latency", 0.0)),
            prompt_tokens=int(d.get("prompt_tokens", 0)),
            reply_tokens=int(d.get("reply_tokens", 0)),
        )


def load_transcript(path: str | os.PathLike) -> list[TranscriptRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TranscriptRecord.from_dict(json.loads(line)))
    return records


@dataclass
class Transcript:
    mode: str
    records: list[TranscriptRecord] = field(default_factory=list)


# -- providers ----------------------------------------------------------------


class Provider(Protocol):
    def __call__(self, request: PromptRequest) -> str: ...


class CannedProvider:
    """Returns queued replies in order; the last one repeats when exhausted."""

    def __init__(self, replies: str | Iterable[str]):
        self.replies = [replies] if isinstance(replies, str) else list(replies)
        if not self.replies:
            raise ValueError("CannedProvider needs at least one reply")
        self.calls = 0

    def __call__(self, request: PromptRequest) -> str:
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        return reply


class ScriptedProvider:
    """Wraps a deterministic responder function ``fn(request) -> reply``."""

    def __init__(self, fn: Callable[[PromptRequest], str]):
        self.fn = fn

    def __call__(self, request: PromptRequest) -> str:
        return self.fn(request)


class HttpProvider:
    """OpenAI-compatible chat-completions client with exponential backoff.

    Credentials come from the environment: ``REPOGEN_API_KEY`` and, unless
    passed explicitly, ``REPOGEN_API_BASE`` / ``REPOGEN_MODEL``.
    """

    def __init__(
        self,
        base_url: str | None = None,
        model: str | None = None,
        api_key_env: str = "REPOGEN_API_KEY",
        attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = (base_url or os.environ.get("REPOGEN_API_BASE", "https://api.openai.com/v1")).rstrip("/")
        self.model = model or os.environ.get("REPOGEN_MODEL", "gpt-4o")
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep

    def _post(self, body: bytes) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(f"{self.base_url}/chat/completions", data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def __call__(self, request: PromptRequest) -> str:
        body = json.dumps(
            {
                "model": self.model,
                "temperature": 0,
                "messages": [{"role": "user", "content": request.rendered_text}],
            }
        ).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                data = self._post(body)
                return data["choices"][0]["message"]["content"] or ""
            except (urllib.error.URLError, OSError, KeyError, IndexError, ValueError) as exc:
                last = exc
                logger.warning("provider attempt %d/%d failed: %s", attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff * (2**attempt))
        raise ProviderError(f"provider failed after {self.attempts} attempts: {last}")


# -- gateway ------------------------------------------------------------------


class LlmGateway:
    def __init__(
        self,
        mode: str = "live",
        provider: Provider | None = None,
        *,
        transcript_path: str | os.PathLike | None = None,
        replay_from: str | os.PathLike | Iterable[TranscriptRecord] | None = None,
        budgets: dict[str, int] | None = None,
        default_budget: int = DEFAULT_BUDGET,
        tokenizer: Tokenizer | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown gateway mode {mode!r}")
        if mode in ("record", "live") and provider is None:
            raise ValueError(f"{mode} mode needs a provider")
        if mode == "record" and transcript_path is None:
            raise ValueError("record mode needs a transcript_path")
        self.mode = mode
        self.provider = provider
        self.budgets = dict(budgets or {})
        self.default_budget = default_budget
        self.tokenizer = tokenizer
        self.transcript = Transcript(mode=mode)
        self._lock = threading.Lock()
        self._replay: list[TranscriptRecord] = []
        if mode == "replay":
            if replay_from is None:
                raise ValueError("replay mode needs a transcript")
            if isinstance(replay_from, (str, os.PathLike)):
                self._replay = load_transcript(replay_from)
            else:
                self._replay = list(replay_from)
        self.transcript_path = Path(transcript_path) if transcript_path is not None else None
        if self.transcript_path is not None:
            self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
            self.transcript_path.write_text("", encoding="utf-8")

    def budget_for(self, role: str) -> int:
        return int(self.budgets.get(role, self.default_budget))

    def count(self, text: str) -> int:
        return count_tokens(text, self.tokenizer)

    def request(self, role: str, template_id: str, text: str, schema_id: str | None = None) -> PromptRequest:
        return PromptRequest(role, template_id, text, self.count(text), schema_id)

    @property
    def records(self) -> list[TranscriptRecord]:
        return list(self.transcript.records)

    def _persist(self, rec: TranscriptRecord) -> None:
        if self.transcript_path is None:
            return
        with open(self.transcript_path, "a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")

    def complete(self, req: PromptRequest) -> str:
        budget = self.budget_for(req.role_tag)
        if req.token_estimate > budget:
            raise BudgetExceeded(
                f"{req.role_tag}/{req.template_id} prompt is {req.token_estimate} tokens; budget {budget}"
            )
        if self.mode == "replay":
            return self._complete_replay(req)
        with self._lock:
            start = time.perf_counter()
            reply = self.provider(req)
            latency = round(time.perf_counter() - start, 3)
            rec = TranscriptRecord(
                digest=req.digest,
                role=req.role_tag,
                template_id=req.template_id,
                schema_id=req.schema_id,
                prompt=req.rendered_text,
                reply=reply,
                latency=latency,
                prompt_tokens=req.token_estimate,
                reply_tokens=self.count(reply),
            )
            self.transcript.records.append(rec)
            self._persist(rec)
        return reply

    def _complete_replay(self, req: PromptRequest) -> str:
        if not self._lock.acquire(blocking=False):
            raise ConcurrentReplay("replay gateway used from two threads at once")
        try:
            pos = len(self.transcript.records)
            digest = req.digest
            if pos >= len(self._replay):
                raise ReplayMismatch(pos, None, digest)
            stored = self._replay[pos]
            if stored.digest != digest:
                raise ReplayMismatch(pos, stored.digest, digest)
            self.transcript.records.append(stored)
            self._persist(stored)
            return stored.reply
        finally:
            self._lock.release()

    def usage_report(self) -> dict:
        roles: dict[str, dict[str, int]] = {}
        for rec in self.transcript.records:
            row = roles.setdefault(rec.role, {"calls": 0, "prompt_tokens": 0, "reply_tokens": 0, "total_tokens": 0})
            row["calls"] += 1
            row["prompt_tokens"] += rec.prompt_tokens
            row["reply_tokens"] += rec.reply_tokens
            row["total_tokens"] += rec.prompt_tokens + rec.reply_tokens
        return {"roles": dict(sorted(roles.items())), "total": _sum_rows(roles.values())}


def _sum_rows(rows: Iterable[dict[str, int]]) -> dict[str, int]:
    total = {"calls": 0, "prompt_tokens": 0, "reply_tokens": 0, "total_tokens": 0}
    for row in rows:
        for k in total:
            total[k] += row[k]
    return total


def merge_usage(reports: Iterable[dict]) -> dict:
    """Combine usage reports of several gateway sessions."""
    roles: dict[str, dict[str, int]] = {}
    for rep in reports:
        for role, row in rep["roles"].items():
            acc = roles.setdefault(role, {"calls": 0, "prompt_tokens": 0, "reply_tokens": 0, "total_tokens": 0})
            for k in acc:
                acc[k] += row[k]
    return {"roles": dict(sorted(roles.items())), "total": _sum_rows(roles.values())}
