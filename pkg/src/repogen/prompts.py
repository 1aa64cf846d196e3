"""Prompt templates and schema-validated structured replies."""

from __future__ import annotations

import json
import re
import string
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable

import jsonschema

from .errors import SchemaParseError
from .gateway import LlmGateway

DEFAULT_RETRIES = 2

_FENCE_RE = re.compile(r"```([\w+.-]*)[ \t]*\n(.*?)```", re.DOTALL)


class TemplateStore:
    """Loads ``<template_id>.txt`` files; override directories win over the bundled set."""

    def __init__(self, override_dirs: Iterable[str | Path] = ()):
        self.override_dirs = [Path(d) for d in override_dirs]
        self._cache: dict[str, string.Template] = {}

    def _load(self, template_id: str) -> string.Template:
        if template_id in self._cache:
            return self._cache[template_id]
        text = None
        for d in self.override_dirs:
            p = d / f"{template_id}.txt"
            if p.is_file():
                text = p.read_text(encoding="utf-8")
                break
        if text is None:
            res = resources.files("repogen") / "templates" / f"{template_id}.txt"
            if not res.is_file():
                raise KeyError(f"no prompt template {template_id!r}")
            text = res.read_text(encoding="utf-8")
        tpl = string.Template(text)
        self._cache[template_id] = tpl
        return tpl

    def render(self, template_id: str, **values: Any) -> str:
        return self._load(template_id).substitute({k: str(v) for k, v in values.items()})


DEFAULT_TEMPLATES = TemplateStore()


def extract_json(reply: str) -> Any:
    for lang, body in _FENCE_RE.findall(reply):
        if lang.lower() in ("json", ""):
            try:
                return json.loads(body)
            except ValueError:
                continue
    start, end = reply.find("{"), reply.rfind("}")
    if start == -1 or end <= start:
        raise ValueError("reply contains no JSON object")
    return json.loads(reply[start : end + 1])


def extract_code(reply: str) -> str | None:
    """Code payload of a reply: the first fenced block, else the bare reply."""
    m = _FENCE_RE.search(reply)
    if m:
        body = m.group(2)
    else:
        if "```" in reply:
            return None
        body = reply
    if not body.strip():
        return None
    return body if body.endswith("\n") else body + "\n"


def schema_errors(data: Any, schema: dict) -> list[str]:
    validator = jsonschema.Draft202012Validator(schema)
    out = []
    for err in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        out.append(f"{where}: {err.message}")
    return out


def ask_json(
    gateway: LlmGateway,
    role: str,
    template_id: str,
    prompt: str,
    *,
    schema: dict | None = None,
    check: Callable[[Any], list[str]] | None = None,
    retries: int = DEFAULT_RETRIES,
    templates: TemplateStore = DEFAULT_TEMPLATES,
) -> tuple[Any, int]:
    """Issue ``prompt`` and return ``(payload, retries_used)``.

    A reply that is not JSON, fails ``schema`` or fails ``check`` triggers a
    repair prompt listing the problems, up to ``retries`` times.
    """
    text = prompt
    tid = template_id
    errors: list[str] = []
    for attempt in range(retries + 1):
        reply = gateway.complete(gateway.request(role, tid, text, schema_id=template_id))
        try:
            data = extract_json(reply)
        except ValueError as exc:
            errors = [f"unparseable reply: {exc}"]
        else:
            errors = schema_errors(data, schema) if schema else []
            if not errors and check is not None:
                errors = list(check(data))
            if not errors:
                return data, attempt
        text = templates.render("repair", prompt=prompt, errors="\n".join(f"- {e}" for e in errors))
        tid = f"{template_id}.repair"
    raise SchemaParseError(f"{role}/{template_id}: reply invalid after {retries} retries", errors)


def dumps(obj: Any) -> str:
    """Canonical JSON used inside prompts and persisted artifacts."""
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False)
