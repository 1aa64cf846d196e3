from __future__ import annotations

import pytest

from repogen.errors import SchemaParseError
from repogen.gateway import CannedProvider, LlmGateway
from repogen.prompts import DEFAULT_TEMPLATES, TemplateStore, ask_json, extract_code, extract_json

SCHEMA = {"type": "object", "properties": {"n": {"type": "integer"}}, "required": ["n"]}


def test_extract_json_prefers_fenced_block():
    assert extract_json('text ```json\n{"n": 1}\n``` more') == {"n": 1}
    assert extract_json('prefix {"n": 2} suffix') == {"n": 2}
    with pytest.raises(ValueError):
        extract_json("no json")


def test_extract_code():
    assert extract_code("Here it is:\n```python\nx = 1\n```\nThanks") == "x = 1\n"
    assert extract_code("y = 2") == "y = 2\n"
    assert extract_code("") is None
    assert extract_code("```python\n") is None
    assert extract_code("```\n\n```") is None


def test_ask_json_retries_until_valid():
    gw = LlmGateway("live", CannedProvider(["nope", '{"n": "x"}', '{"n": 3}']))
    data, used = ask_json(gw, "planner", "planner", "give n", schema=SCHEMA)
    assert data == {"n": 3} and used == 2
    tids = [r.template_id for r in gw.records]
    assert tids == ["planner", "planner.repair", "planner.repair"]
    assert "give n" in gw.records[1].prompt


def test_ask_json_semantic_check_and_exhaustion():
    gw = LlmGateway("live", CannedProvider('{"n": 1}'))
    with pytest.raises(SchemaParseError) as err:
        ask_json(gw, "planner", "planner", "p", schema=SCHEMA, check=lambda d: ["n must be even"], retries=1)
    assert err.value.errors == ["n must be even"]
    assert len(gw.records) == 2


def test_template_override(tmp_path):
    (tmp_path / "coder.txt").write_text("custom $context", encoding="utf-8")
    store = TemplateStore([tmp_path])
    assert store.render("coder", context="X") == "custom X"
    assert "$context" not in DEFAULT_TEMPLATES.render("coder", context="X")
    with pytest.raises(KeyError):
        store.render("does_not_exist")
