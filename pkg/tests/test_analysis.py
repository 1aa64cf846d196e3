from __future__ import annotations

import copy
import json

import pytest

import scenario
from conftest import TOY
from repogen.analysis import reconcile, run_algorithm_agent, run_concept_agent, synthesize_blueprint
from repogen.blueprint import AlgorithmSchema, Blueprint, ConceptSchema
from repogen.doc_index import build_index, parse_document
from repogen.errors import BlueprintValidationError, SchemaParseError
from repogen.gateway import CannedProvider, LlmGateway, ScriptedProvider

GOLDEN = TOY / "golden_artifacts"
TRANSCRIPTS = TOY / "transcripts"


def replay(name):
    return LlmGateway("replay", replay_from=TRANSCRIPTS / f"{name}.jsonl")


def test_concept_replay_matches_golden(toy_index):
    concept = run_concept_agent(toy_index, replay("concept"))
    assert concept.to_dict() == json.loads((GOLDEN / "concept_schema.json").read_text(encoding="utf-8"))
    assert len(concept.method_components) == 4
    assert concept.violations() == []


def test_algorithm_replay_hand_count(toy_index):
    algo = run_algorithm_agent(toy_index, replay("algorithm"))
    # hand count of the fixture: one fenced algorithm box, equations (1)-(3), five table rows
    assert [p["label"] for p in algo.pseudocode] == ["Algorithm 1"]
    assert sorted(e["id"] for e in algo.equations) == ["Eq. 1", "Eq. 2", "Eq. 3"]
    assert algo.hyperparameter_map() == {
        "learning_rate": "0.1",
        "momentum": "0.9",
        "damping": "0.01",
        "epochs": "20",
        "batch_size": "32",
    }
    for h in algo.hyperparameters:
        assert toy_index.get(h["chunk"]).title == "Hyperparameters"
    assert algo.pseudocode[0]["text"] in (TOY / "paper.md").read_text(encoding="utf-8")


def test_analysis_uses_targeted_sections(toy_index):
    algo = run_algorithm_agent(toy_index, replay("algorithm"))
    assert "s9" in algo.chunks_read
    assert len(algo.chunks_read) < len(toy_index)
    rec = replay("algorithm")._replay[0]
    assert "12.2. Compute" not in rec.prompt


def test_frontmatter_only_index():
    ix = build_index(parse_document("A short note about nothing in particular.\n"))
    reply = json.dumps(
        {
            "structure_map": [{"section": "s1", "summary": "note"}],
            "method_components": [{"name": "m", "responsibility": "r"}],
            "implementation_map": [{"claim": "c", "requirement": "q", "component": "m"}],
            "reproduction_roadmap": ["run"],
        }
    )
    concept = run_concept_agent(ix, LlmGateway("live", CannedProvider(reply)))
    assert len(concept.structure_map) == 1


def test_concept_retry_count():
    ix = build_index(parse_document("A short note.\n"))
    good = json.dumps(
        {
            "structure_map": [{"section": "frontmatter", "summary": "note"}],
            "method_components": [],
            "implementation_map": [],
            "reproduction_roadmap": ["run"],
        }
    )
    gw = LlmGateway("live", CannedProvider(["garbage", '{"structure_map": []}', good]))
    with pytest.raises(SchemaParseError):
        # valid JSON but empty method components leaves the merged schema incomplete
        run_concept_agent(ix, gw)
    concept_reply = json.loads(good)
    concept_reply["method_components"] = [{"name": "m", "responsibility": "r"}]
    concept_reply["implementation_map"] = [{"claim": "c", "requirement": "q", "component": "m"}]
    gw = LlmGateway("live", CannedProvider(["garbage", '{"structure_map": []}', json.dumps(concept_reply)]))
    concept = run_concept_agent(ix, gw)
    assert concept.retries == 2


def test_pseudocode_must_be_verbatim(toy_index):
    model = scenario.build_model()
    state = {"n": 0}

    def responder(req):
        reply = model(req)
        state["n"] += 1
        if state["n"] == 1:
            return reply.replace("for each minibatch", "for every minibatch")
        return reply

    gw = LlmGateway("live", ScriptedProvider(responder))
    algo = run_algorithm_agent(toy_index, gw)
    assert algo.retries == 1
    assert "not verbatim" in gw.records[1].prompt


def test_zero_equations_is_fine():
    ix = build_index(parse_document("# Algorithm\n\nNo maths at all.\n"))
    reply = '{"pseudocode": [], "equations": [], "architectures": [], "hyperparameters": []}'
    algo = run_algorithm_agent(ix, LlmGateway("live", CannedProvider(reply)))
    assert algo.equations == []


class _Search:
    def __init__(self, fail=False):
        self.fail = fail

    def search(self, query):
        if self.fail:
            raise OSError("offline")
        return [{"title": "a", "url": "https://good.example/x"}, {"title": "b", "url": "https://blocked.example/y"}]


def test_web_lookup_blacklist_and_failure(toy_index):
    algo = run_algorithm_agent(toy_index, replay("algorithm"), _Search(), url_blacklist=["https://blocked.example"])
    assert [r["url"] for r in algo.web_references] == ["https://good.example/x"]
    algo = run_algorithm_agent(toy_index, replay("algorithm"), _Search(fail=True))
    assert any("web search failed" in w for w in algo.warnings)


def test_planner_replay_matches_golden(toy_index):
    concept = ConceptSchema.from_dict(json.loads((GOLDEN / "concept_schema.json").read_text(encoding="utf-8")))
    algo = AlgorithmSchema.from_dict(json.loads((GOLDEN / "algorithm_schema.json").read_text(encoding="utf-8")))
    gw = replay("planner")
    bp = synthesize_blueprint(concept, algo, toy_index, gw)
    assert bp == Blueprint.load(GOLDEN / "blueprint.json")
    # the first plan left evaluate.py unstaged; one targeted re-query fixed it
    assert [r.template_id for r in gw.records] == ["planner", "planner_fix"]
    assert "evaluate.py" in gw.records[1].prompt and "4.1. Hyperparameters" not in gw.records[1].prompt


def test_planner_gives_up_after_requeries(toy_index):
    concept = ConceptSchema.from_dict(json.loads((GOLDEN / "concept_schema.json").read_text(encoding="utf-8")))
    algo = AlgorithmSchema.from_dict(json.loads((GOLDEN / "algorithm_schema.json").read_text(encoding="utf-8")))
    bad = copy.deepcopy(scenario.blueprint_reply())
    bad["component_specs"]["ghost.py"] = {"items": []}
    gw = LlmGateway("live", CannedProvider(json.dumps(bad)))
    with pytest.raises(BlueprintValidationError) as err:
        synthesize_blueprint(concept, algo, toy_index, gw, max_requeries=2)
    assert len(gw.records) == 3
    assert any("ghost.py" in v for v in err.value.violations)


def test_reconcile_overrides_setup():
    bp = Blueprint.from_dict(scenario.blueprint_reply())
    algo = AlgorithmSchema(hyperparameters=[{"name": "epochs", "value": "20", "chunk": "s9"}, {"name": "momentum", "value": "0.9", "chunk": "s9"}])
    notes = reconcile(bp, algo)
    assert bp.verification_protocol["setup"]["epochs"] == 20
    assert bp.verification_protocol["setup"]["momentum"] == 0.9
    assert len(notes) == 1
