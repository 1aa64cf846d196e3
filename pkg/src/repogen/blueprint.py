"""Phase-1 data model: analysis schemas and the implementation blueprint."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

BLUEPRINT_VERSION = 1

_STR = {"type": "string"}
_NESTR = {"type": "string", "minLength": 1}


def _obj(props: dict, required: list[str] | None = None) -> dict:
    return {"type": "object", "properties": props, "required": required or list(props)}


def _arr(items: dict, min_items: int = 0) -> dict:
    return {"type": "array", "items": items, "minItems": min_items}


CONCEPT_SCHEMA = _obj(
    {
        "structure_map": _arr(_obj({"section": _NESTR, "summary": _STR})),
        "method_components": _arr(_obj({"name": _NESTR, "responsibility": _STR})),
        "implementation_map": _arr(_obj({"claim": _STR, "requirement": _STR, "component": _NESTR})),
        "reproduction_roadmap": _arr(_NESTR),
    }
)

ALGORITHM_SCHEMA = _obj(
    {
        "pseudocode": _arr(_obj({"label": _NESTR, "text": _NESTR, "chunk": _NESTR})),
        "equations": _arr(
            _obj({"id": _NESTR, "expression": _NESTR, "variables": _arr(_STR), "chunk": _NESTR})
        ),
        "architectures": _arr(_obj({"name": _NESTR, "layers": _arr(_STR), "chunk": _NESTR})),
        "hyperparameters": _arr(_obj({"name": _NESTR, "value": _STR, "chunk": _NESTR})),
    }
)

_ITEM = _obj({"kind": _NESTR, "name": _NESTR, "signature": _STR, "description": _STR})

BLUEPRINT_SCHEMA = _obj(
    {
        "title": _STR,
        "file_hierarchy": _arr(
            _obj({"path": _NESTR, "priority": {"type": "integer"}, "description": _STR}), min_items=1
        ),
        "component_specs": {
            "type": "object",
            "additionalProperties": _obj(
                {
                    "items": _arr(_ITEM),
                    "links": _arr(_NESTR),
                    "depends_on": _arr(_NESTR),
                    "external": _arr(_NESTR),
                },
                ["items"],
            ),
        },
        "verification_protocol": _obj(
            {
                "setup": {"type": "object"},
                "metrics": _arr(_obj({"name": _NESTR, "target": _STR})),
                "success_criteria": _arr(_STR),
                "entry_points": _arr(_NESTR),
            },
            ["setup", "metrics", "success_criteria"],
        ),
        "execution_environment": _obj(
            {"dependencies": _arr(_obj({"name": _NESTR, "version": _STR})), "hardware": _STR},
            ["dependencies"],
        ),
        "staged_plan": _arr(_obj({"name": _NESTR, "files": _arr(_NESTR, 1), "check": _STR}), min_items=1),
    },
    ["file_hierarchy", "component_specs", "verification_protocol", "execution_environment", "staged_plan"],
)


@dataclass
class ConceptSchema:
    structure_map: list[dict]
    method_components: list[dict]
    implementation_map: list[dict]
    reproduction_roadmap: list[str]
    chunks_read: list[str] = field(default_factory=list)
    retries: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {
            "structure_map": self.structure_map,
            "method_components": self.method_components,
            "implementation_map": self.implementation_map,
            "reproduction_roadmap": self.reproduction_roadmap,
            "chunks_read": self.chunks_read,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptSchema":
        return cls(
            list(d["structure_map"]),
            list(d["method_components"]),
            list(d["implementation_map"]),
            list(d["reproduction_roadmap"]),
            list(d.get("chunks_read", [])),
        )

    def violations(self) -> list[str]:
        out = []
        for name in ("structure_map", "method_components", "implementation_map", "reproduction_roadmap"):
            if not getattr(self, name):
                out.append(f"{name} is empty")
        referenced = {e["component"] for e in self.implementation_map}
        for comp in self.method_components:
            if comp["name"] not in referenced:
                out.append(f"method component {comp['name']!r} has no implementation_map entry")
        return out


@dataclass
class AlgorithmSchema:
    pseudocode: list[dict] = field(default_factory=list)
    equations: list[dict] = field(default_factory=list)
    architectures: list[dict] = field(default_factory=list)
    hyperparameters: list[dict] = field(default_factory=list)
    web_references: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    chunks_read: list[str] = field(default_factory=list)
    retries: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {
            "pseudocode": self.pseudocode,
            "equations": self.equations,
            "architectures": self.architectures,
            "hyperparameters": self.hyperparameters,
            "web_references": self.web_references,
            "warnings": self.warnings,
            "chunks_read": self.chunks_read,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlgorithmSchema":
        return cls(
            list(d.get("pseudocode", [])),
            list(d.get("equations", [])),
            list(d.get("architectures", [])),
            list(d.get("hyperparameters", [])),
            list(d.get("web_references", [])),
            list(d.get("warnings", [])),
            list(d.get("chunks_read", [])),
        )

    def items(self) -> dict[str, dict]:
        """Linkable identifiers: pseudocode labels and equation ids."""
        out = {}
        for p in self.pseudocode:
            out[p["label"]] = {"kind": "pseudocode", "text": p["text"]}
        for e in self.equations:
            out[e["id"]] = {"kind": "equation", "text": e["expression"], "variables": list(e.get("variables", []))}
        return out

    def hyperparameter_map(self) -> dict[str, str]:
        return {h["name"]: h["value"] for h in self.hyperparameters}


@dataclass
class Blueprint:
    file_hierarchy: list[dict]
    component_specs: dict[str, dict]
    verification_protocol: dict
    execution_environment: dict
    staged_plan: list[dict]
    algorithm_items: dict[str, dict] = field(default_factory=dict)
    title: str = ""
    notes: list[str] = field(default_factory=list)

    # -- views ---------------------------------------------------------------
    @property
    def files(self) -> list[str]:
        return [f["path"] for f in self.file_hierarchy]

    def position(self, path: str) -> int:
        return self.files.index(path)

    def priority(self, path: str) -> int:
        for f in self.file_hierarchy:
            if f["path"] == path:
                return int(f.get("priority", 0))
        raise KeyError(path)

    def stage_of(self, path: str) -> int:
        for i, stage in enumerate(self.staged_plan):
            if path in stage["files"]:
                return i
        return len(self.staged_plan)

    def spec(self, path: str) -> dict:
        return self.component_specs.get(path, {"items": [], "links": [], "depends_on": [], "external": []})

    def depends_on(self, path: str) -> list[str]:
        return [d for d in self.spec(path).get("depends_on", []) if d in self.files and d != path]

    def dependents(self, path: str) -> list[str]:
        return [f for f in self.files if path in self.depends_on(f)]

    def tree(self) -> dict:
        """Nested dict view of the file hierarchy (directories map to subtrees, files to None)."""
        root: dict = {}
        for p in self.files:
            node = root
            parts = p.split("/")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = None
        return root

    def staged_order(self) -> list[str]:
        return [f for stage in self.staged_plan for f in stage["files"]]

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": BLUEPRINT_VERSION,
            "title": self.title,
            "file_hierarchy": self.file_hierarchy,
            "component_specs": self.component_specs,
            "verification_protocol": self.verification_protocol,
            "execution_environment": self.execution_environment,
            "staged_plan": self.staged_plan,
            "algorithm_items": self.algorithm_items,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Blueprint":
        version = d.get("schema_version", BLUEPRINT_VERSION)
        if version != BLUEPRINT_VERSION:
            raise ValueError(f"unsupported blueprint schema_version {version}")
        specs = {}
        for path, spec in d.get("component_specs", {}).items():
            specs[path] = {
                "items": list(spec.get("items", [])),
                "links": list(spec.get("links", [])),
                "depends_on": list(spec.get("depends_on", [])),
                "external": list(spec.get("external", [])),
            }
        vp = dict(d.get("verification_protocol", {}))
        vp.setdefault("setup", {})
        vp.setdefault("metrics", [])
        vp.setdefault("success_criteria", [])
        vp.setdefault("entry_points", [])
        env = dict(d.get("execution_environment", {}))
        env.setdefault("dependencies", [])
        env.setdefault("hardware", "")
        return cls(
            file_hierarchy=[
                {"path": f["path"], "priority": int(f.get("priority", 0)), "description": f.get("description", "")}
                for f in d["file_hierarchy"]
            ],
            component_specs=specs,
            verification_protocol=vp,
            execution_environment=env,
            staged_plan=[
                {"name": s["name"], "files": list(s["files"]), "check": s.get("check", "")} for s in d["staged_plan"]
            ],
            algorithm_items=dict(d.get("algorithm_items", {})),
            title=d.get("title", ""),
            notes=list(d.get("notes", [])),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Blueprint":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def validate_blueprint(b: Blueprint, algo: AlgorithmSchema | None = None) -> list[str]:
    """Every violated blueprint invariant, one message each; empty means valid."""
    report: list[str] = []
    files = b.files
    fileset = set(files)
    seen: set[str] = set()
    for p in files:
        if p in seen:
            report.append(f"file_hierarchy: duplicate path {p!r}")
        seen.add(p)

    for key in b.component_specs:
        if key not in fileset:
            report.append(f"component_specs: orphan key {key!r} not in file_hierarchy")

    known = set(b.algorithm_items)
    algo_ids = set(algo.items()) if algo is not None else None
    for key, spec in b.component_specs.items():
        for link in spec.get("links", []):
            if link not in known:
                report.append(f"component_specs[{key!r}]: link {link!r} not among algorithm items")
            elif algo_ids is not None and link not in algo_ids:
                report.append(f"component_specs[{key!r}]: link {link!r} not in the algorithm schema")
        for dep in spec.get("depends_on", []):
            if dep == key:
                report.append(f"component_specs[{key!r}]: depends on itself")
            elif dep not in fileset:
                report.append(f"component_specs[{key!r}]: dependency {dep!r} not in file_hierarchy")
        names = [it["name"] for it in spec.get("items", [])]
        for n in sorted({n for n in names if names.count(n) > 1}):
            report.append(f"component_specs[{key!r}]: duplicate item name {n!r}")

    owner: dict[str, str] = {}
    for stage in b.staged_plan:
        for p in stage["files"]:
            if p not in fileset:
                report.append(f"staged_plan[{stage['name']!r}]: file {p!r} not in file_hierarchy")
            if p in owner:
                report.append(f"staged_plan: {p!r} appears in stages {owner[p]!r} and {stage['name']!r}")
            else:
                owner[p] = stage["name"]
    for p in files:
        if p not in owner:
            report.append(f"staged_plan: {p!r} is not assigned to any stage")
    return report
