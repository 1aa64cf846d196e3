"""Deterministic 50-file synthetic project for context-compression checks.

Files are generated in blueprint order (one stage, equal priority, every
dependency points backwards), so the naive baseline at step t is the
blueprint plus the sources of files 1..t-1.  Source sizes are tuned so that
baseline fits the token budget up to step ``cross_at - 1`` and exceeds it
from step ``cross_at`` on.
"""

from __future__ import annotations

import json
import math
import random

N_FILES = 50
BUDGET = 16000
CROSS_AT = 8
CHARS_PER_TOKEN = 4
SEED = 7


def _name(i: int) -> str:
    return f"mod{i:02d}"


def _deps(rng: random.Random, i: int) -> list[int]:
    if i == 0:
        return []
    k = min(i, rng.choice([1, 2, 3]))
    return sorted(rng.sample(range(i), k))


def blueprint_dict(n: int = N_FILES, seed: int = SEED) -> dict:
    rng = random.Random(seed)
    deps = {i: _deps(rng, i) for i in range(n)}
    files, specs = [], {}
    for i in range(n):
        path = f"{_name(i)}.py"
        files.append({"path": path, "priority": 0, "description": f"synthetic component number {i}"})
        specs[path] = {
            "items": [
                {"kind": "function", "name": f"f{i:02d}a", "signature": f"f{i:02d}a(x)", "description": f"first transform of component {i}"},
                {"kind": "function", "name": f"f{i:02d}b", "signature": f"f{i:02d}b(x, y)", "description": f"second transform of component {i}"},
                {"kind": "constant", "name": f"K{i:02d}", "signature": f"K{i:02d}", "description": f"scale factor of component {i}"},
            ],
            "links": [],
            "depends_on": [f"{_name(d)}.py" for d in deps[i]],
            "external": [],
        }
    return {
        "schema_version": 1,
        "title": "synthetic layered project",
        "file_hierarchy": files,
        "component_specs": specs,
        "verification_protocol": {"setup": {}, "metrics": [], "success_criteria": [], "entry_points": []},
        "execution_environment": {"dependencies": [], "hardware": "cpu"},
        "staged_plan": [{"name": "all", "files": [f["path"] for f in files], "check": ""}],
        "algorithm_items": {},
        "notes": [],
    }


def blueprint_text(bp: dict) -> str:
    return json.dumps(bp, indent=1, sort_keys=True, ensure_ascii=False)


def _source(i: int, deps: list[str], size: int, rng: random.Random) -> str:
    head = [f'"""Synthetic component {i}."""', ""]
    for d in deps:
        j = int(d[3:5])
        head.append(f"from {d[:-3]} import K{j:02d}, f{j:02d}a")
    head += ["", f"K{i:02d} = {i + 3}", "", ""]
    body = [f"def f{i:02d}a(x):", f"    acc = x * K{i:02d}"]
    for d in deps:
        j = int(d[3:5])
        body.append(f"    acc = acc + f{j:02d}a(x) * K{j:02d}")
    body += ["    return acc", "", "", f"def f{i:02d}b(x, y):", "    v = x - y"]
    tail = ["    return v", ""]
    text = "\n".join(head + body) + "\n"
    end = "\n".join(tail) + "\n"
    k = 0
    while True:
        line = f"    v = v * {rng.randint(2, 97)} + {rng.randint(1, 997)} - y * {k}\n"
        if len(text) + len(line) + len(end) > size:
            break
        text += line
        k += 1
    text += end
    # pad with a comment so the size is exact
    gap = size - len(text)
    if gap > 0:
        text += "#" * max(1, gap - 1) + "\n" if gap > 1 else "\n"
    return text


def build(n: int = N_FILES, budget: int = BUDGET, cross_at: int = CROSS_AT, seed: int = SEED) -> tuple[dict, dict[str, str]]:
    bp = blueprint_dict(n, seed)
    b = len(blueprint_text(bp))
    room = budget * CHARS_PER_TOKEN
    # need b + (cross_at - 2) * s <= room < b + (cross_at - 1) * s
    lo = math.floor((room - b) / (cross_at - 1)) + 1
    hi = math.floor((room - b) / (cross_at - 2))
    if lo > hi:
        raise ValueError("blueprint too large for the requested crossing point")
    size = (lo + hi) // 2
    rng = random.Random(seed + 1)
    sources = {}
    for f in bp["file_hierarchy"]:
        p = f["path"]
        sources[p] = _source(int(p[3:5]), bp["component_specs"][p]["depends_on"], size, rng)
    return bp, sources


if __name__ == "__main__":
    bp, src = build()
    print(len(blueprint_text(bp)), {len(s) for s in src.values()})
