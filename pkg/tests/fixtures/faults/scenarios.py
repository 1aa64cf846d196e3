"""Fault-injection scenarios over a small known-good repository.

Each scenario maps to a starting tree (the known-good tree with faults
applied) and a scripted model that repairs toward the known-good tree.  The
unfixable scenario's "known-good" tree itself fails, so no repair converges.
"""

from __future__ import annotations

import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from responder import ScriptedModel  # noqa: E402

TRUTH = HERE / "truth"


def truth_files() -> dict[str, str]:
    return {p.name: p.read_text(encoding="utf-8") for p in sorted(TRUTH.iterdir()) if p.is_file()}


def name_typo(files: dict[str, str]) -> dict[str, str]:
    out = dict(files)
    out["main.py"] = out["main.py"].replace("total {total}", "total {totl}")
    return out


def missing_module(files: dict[str, str]) -> dict[str, str]:
    out = dict(files)
    del out["stats.py"]
    return out


def wrong_argument(files: dict[str, str]) -> dict[str, str]:
    out = dict(files)
    out["reproduce.sh"] = out["reproduce.sh"].replace("--steps 4", "--num-steps 4")
    return out


def combined(files: dict[str, str]) -> dict[str, str]:
    return wrong_argument(missing_module(name_typo(files)))


UNFIXABLE_MAIN = '''"""Needs a service that is never available."""


def main():
    raise ConnectionError("dataset server unreachable")


if __name__ == "__main__":
    main()
'''


def unfixable(files: dict[str, str]) -> dict[str, str]:
    out = dict(files)
    out["main.py"] = UNFIXABLE_MAIN
    return out


SCENARIOS = {
    "name_typo": name_typo,
    "missing_module": missing_module,
    "wrong_argument": wrong_argument,
    "combined": combined,
    "unfixable": unfixable,
}

# error class each single-fault scenario must surface on the first execution
FIRST_ERROR = {
    "name_typo": "NameError",
    "missing_module": "ModuleNotFoundError",
    "wrong_argument": "unrecognized arguments",
    "unfixable": "ConnectionError",
}


def start_tree(name: str) -> dict[str, str]:
    return SCENARIOS[name](truth_files())


def model_for(name: str) -> ScriptedModel:
    truth = unfixable(truth_files()) if name == "unfixable" else truth_files()
    return ScriptedModel(truth, {"file_hierarchy": [], "component_specs": {}})


def write_tree(files: dict[str, str], root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for rel, text in files.items():
        (root / rel).write_text(text, encoding="utf-8")
    return root
