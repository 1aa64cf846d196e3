"""Command line entry point: ``repogen run|resume|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, DigestMismatch, PhaseError, RepogenError, WorkspaceLocked
from .pipeline import CONFIG_ERROR_EXIT, EXIT_CODES, PHASES, load_config, read_report, resume, run_pipeline

logger = logging.getLogger("repogen")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repogen", description="Generate a runnable repository from a paper.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log phase progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run all phases from a config file")
    run.add_argument("--config", required=True, help="TOML or JSON pipeline config")
    run.add_argument("--force", action="store_true", help="discard an existing run in the workspace")
    run.add_argument("--stop-after", choices=PHASES, help="stop at a phase boundary")

    res = sub.add_parser("resume", help="continue an interrupted run")
    res.add_argument("workspace")
    res.add_argument("--stop-after", choices=PHASES)

    rep = sub.add_parser("report", help="print the run report")
    rep.add_argument("workspace")
    rep.add_argument("--json", action="store_true", help="print raw JSON")
    return parser


def _exit_for(report: dict | None) -> int:
    return 0 if report is None else EXIT_CODES[report["status"]]


def _summary(report: dict, timings: dict) -> str:
    inv = report["invariants"]
    usage = report["usage"]["total"]
    lines = [
        f"status: {report['status']} (exit {report['exit_code']})",
        f"files: {len(report['repository'])}",
        f"executions: {inv['verification']['executions']}",
        f"llm calls: {usage['calls']}  tokens: {usage['total_tokens']}",
        f"generation steps: {inv['generation']['steps']}  retrieval steps: {inv['generation']['retrieval_steps']}",
        f"warnings: {len(report['warnings'])}  contradictions: {len(report['contradictions'])}",
    ]
    if timings:
        lines.append("timings: " + ", ".join(f"{p} {timings[p]:.2f}s" for p in PHASES if p in timings))
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            repo, report = run_pipeline(cfg, stop_after=args.stop_after, force=args.force)
            print(f"repository: {repo}")
            return _exit_for(report)
        if args.command == "resume":
            repo, report = resume(args.workspace, stop_after=args.stop_after)
            print(f"repository: {repo}")
            return _exit_for(report)
        data = read_report(args.workspace)
        if args.json:
            print(json.dumps(data, indent=1, sort_keys=True))
        else:
            print(_summary(data["report"], data["timings"]))
        return _exit_for(data["report"])
    except (ConfigError, DigestMismatch, WorkspaceLocked) as exc:
        print(f"repogen: {exc}", file=sys.stderr)
        return CONFIG_ERROR_EXIT
    except PhaseError as exc:
        print(f"repogen: {exc}", file=sys.stderr)
        return 1
    except RepogenError as exc:
        print(f"repogen: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
