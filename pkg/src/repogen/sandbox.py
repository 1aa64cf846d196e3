"""Path-confined file I/O and command execution with an append-only audit log.

Every file operation and command goes through a :class:`Sandbox` rooted at
the workspace. Paths outside the root are refused and the refusal is logged
as a ``denied`` record; allowed operations are logged with their resolved
path.
"""

from __future__ import annotations

import json
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import SandboxUnavailable, SandboxViolation


@dataclass
class CommandResult:
    argv: list[str]
    cwd: str
    stdout: str
    stderr: str
    exit_code: int
    duration: float
    timed_out: bool = False


class Sandbox:
    """Process-isolation backend: subprocesses confined to a workspace root."""

    backend = "process"

    def __init__(self, root: str | Path, audit_path: str | Path | None = None, *, python: str = sys.executable):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.audit_path = Path(audit_path) if audit_path is not None else self.root / "sandbox_audit.jsonl"
        self.python = python
        self._lock = threading.Lock()
        self._seq = 0
        if self.audit_path.exists():
            with open(self.audit_path, encoding="utf-8") as fh:
                self._seq = sum(1 for _ in fh)

    def available(self) -> bool:
        return self.root.is_dir()

    # -- audit -------------------------------------------------------------
    def _log(self, op: str, **fields) -> None:
        with self._lock:
            self._seq += 1
            rec = {"seq": self._seq, "op": op, "backend": self.backend, **fields}
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def audit_records(self) -> list[dict]:
        if not self.audit_path.exists():
            return []
        with open(self.audit_path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def contains(self, path: str | Path) -> bool:
        p = Path(path)
        if not p.is_absolute():
            p = self.root / p
        p = Path(os.path.realpath(p))
        return p == self.root or self.root in p.parents

    def check(self, path: str | Path, op: str = "access") -> Path:
        p = Path(path)
        if not p.is_absolute():
            p = self.root / p
        if not self.contains(p):
            self._log("denied", attempted=op, path=str(p))
            raise SandboxViolation(f"{op} outside workspace root: {p}")
        return Path(os.path.realpath(p))

    # -- file I/O ------------------------------------------------------------
    def read_text(self, path: str | Path) -> str:
        p = self.check(path, "read")
        self._log("read", path=str(p))
        return p.read_text(encoding="utf-8")

    def write_text(self, path: str | Path, text: str) -> Path:
        p = self.check(path, "write")
        p.parent.mkdir(parents=True, exist_ok=True)
        self._log("write", path=str(p), bytes=len(text.encode("utf-8")))
        p.write_text(text, encoding="utf-8")
        return p

    def exists(self, path: str | Path) -> bool:
        p = self.check(path, "stat")
        self._log("stat", path=str(p))
        return p.exists()

    def list_files(self, path: str | Path) -> list[str]:
        base = self.check(path, "list")
        self._log("list", path=str(base))
        out = []
        for dirpath, dirnames, filenames in os.walk(base):
            dirnames[:] = sorted(d for d in dirnames if d != "__pycache__")
            for name in sorted(filenames):
                out.append((Path(dirpath) / name).relative_to(base).as_posix())
        return out

    # -- commands --------------------------------------------------------------
    def _shim_dir(self) -> Path:
        bindir = self.root / ".sandbox" / "bin"
        shim = bindir / "python"
        if not shim.exists():
            bindir.mkdir(parents=True, exist_ok=True)
            self._log("write", path=str(shim), bytes=0)
            shim.symlink_to(self.python)
        return bindir

    def _env(self, extra: dict[str, str] | None) -> dict[str, str]:
        env = {
            "PATH": os.pathsep.join([str(self._shim_dir()), os.environ.get("PATH", "/usr/bin:/bin")]),
            "HOME": str(self.root),
            "LANG": "C.UTF-8",
            "PYTHONDONTWRITEBYTECODE": "1",
            "PYTHONHASHSEED": "0",
            "PYTHONUNBUFFERED": "1",
        }
        env.update(extra or {})
        return env

    def run(
        self,
        argv: list[str],
        cwd: str | Path | None = None,
        *,
        timeout: float | None = None,
        env: dict[str, str] | None = None,
    ) -> CommandResult:
        if not self.available():
            raise SandboxUnavailable(f"{self.backend} sandbox unavailable")
        workdir = self.check(cwd if cwd is not None else self.root, "exec")
        for arg in argv[1:]:
            if os.path.isabs(arg) and not self.contains(arg):
                self._log("denied", attempted="exec", path=arg, argv=argv)
                raise SandboxViolation(f"command argument outside workspace root: {arg}")
        argv = [self.python if argv[0] == "python" else argv[0], *argv[1:]]
        self._log("exec", cwd=str(workdir), argv=argv, path=str(workdir))
        return self._spawn(argv, workdir, timeout, self._env(env))

    def _spawn(self, argv: list[str], workdir: Path, timeout: float | None, env: dict[str, str]) -> CommandResult:
        start = time.monotonic()
        proc = subprocess.Popen(
            argv,
            cwd=workdir,
            env=env,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,
        )
        timed_out = False
        try:
            out, err = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            out, err = proc.communicate()
        return CommandResult(
            argv=argv,
            cwd=str(workdir),
            stdout=out,
            stderr=err,
            exit_code=proc.returncode if not timed_out else -9,
            duration=time.monotonic() - start,
            timed_out=timed_out,
        )


class ContainerSandbox(Sandbox):
    """Runs commands in a throwaway container with only the workspace mounted."""

    backend = "container"

    def __init__(self, root: str | Path, audit_path: str | Path | None = None, *, image: str = "python:3.11-slim", runtime: str = "docker"):
        super().__init__(root, audit_path, python="python")
        self.image = image
        self.runtime = runtime

    def available(self) -> bool:
        return shutil.which(self.runtime) is not None and self.root.is_dir()

    def _shim_dir(self) -> Path:
        return self.root

    def _spawn(self, argv, workdir, timeout, env):
        rel = workdir.relative_to(self.root).as_posix()
        wrapped = [self.runtime, "run", "--rm", "--network=none", "-v", f"{self.root}:/work", "-w", f"/work/{rel}"]
        for k in ("PYTHONDONTWRITEBYTECODE", "PYTHONHASHSEED"):
            wrapped += ["-e", f"{k}={env[k]}"]
        wrapped += [self.image, *argv]
        return super()._spawn(wrapped, workdir, timeout, {"PATH": os.environ.get("PATH", "/usr/bin:/bin")})


def make_sandbox(backend: str, root: str | Path, audit_path: str | Path | None = None, **kwargs) -> Sandbox:
    if backend == "process":
        return Sandbox(root, audit_path, **kwargs)
    if backend == "container":
        return ContainerSandbox(root, audit_path, **kwargs)
    raise ValueError(f"unknown sandbox backend {backend!r}")
