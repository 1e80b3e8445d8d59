"""Candidate codebases, isolated workspaces and child-process phase execution.

Candidate protocol: the entrypoint is run as
``python <entry> --phase {train|evaluate|diagnose} --data <dir> --out <dir> --config <file>``
and must write ``<out>/manifest`` (JSON). Exit code 0 is required for OK.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import posixpath
import resource
import shutil
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

logger = logging.getLogger(__name__)

PIPELINE_ENTRY = "pipeline.py"
DIAG_ENTRY = "diagnosis.py"
PHASES = ("train", "evaluate", "diagnose")
STATUSES = ("OK", "FAIL", "TIMEOUT")
RUNS_DIR = "runs"
MANIFEST_NAME = "manifest"
METRIC_KEYS = ("ndcg_at_5", "hr_at_5", "phase", "n_users")
CORE_KEYS = ("status", "phase", "metrics", "d_raw", "artifacts", "wall_time", "failure_log")
LOG_TAIL = 4000


class MaterializeError(ValueError):
    pass


@dataclass
class CandidateCodebase:
    files: Dict[str, str]
    parent_id: Optional[str] = None
    iteration: int = 0
    provenance: str = "seed"

    @property
    def id(self) -> str:
        h = hashlib.sha256()
        for path in sorted(self.files):
            data = self.files[path].encode("utf-8")
            h.update(path.encode("utf-8") + b"\0" + str(len(data)).encode() + b"\0" + data)
        return h.hexdigest()[:16]

    @property
    def diag_source(self) -> str:
        return self.files[DIAG_ENTRY]

    def check_entrypoints(self) -> None:
        for entry in (PIPELINE_ENTRY, DIAG_ENTRY):
            if entry not in self.files:
                raise MaterializeError(f"candidate lacks entrypoint {entry}")

    def with_files(self, files: Dict[str, str], **kw) -> "CandidateCodebase":
        merged = dict(self.files)
        merged.update(files)
        return CandidateCodebase(merged, **{"parent_id": self.parent_id, "iteration": self.iteration,
                                            "provenance": self.provenance, **kw})

    def to_dict(self) -> dict:
        return {"id": self.id, "files": self.files, "parent_id": self.parent_id,
                "iteration": self.iteration, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateCodebase":
        c = cls(dict(data["files"]), data.get("parent_id"), data.get("iteration", 0), data.get("provenance", "seed"))
        if "id" in data and data["id"] != c.id:
            raise ValueError(f"candidate id mismatch: stored {data['id']}, computed {c.id}")
        return c


@dataclass
class ResourceLimits:
    wall_time_limit: float = 600.0
    memory_limit: Optional[int] = None  # bytes of address space; None = inherit
    grace: float = 2.0

    def __post_init__(self):
        if self.wall_time_limit <= 0:
            raise ValueError("wall_time_limit must be positive")
        if self.memory_limit is not None and self.memory_limit <= 0:
            raise ValueError("memory_limit must be positive")


@dataclass
class RunManifest:
    status: str
    phase: Optional[str] = None
    metrics: Optional[dict] = None
    d_raw: Optional[dict] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    failure_log: str = ""
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "OK"

    def to_dict(self) -> dict:
        doc = dict(self.extra)
        doc.update({"status": self.status, "phase": self.phase, "metrics": self.metrics, "d_raw": self.d_raw,
                    "artifacts": self.artifacts, "wall_time": self.wall_time, "failure_log": self.failure_log})
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        extra = {k: v for k, v in doc.items() if k not in CORE_KEYS}
        return cls(doc["status"], doc.get("phase"), doc.get("metrics"), doc.get("d_raw"),
                   dict(doc.get("artifacts") or {}), float(doc.get("wall_time") or 0.0),
                   doc.get("failure_log") or "", extra)


def _metric_violations(metrics) -> List[str]:
    if not isinstance(metrics, dict):
        return ["metrics must be an object"]
    out = [f"metrics missing {k}" for k in METRIC_KEYS if k not in metrics]
    for k in ("ndcg_at_5", "hr_at_5"):
        v = metrics.get(k)
        if k in metrics and (not isinstance(v, (int, float)) or isinstance(v, bool) or not 0.0 <= v <= 1.0):
            out.append(f"metrics {k} must be a number in [0, 1]")
    return out


def validate_manifest(raw: Union[bytes, str]) -> Union[RunManifest, List[str]]:
    """Schema-check a manifest. Returns the manifest, or the list of violations.

    Unknown keys are kept in ``extra``; unknown keys inside ``d_raw`` are always legal.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError:
            return ["unparseable"]
    try:
        doc = json.loads(raw) if raw.strip() else None
    except json.JSONDecodeError:
        doc = None
    if not isinstance(doc, dict):
        return ["unparseable"]
    violations = []
    status = doc.get("status")
    if status not in STATUSES:
        violations.append(f"status must be one of {', '.join(STATUSES)}")
    phase = doc.get("phase")
    if phase is not None and phase not in PHASES:
        violations.append(f"unknown phase {phase!r}")
    if status == "OK":
        if phase == "diagnose":
            if not isinstance(doc.get("d_raw"), dict) or not doc["d_raw"]:
                violations.append("d_raw required when OK for diagnose")
        elif doc.get("metrics") is None:
            violations.append("metrics required when OK")
        else:
            violations.extend(_metric_violations(doc["metrics"]))
    elif status in ("FAIL", "TIMEOUT") and not doc.get("failure_log"):
        violations.append("failure_log required when FAIL or TIMEOUT")
    if doc.get("d_raw") is not None and not isinstance(doc["d_raw"], dict):
        violations.append("d_raw must be an object")
    if violations:
        return violations
    return RunManifest.from_dict(doc)


def _safe_relpath(key: str) -> str:
    if not key or "\0" in key or "\\" in key:
        raise MaterializeError(f"illegal file key {key!r}")
    if key.startswith("/") or (len(key) > 1 and key[1] == ":"):
        raise MaterializeError(f"absolute file key {key!r}")
    norm = posixpath.normpath(key)
    if norm.startswith("..") or norm == "." or ".." in norm.split("/") or norm.split("/")[0] == RUNS_DIR:
        raise MaterializeError(f"file key escapes workspace: {key!r}")
    return norm


def materialize(c: CandidateCodebase, workspace_root) -> Path:
    """Write the candidate's files under ``workspace_root/<id>``; every key is checked before any write."""
    rels = {key: _safe_relpath(key) for key in c.files}
    ws = Path(workspace_root) / c.id
    ws.mkdir(parents=True, exist_ok=True)
    real_ws = ws.resolve()
    for key, rel in rels.items():
        target = (ws / rel)
        if not str(target.resolve()).startswith(str(real_ws) + os.sep):
            raise MaterializeError(f"file key escapes workspace: {key!r}")
    for key, rel in rels.items():
        target = ws / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        if target.is_symlink():
            target.unlink()
        target.write_bytes(c.files[key].encode("utf-8"))
    return ws


def tree_hash(path, exclude=(RUNS_DIR,)) -> str:
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if rel.split("/")[0] in exclude or p.is_dir() or "__pycache__" in rel:
            continue
        h.update(rel.encode() + b"\0" + p.read_bytes() + b"\0")
    return h.hexdigest()


def _package_root() -> str:
    return str(Path(__file__).resolve().parent.parent)


def _tail(path: Path) -> str:
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except OSError:
        return ""
    return text[-LOG_TAIL:]


class Sandbox:
    """Runs candidate phases as child processes; counts every spawn."""

    def __init__(self, workspace_root, data_dir, limits: Optional[ResourceLimits] = None,
                 python: str = sys.executable):
        self.workspace_root = Path(workspace_root)
        self.workspace_root.mkdir(parents=True, exist_ok=True)
        self.data_dir = Path(data_dir).resolve()
        self.limits = limits or ResourceLimits()
        self.python = python
        self.spawned = 0
        self._lock = threading.Lock()

    def materialize(self, c: CandidateCodebase) -> Path:
        c.check_entrypoints()
        return materialize(c, self.workspace_root)

    def run_phase(self, workspace, phase: str, config: Optional[dict] = None,
                  limits: Optional[ResourceLimits] = None, tag: Optional[str] = None) -> RunManifest:
        with self._lock:
            self.spawned += 1
        return run_phase(workspace, phase, limits or self.limits, self.data_dir, config, python=self.python, tag=tag)


def _limit_child(memory_limit: Optional[int]):
    def apply():
        if memory_limit:
            resource.setrlimit(resource.RLIMIT_AS, (memory_limit, memory_limit))
    return apply


def run_phase(workspace, phase: str, limits: ResourceLimits, data_dir, config: Optional[dict] = None,
              python: str = sys.executable, tag: Optional[str] = None) -> RunManifest:
    """Execute one phase; every failure mode is reported through the manifest status.

    Outputs go to ``<workspace>/runs/<tag or phase>``.
    """
    if phase not in PHASES:
        return RunManifest("FAIL", phase, failure_log=f"unknown phase {phase!r}")
    ws = Path(workspace).resolve()
    entry = DIAG_ENTRY if phase == "diagnose" else PIPELINE_ENTRY
    runs = ws / RUNS_DIR
    name = tag or phase
    if name != phase and name in PHASES or "/" in name or name.startswith("."):
        return RunManifest("FAIL", phase, failure_log=f"illegal output tag {name!r}")
    out = runs / name
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    cfg = {"train_dir": str(runs / "train"), "workspace": str(ws)}
    cfg.update(config or {})
    cfg_path = runs / f"{name}.config.json"
    cfg_path.write_text(json.dumps(cfg, sort_keys=True))
    stdout_path, stderr_path = runs / f"{name}.stdout", runs / f"{name}.stderr"
    env = {k: v for k, v in os.environ.items() if not k.endswith("_API_KEY")}
    env.update({
        "PYTHONPATH": os.pathsep.join([str(ws), _package_root()]),
        "PYTHONHASHSEED": "0",
        "OMP_NUM_THREADS": "1",
        "MKL_NUM_THREADS": "1",
        "PYTHONDONTWRITEBYTECODE": "1",
    })
    cmd = [python, entry, "--phase", phase, "--data", str(data_dir), "--out", str(out), "--config", str(cfg_path)]
    start = time.monotonic()
    if not (ws / entry).exists():
        return RunManifest("FAIL", phase, failure_log=f"entrypoint {entry} missing")
    with open(stdout_path, "wb") as so, open(stderr_path, "wb") as se:
        try:
            proc = subprocess.Popen(cmd, cwd=ws, env=env, stdout=so, stderr=se, stdin=subprocess.DEVNULL,
                                    start_new_session=True, preexec_fn=_limit_child(limits.memory_limit))
        except OSError as exc:
            return RunManifest("FAIL", phase, wall_time=time.monotonic() - start, failure_log=f"spawn failed: {exc}")
        try:
            code = proc.wait(timeout=limits.wall_time_limit)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
            wall = time.monotonic() - start
            log = f"wall time limit of {limits.wall_time_limit:g}s exceeded\n{_tail(stderr_path)}"
            return RunManifest("TIMEOUT", phase, wall_time=wall, failure_log=log)
    wall = time.monotonic() - start
    stderr_tail = _tail(stderr_path)
    manifest_path = out / MANIFEST_NAME
    if code != 0:
        log = f"exit code {code}\n{stderr_tail}" if stderr_tail else f"exit code {code}\n{_tail(stdout_path)}"
        return RunManifest("FAIL", phase, wall_time=wall, failure_log=log)
    if not manifest_path.exists():
        return RunManifest("FAIL", phase, wall_time=wall, failure_log=f"no manifest written\n{stderr_tail}")
    parsed = validate_manifest(manifest_path.read_bytes())
    if isinstance(parsed, list):
        return RunManifest("FAIL", phase, wall_time=wall,
                           failure_log="invalid manifest: " + "; ".join(parsed) + f"\n{stderr_tail}")
    parsed.phase = parsed.phase or phase
    parsed.wall_time = wall
    if parsed.status == "OK" and parsed.phase != phase:
        return RunManifest("FAIL", phase, wall_time=wall, failure_log=f"manifest reports phase {parsed.phase!r}")
    return parsed
