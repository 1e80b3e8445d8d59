"""The population archive: evaluated candidates, event log, best pointer, persistence and parent sampling."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..sandbox import CandidateCodebase

logger = logging.getLogger(__name__)

ARCHIVE_FILE = "archive.json"
DIGEST_SIZE = 10


class ArchiveError(RuntimeError):
    pass


@dataclass
class ArchiveEntry:
    candidate: CandidateCodebase
    score: float
    metrics: dict
    sim_report: Optional[dict]
    diag_report: dict
    d_raw: dict
    manifests: Dict[str, dict]
    iteration: int
    change_summary: str = ""
    critiques: List[dict] = field(default_factory=list)
    test_metrics: Optional[dict] = None

    @property
    def id(self) -> str:
        return self.candidate.id

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["candidate"] = self.candidate.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchiveEntry":
        doc = dict(doc)
        doc["candidate"] = CandidateCodebase.from_dict(doc["candidate"])
        return cls(**doc)


@dataclass
class EvolutionArchive:
    entries: Dict[str, ArchiveEntry] = field(default_factory=dict)
    events: List[dict] = field(default_factory=list)
    best_id: Optional[str] = None
    peak_iteration: int = 0
    completed_iterations: int = -1  # -1: seed not yet evaluated
    finished: bool = False
    best_test_metrics: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, cid: str) -> bool:
        return cid in self.entries

    def sampleable(self) -> List[ArchiveEntry]:
        # only successful, fully evaluated runs are ever admitted
        return list(self.entries.values())

    def add(self, entry: ArchiveEntry) -> bool:
        """Admit an entry; returns True when it becomes the new best (strict improvement only)."""
        if entry.id in self.entries:
            raise ArchiveError(f"candidate {entry.id} already archived")
        self.entries[entry.id] = entry
        if self.best_id is None or entry.score > self.entries[self.best_id].score:
            self.best_id = entry.id
            self.peak_iteration = entry.iteration
            return True
        return False

    def log(self, iteration: int, kind: str, candidate: Optional[str] = None, **detail) -> dict:
        event = {"iteration": iteration, "kind": kind, "candidate": candidate}
        event.update(detail)
        self.events.append(event)
        return event

    @property
    def best(self) -> ArchiveEntry:
        if self.best_id is None:
            raise ArchiveError("archive is empty")
        return self.entries[self.best_id]

    def lineage(self) -> List[dict]:
        return [{"id": e.id, "parent_id": e.candidate.parent_id, "iteration": e.iteration, "score": e.score}
                for e in self.entries.values()]

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries.values()],
            "events": self.events,
            "best_id": self.best_id,
            "peak_iteration": self.peak_iteration,
            "completed_iterations": self.completed_iterations,
            "finished": self.finished,
            "best_test_metrics": self.best_test_metrics,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvolutionArchive":
        a = cls()
        for e in doc["entries"]:
            entry = ArchiveEntry.from_dict(e)
            a.entries[entry.id] = entry
        a.events = list(doc.get("events", []))
        a.best_id = doc.get("best_id")
        a.peak_iteration = doc.get("peak_iteration", 0)
        a.completed_iterations = doc.get("completed_iterations", -1)
        a.finished = doc.get("finished", False)
        a.best_test_metrics = doc.get("best_test_metrics")
        if a.best_id is not None and a.best_id not in a.entries:
            raise ArchiveError(f"best_id {a.best_id} not among entries")
        return a

    def save(self, path) -> None:
        """Atomic write (temp file + rename) so an interrupted run never leaves a torn index."""
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "EvolutionArchive":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ArchiveError(f"cannot read archive index {path}: {exc}") from exc
        try:
            return cls.from_dict(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"corrupt archive index {path}: {exc}") from exc


def sample_parent(a: EvolutionArchive, temperature: float, seed: int) -> CandidateCodebase:
    """Softmax over validation scores; temperature 0 is argmax (earliest entry wins ties)."""
    pool = a.sampleable()
    if not pool:
        raise ArchiveError("no sampleable entries")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    scores = np.array([e.score for e in pool], dtype=np.float64)
    if temperature == 0 or len(pool) == 1:
        return pool[int(np.argmax(scores))].candidate
    z = (scores - scores.max()) / temperature
    p = np.exp(z)
    p /= p.sum()
    return pool[int(np.random.default_rng(seed).choice(len(pool), p=p))].candidate


def archive_digest(a: EvolutionArchive, limit: int = DIGEST_SIZE) -> str:
    """One line per entry (iteration, score, top SIM tags, top DIAG findings, change), best first."""
    if not a.entries:
        return "(empty archive)"
    ranked = sorted(a.entries.values(), key=lambda e: (-e.score, e.iteration, e.id))[:limit]
    lines = []
    for e in ranked:
        tags = [f["tag"] for f in (e.sim_report or {}).get("common_failures", [])][:3]
        findings = [f["claim"] for f in e.diag_report.get("findings", []) if f["severity"] != "info"][:3]
        lines.append(
            f"iter {e.iteration} | id {e.id} | val score {e.score:.4f} | sim: {', '.join(tags) or 'none'}"
            f" | diag: {'; '.join(findings) or 'none'} | change: {e.change_summary or 'seed'}"
        )
    return "\n".join(lines)
