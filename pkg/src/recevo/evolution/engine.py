"""Outer evolution loop: evaluation with caching, planning, code evolution and DIAG co-evolution."""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..candidate import RECOMMENDATIONS_FILE, read_recommendations
from ..dataset import Dataset, SplitDataset
from ..diagnosis import interpret_diagnosis
from ..llm_gateway import TranscriptLog
from ..personas import build_personas
from ..retrieval import DEFAULT_TOP_N, search
from ..sandbox import DIAG_ENTRY, RUNS_DIR, CandidateCodebase, ResourceLimits, RunManifest, Sandbox
from ..simulator import (
    DEFAULT_CONCURRENCY,
    DEFAULT_REC_LENGTH,
    DEFAULT_SAMPLE_SIZE,
    SimulatorReport,
    run_simulator,
    sample_users,
)
from .archive import ARCHIVE_FILE, ArchiveEntry, ArchiveError, EvolutionArchive, archive_digest, sample_parent
from .planning import (
    IterationAborted,
    analyze_structure,
    build_dev_report,
    coevolve_diag,
    evolve_code,
    plan_queries,
)

logger = logging.getLogger(__name__)

ITERATIONS_DIR = "iterations"
TRANSCRIPT_FILE = "transcript.jsonl"
TEST_TAG = "test_evaluate"
SCORE_METRICS = ("hr_at_5", "ndcg_at_5")


class InitializationError(RuntimeError):
    def __init__(self, message: str, failure_log: str = ""):
        super().__init__(message)
        self.failure_log = failure_log


class EvolutionError(RuntimeError):
    pass


@dataclass
class EvolutionConfig:
    T: int = 21
    temperature: float = 0.7
    seed: int = 0
    sample_size: int = DEFAULT_SAMPLE_SIZE
    wall_time_limit: float = 600.0
    memory_limit: Optional[int] = None
    top_n: int = DEFAULT_TOP_N
    coevolve: bool = True
    simulate: bool = True
    probe_users: Optional[int] = None
    rec_k: int = DEFAULT_REC_LENGTH
    score_metric: str = "hr_at_5"
    concurrency: int = DEFAULT_CONCURRENCY
    history_limit: int = 50
    model_overrides: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.sample_size < 1 or self.top_n < 1 or self.rec_k < 1:
            raise ValueError("sample_size, top_n and rec_k must be >= 1")
        if self.score_metric not in SCORE_METRICS:
            raise ValueError(f"score_metric must be one of {SCORE_METRICS}")

    @property
    def limits(self) -> ResourceLimits:
        return ResourceLimits(self.wall_time_limit, self.memory_limit)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvolutionConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown evolution keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EvolutionDeps:
    sandbox: Sandbox
    split: SplitDataset
    llm: object
    run_dir: Path
    retrieval: object = None
    personas: Optional[dict] = None
    _train_dataset: Optional[Dataset] = field(default=None, repr=False)

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    @property
    def train_dataset(self) -> Dataset:
        # personas and SIM histories see training interactions only
        if self._train_dataset is None:
            self._train_dataset = Dataset(self.split.train_records(), self.split.dataset.attributes)
        return self._train_dataset

    def get_personas(self) -> dict:
        if self.personas is None:
            self.personas = build_personas(self.train_dataset)
        return self.personas

    def sim_users(self, cfg: EvolutionConfig) -> List[str]:
        n = min(cfg.sample_size, len(self.split.users))
        return sample_users(self.train_dataset, n, cfg.seed)


@dataclass
class Evaluation:
    candidate_id: str
    cached: bool
    entry: Optional[ArchiveEntry] = None
    failure: Optional[RunManifest] = None

    @property
    def ok(self) -> bool:
        return self.entry is not None

    @property
    def score(self) -> Optional[float]:
        return self.entry.score if self.entry else None

    @property
    def sim_report(self) -> Optional[dict]:
        return self.entry.sim_report if self.entry else None

    @property
    def diag_report(self) -> Optional[dict]:
        return self.entry.diag_report if self.entry else None


def _train_config(cfg: EvolutionConfig) -> dict:
    return {"seed": cfg.seed, "model_overrides": dict(cfg.model_overrides)}


def _diag_config(cfg: EvolutionConfig) -> dict:
    return {"seed": cfg.seed, "probe_users": cfg.probe_users}


def _copy_train(src_ws: Path, dst_ws: Path) -> None:
    src, dst = Path(src_ws) / RUNS_DIR / "train", Path(dst_ws) / RUNS_DIR / "train"
    if src.resolve() == dst.resolve():
        return
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)


def evaluate_codebase(c: CandidateCodebase, a: EvolutionArchive, deps: EvolutionDeps, cfg: EvolutionConfig,
                      iteration: int = 0, change_summary: str = "", pretrained: Optional[Path] = None,
                      precomputed: Optional[Dict[str, RunManifest]] = None) -> Evaluation:
    """Phase 1: cached results if the archive holds them, else train + evaluate + diagnose, SIM and DIAG.

    ``pretrained`` names a workspace whose train outputs belong to an identical
    pipeline; with ``precomputed["train"]`` they are reused instead of retraining.
    Failures go to the event log and the candidate is not admitted.
    """
    if c.id in a.entries:
        a.log(iteration, "cache_hit", c.id)
        return Evaluation(c.id, True, a.entries[c.id])
    precomputed = dict(precomputed or {})
    sb = deps.sandbox
    ws = sb.materialize(c)
    manifests: Dict[str, RunManifest] = {}

    def fail(m: RunManifest) -> Evaluation:
        a.log(iteration, m.status.lower(), c.id, phase=m.phase, failure_log=m.failure_log[-2000:])
        logger.warning("candidate %s %s in %s", c.id, m.status, m.phase)
        return Evaluation(c.id, False, failure=m)

    if "train" in precomputed and pretrained is not None:
        _copy_train(pretrained, ws)
        manifests["train"] = precomputed["train"]
    else:
        manifests["train"] = sb.run_phase(ws, "train", _train_config(cfg))
    if not manifests["train"].ok:
        return fail(manifests["train"])
    users = deps.sim_users(cfg) if cfg.simulate and deps.llm is not None else []
    manifests["evaluate"] = sb.run_phase(ws, "evaluate", {"sim_users": users, "eval_phase": "validation",
                                                          "rec_k": cfg.rec_k, "seed": cfg.seed})
    if not manifests["evaluate"].ok:
        return fail(manifests["evaluate"])
    manifests["diagnose"] = precomputed.get("diagnose") or sb.run_phase(ws, "diagnose", _diag_config(cfg))
    if not manifests["diagnose"].ok:
        return fail(manifests["diagnose"])

    sim_report, critiques = None, []
    if users:
        recs = read_recommendations(ws / RUNS_DIR / "evaluate" / RECOMMENDATIONS_FILE)
        recs = {u: v for u, v in recs.items() if v}
        history = {u: list(deps.split.train[u])[-cfg.history_limit:] for u in recs}
        if recs:
            crit, report = run_simulator(deps.train_dataset, deps.get_personas(), recs, history, deps.llm,
                                         cfg.concurrency)
            sim_report, critiques = report.to_dict(), [x.to_dict() for x in crit]
    d_raw = manifests["diagnose"].d_raw
    diag = interpret_diagnosis(d_raw, sim_report=SimulatorReport.from_dict(sim_report) if sim_report else None,
                               llm=deps.llm, state_key=c.id)
    metrics = manifests["evaluate"].metrics
    entry = ArchiveEntry(
        candidate=c, score=float(metrics[cfg.score_metric]), metrics=metrics, sim_report=sim_report,
        diag_report=diag.to_dict(), d_raw=d_raw, manifests={k: m.to_dict() for k, m in manifests.items()},
        iteration=iteration, change_summary=change_summary, critiques=critiques,
    )
    improved = a.add(entry)
    a.log(iteration, "admitted", c.id, score=entry.score, parent_id=c.parent_id, new_best=improved)
    return Evaluation(c.id, False, entry)


def init_archive(seed: CandidateCodebase, deps: EvolutionDeps, cfg: EvolutionConfig) -> EvolutionArchive:
    """Evaluate the seed; its train phase doubles as the dry run."""
    seed.check_entrypoints()
    a = EvolutionArchive()
    it_dir = _iteration_dir(deps, 0)
    _attach_transcript(deps, it_dir)
    result = evaluate_codebase(seed, a, deps, cfg, iteration=0)
    if not result.ok:
        m = result.failure
        raise InitializationError(f"seed candidate {m.status} in {m.phase}", m.failure_log)
    a.completed_iterations = 0
    _write_bundle(it_dir, {"candidate": seed.to_dict(), "evaluation": result.entry.to_dict(), "events": a.events})
    a.save(deps.run_dir / ARCHIVE_FILE)
    return a


# --------------------------------------------------------------------------
# run directory


def _iteration_dir(deps: EvolutionDeps, t: int) -> Path:
    d = deps.run_dir / ITERATIONS_DIR / f"iter_{t:03d}"
    if d.exists():
        # a partially completed iteration is redone from scratch on resume
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


def _attach_transcript(deps: EvolutionDeps, it_dir: Path) -> None:
    if deps.llm is not None and hasattr(deps.llm, "transcript"):
        deps.llm.transcript = TranscriptLog(it_dir / TRANSCRIPT_FILE)


def _write_bundle(it_dir: Path, parts: dict) -> None:
    for name, doc in parts.items():
        if doc is not None:
            (it_dir / f"{name}.json").write_text(json.dumps(doc, sort_keys=True, indent=1, default=str))


def load_run_transcripts(run_dir) -> List[dict]:
    """All recorded LLM exchanges of a run, in iteration order (for replay)."""
    entries = []
    for it_dir in sorted((Path(run_dir) / ITERATIONS_DIR).glob("iter_*")):
        path = it_dir / TRANSCRIPT_FILE
        if path.exists():
            entries.extend(TranscriptLog(path).entries())
    return entries


# --------------------------------------------------------------------------
# one iteration


def run_iteration(t: int, a: EvolutionArchive, deps: EvolutionDeps, cfg: EvolutionConfig) -> None:
    it_dir = _iteration_dir(deps, t)
    _attach_transcript(deps, it_dir)
    first_event = len(a.events)
    llm, sb, key = deps.llm, deps.sandbox, f"iter{t}"
    bundle: Dict[str, object] = {}
    try:
        parent = sample_parent(a, cfg.temperature, seed=cfg.seed * 100_003 + t)
        a.log(t, "parent", parent.id)
        parent_eval = evaluate_codebase(parent, a, deps, cfg, iteration=t)
        r_sim, r_diag = parent_eval.sim_report, parent_eval.diag_report
        digest = archive_digest(a)
        queries = plan_queries(r_sim, r_diag, digest, llm, state_key=key)
        docs = search(queries, cfg.top_n, deps.retrieval)
        if docs.warning:
            a.log(t, "retrieval_warning", parent.id, warning=docs.warning)
        bundle.update(queries=[asdict(q) for q in queries], docs=[d.to_dict() for d in docs])
        r_dev = build_dev_report(r_sim, r_diag, digest, docs, llm, state_key=key)
        bundle["r_dev"] = r_dev.to_dict()
        edit = evolve_code(r_dev, parent, digest, llm, iteration=t, state_key=key)
        bundle["edits"] = {"applied": edit.applied, "rejected": edit.rejected, "summary": edit.summary}
        for r in edit.rejected:
            a.log(t, "edit_rejected", parent.id, **r)
    except IterationAborted as exc:
        a.log(t, "aborted", None, reason=str(exc))
        _finish_iteration(it_dir, a, first_event, bundle)
        return

    child = edit.child
    if child.id in a.entries:
        a.log(t, "cache_hit", child.id, note="edit reproduced an archived candidate")
        _finish_iteration(it_dir, a, first_event, bundle)
        return
    ws0 = sb.materialize(child)
    m_train = sb.run_phase(ws0, "train", _train_config(cfg))
    if not m_train.ok:
        a.log(t, m_train.status.lower(), child.id, phase="train", failure_log=m_train.failure_log[-2000:])
        bundle["candidate"] = child.to_dict()
        bundle["manifests"] = {"train": m_train.to_dict()}
        _finish_iteration(it_dir, a, first_event, bundle)
        return

    precomputed = {"train": m_train}
    if cfg.coevolve:
        analysis = analyze_structure(child, parent.diag_source, llm, state_key=key)
        bundle["analysis"] = analysis.to_dict() if analysis else None

        def dry_run(source: str) -> RunManifest:
            trial = child.with_files({DIAG_ENTRY: source}, parent_id=parent.id, iteration=t,
                                     provenance=child.provenance)
            ws = sb.materialize(trial)
            _copy_train(ws0, ws)
            return sb.run_phase(ws, "diagnose", _diag_config(cfg))

        coev = coevolve_diag(r_sim, analysis, digest, llm, deps.retrieval, parent.diag_source, child.files,
                             dry_run, state_key=key, top_n=cfg.top_n)
        bundle["coevolution"] = coev.to_dict()
        if coev.accepted:
            a.log(t, "diag_updated", child.id, reason=coev.reason)
            child = child.with_files({DIAG_ENTRY: coev.source}, parent_id=parent.id, iteration=t,
                                     provenance=child.provenance)
            precomputed["diagnose"] = coev.manifest
        else:
            a.log(t, "diag_reverted" if coev.manifest is not None else "diag_kept", child.id, reason=coev.reason)

    bundle["candidate"] = child.to_dict()
    result = evaluate_codebase(child, a, deps, cfg, iteration=t, change_summary=edit.summary, pretrained=ws0,
                               precomputed=precomputed)
    if result.ok and not result.cached:
        bundle.update(r_sim=result.sim_report, r_diag=result.diag_report, d_raw=result.entry.d_raw,
                      manifests=result.entry.manifests, metrics=result.entry.metrics)
    _finish_iteration(it_dir, a, first_event, bundle)


def _finish_iteration(it_dir: Path, a: EvolutionArchive, first_event: int, bundle: dict) -> None:
    bundle["events"] = a.events[first_event:]
    _write_bundle(it_dir, bundle)


# --------------------------------------------------------------------------
# outer loop


def final_test_evaluation(a: EvolutionArchive, deps: EvolutionDeps, cfg: EvolutionConfig) -> dict:
    """The single test-split evaluation, run for the returned best candidate only."""
    best = a.best
    ws = deps.sandbox.materialize(best.candidate)
    if not (ws / RUNS_DIR / "train" / "manifest").exists():
        m = deps.sandbox.run_phase(ws, "train", _train_config(cfg))
        if not m.ok:
            raise EvolutionError(f"best candidate could not be retrained: {m.failure_log[-500:]}")
    m = deps.sandbox.run_phase(ws, "evaluate", {"eval_phase": "test", "seed": cfg.seed}, tag=TEST_TAG)
    if not m.ok:
        raise EvolutionError(f"test evaluation failed: {m.failure_log[-500:]}")
    best.test_metrics = m.metrics
    a.best_test_metrics = m.metrics
    return m.metrics


def run_evolution(cfg: EvolutionConfig, seed: CandidateCodebase, deps: EvolutionDeps, resume: bool = False,
                  stop_after: Optional[int] = None) -> Tuple[EvolutionArchive, CandidateCodebase, int]:
    """T iterations from ``seed``; returns (archive, best candidate, peak iteration).

    The archive is persisted after every iteration. ``resume`` continues from a
    persisted archive; ``stop_after`` ends the run early (partial archive), as an
    interruption would.
    """
    if deps.llm is None:
        raise EvolutionError("evolution needs an LLM gateway")
    path = deps.run_dir / ARCHIVE_FILE
    if path.exists():
        if not resume:
            raise EvolutionError(f"{path} exists; resume or choose a fresh run directory")
        a = EvolutionArchive.load(path)
        if not a.entries:
            raise ArchiveError("persisted archive has no entries")
        logger.info("resuming after iteration %d", a.completed_iterations)
    else:
        a = init_archive(seed, deps, cfg)
    for t in range(a.completed_iterations + 1, cfg.T + 1):
        run_iteration(t, a, deps, cfg)
        a.completed_iterations = t
        a.save(path)
        logger.info("iteration %d done: best %s score %.4f (peak %d)", t, a.best_id, a.best.score, a.peak_iteration)
        if stop_after is not None and t >= stop_after and t < cfg.T:
            return a, a.best.candidate, a.peak_iteration
    if not a.finished:
        final_test_evaluation(a, deps, cfg)
        a.finished = True
        a.save(path)
    return a, a.best.candidate, a.peak_iteration
