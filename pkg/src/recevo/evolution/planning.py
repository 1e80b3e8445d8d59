"""LLM-driven steps of an iteration: query planning, development reports, code edits,
structural analysis and diagnosis-tool co-evolution."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

from ..llm_gateway import ParseError
from ..retrieval import DEFAULT_TOP_N, ResearchQuery, SearchResult, search
from ..sandbox import DIAG_ENTRY, CandidateCodebase, RunManifest

logger = logging.getLogger(__name__)

MAX_QUERIES = 5
EXPLORATORY = "exploratory"


class IterationAborted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# feedback views


def sim_text(r_sim: Optional[dict]) -> str:
    if not r_sim:
        return "(no simulator report)"
    from ..simulator import SimulatorReport

    return SimulatorReport.from_dict(r_sim).to_text()


def diag_text(r_diag: Optional[dict]) -> str:
    if not r_diag:
        return "(no diagnosis report)"
    from ..diagnosis import DiagnosisReport

    return DiagnosisReport.from_dict(r_diag).to_text()


def feedback_items(r_sim: Optional[dict], r_diag: Optional[dict]) -> List[str]:
    """SIM tags plus non-info DIAG findings (probe ids and claims)."""
    items = [f["tag"] for f in (r_sim or {}).get("common_failures", [])]
    for f in (r_diag or {}).get("findings", []):
        if f["severity"] != "info":
            items.extend(f["probes"])
            items.append(f["claim"])
    return items


def _links(address: str, known: Sequence[str]) -> bool:
    a = address.strip().lower()
    if not a:
        return False
    return any(a == k.lower() or a in k.lower() or k.lower() in a for k in known)


# --------------------------------------------------------------------------
# planning


def plan_queries(r_sim: Optional[dict], r_diag: Optional[dict], archive_digest: str, llm,
                 state_key: str = "default", instruction_id: str = "I_PLAN",
                 extra: Optional[dict] = None) -> List[ResearchQuery]:
    """1 to 5 feedback-targeted queries; an unusable reply degrades to no queries."""
    if r_sim is None and r_diag is None:
        raise ValueError("planning needs a simulator or diagnosis report")
    bindings = {"r_sim": sim_text(r_sim), "r_diag": diag_text(r_diag), "archive_digest": archive_digest}
    bindings.update(extra or {})
    try:
        doc = llm.chat(instruction_id, bindings, state_key=state_key, schema="query_list")
    except ParseError as exc:
        logger.warning("query planning unparseable, continuing without retrieval: %s", exc)
        return []
    known = feedback_items(r_sim, r_diag)
    out = []
    for q in doc["queries"][:MAX_QUERIES]:
        if not q["text"].strip():
            continue
        motivation = q.get("motivation") or EXPLORATORY
        if known and motivation != EXPLORATORY and not _links(motivation, known):
            logger.info("query %r motivation %r matches no feedback item", q["text"], motivation)
        out.append(ResearchQuery(q["text"].strip(), motivation))
    if not known and len(out) > 1:
        # with nothing to fix only a single exploratory query is allowed
        out = [ResearchQuery(out[0].text, EXPLORATORY)]
    return out


@dataclass
class Modification:
    target: str
    change: str
    expected_effect: str = ""
    addresses: List[str] = field(default_factory=list)
    exploratory: bool = False


@dataclass
class DevelopmentReport:
    summary: str
    modifications: List[Modification]
    citations: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "DevelopmentReport":
        return cls(doc["summary"], [Modification(**m) for m in doc["modifications"]], list(doc.get("citations", [])))

    def to_text(self) -> str:
        lines = [self.summary.strip() or "(no summary)"]
        for i, m in enumerate(self.modifications, 1):
            link = EXPLORATORY if m.exploratory else ", ".join(m.addresses)
            lines.append(f"{i}. [{m.target}] {m.change} | expected: {m.expected_effect or '-'} | addresses: {link}")
        if self.citations:
            lines.append("Citations: " + ", ".join(self.citations))
        return "\n".join(lines)


def _parse_dev_report(doc: dict, known: Sequence[str], docs: Optional[SearchResult]) -> DevelopmentReport:
    mods = []
    for m in doc["modifications"]:
        linked = [a for a in m.get("addresses", []) if _links(a, known)]
        mods.append(Modification(m["target"], m["change"], m.get("expected_effect", ""), linked, not linked))
    valid_ids = {d.doc_id for d in docs} if docs is not None else set()
    citations = [c for c in doc.get("citations", []) if c in valid_ids]
    return DevelopmentReport(doc.get("summary", ""), mods, citations)


def build_dev_report(r_sim: Optional[dict], r_diag: Optional[dict], archive_digest: str,
                     docs: Optional[SearchResult], llm, state_key: str = "default") -> DevelopmentReport:
    """Feedback-linked modification plan. Modifications that link to no feedback item become exploratory.

    A reply still unparseable after the gateway's re-asks raises IterationAborted.
    """
    bindings = {"r_sim": sim_text(r_sim), "r_diag": diag_text(r_diag), "archive_digest": archive_digest,
                "docs": docs.to_text() if docs is not None else "(no documents retrieved)"}
    try:
        doc = llm.chat("I_REPORT", bindings, state_key=state_key, schema="dev_report")
    except ParseError as exc:
        raise IterationAborted(f"development report unparseable: {exc}") from exc
    return _parse_dev_report(doc, feedback_items(r_sim, r_diag), docs)


# --------------------------------------------------------------------------
# code evolution


def render_files(files: dict, skip: Sequence[str] = ()) -> str:
    return "\n\n".join(f"=== {p} ===\n{src}" for p, src in sorted(files.items()) if p not in skip)


@dataclass
class EditOutcome:
    child: CandidateCodebase
    applied: List[str]
    rejected: List[dict]
    summary: str


def evolve_code(r_dev: DevelopmentReport, parent: CandidateCodebase, archive_digest: str, llm,
                iteration: int = 0, state_key: str = "default") -> EditOutcome:
    """Apply full-file replacements to a copy of the parent.

    Edits to unknown paths, or to the diagnosis tool (which only changes through
    co-evolution), are rejected. No applicable edit aborts the iteration.
    """
    bindings = {"r_dev": r_dev.to_text(), "archive_digest": archive_digest, "files": render_files(parent.files)}
    try:
        doc = llm.chat("I_CODE", bindings, state_key=state_key, schema="code_edits")
    except ParseError as exc:
        raise IterationAborted(f"code edits unparseable: {exc}") from exc
    files = dict(parent.files)
    applied, rejected = [], []
    for edit in doc["edits"]:
        path = edit["path"]
        if path not in parent.files:
            rejected.append({"path": path, "reason": "unknown path"})
        elif path == DIAG_ENTRY:
            rejected.append({"path": path, "reason": "diagnosis tool changes only through co-evolution"})
        else:
            files[path] = edit["content"]
            applied.append(path)
    for r in rejected:
        logger.warning("rejected edit to %s: %s", r["path"], r["reason"])
    if not applied:
        raise IterationAborted("no applicable edits" if not rejected else "all edits rejected")
    summary = (doc.get("summary") or r_dev.summary or "code edit").strip().splitlines()[0][:200]
    child = CandidateCodebase(files, parent_id=parent.id, iteration=iteration, provenance=summary)
    return EditOutcome(child, applied, rejected, summary)


# --------------------------------------------------------------------------
# structural analysis and co-evolution


@dataclass
class StructuralAnalysis:
    execution_flow: str
    added: List[str] = field(default_factory=list)
    removed: List[str] = field(default_factory=list)
    modified: List[str] = field(default_factory=list)
    loss_function: str = ""
    gaps: List[dict] = field(default_factory=list)
    dropped_gaps: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [f"Execution flow: {self.execution_flow}"]
        for name in ("added", "removed", "modified"):
            values = getattr(self, name)
            lines.append(f"{name.capitalize()}: {', '.join(values) if values else 'none'}")
        lines.append(f"Loss: {self.loss_function or 'unspecified'}")
        lines.append("Diagnosis gaps: " + ("; ".join(f"{g['component']} ({g['reason']})" for g in self.gaps)
                                           if self.gaps else "none"))
        return "\n".join(lines)


def analyze_structure(child: CandidateCodebase, diag_parent: str, llm,
                      state_key: str = "default") -> Optional[StructuralAnalysis]:
    """Structural report of the child; gaps naming components absent from its files are dropped.

    Returns None when the reply stays unparseable (co-evolution is then skipped).
    """
    bindings = {"files": render_files(child.files, skip=(DIAG_ENTRY,)), "diag_source": diag_parent}
    try:
        doc = llm.chat("I_ANALYZE", bindings, state_key=state_key, schema="structural_analysis")
    except ParseError as exc:
        logger.warning("structural analysis unparseable, co-evolution skipped: %s", exc)
        return None
    corpus = "\n".join(src for p, src in child.files.items() if p != DIAG_ENTRY).lower()
    kept, dropped = [], []
    for g in doc.get("gaps", []):
        if g["component"].strip() and g["component"].lower() in corpus:
            kept.append(dict(g))
        else:
            logger.warning("dropping diagnosis gap for missing component %r", g["component"])
            dropped.append(dict(g))
    return StructuralAnalysis(doc["execution_flow"], list(doc.get("added", [])), list(doc.get("removed", [])),
                              list(doc.get("modified", [])), doc.get("loss_function", ""), kept, dropped)


@dataclass
class CoevolutionResult:
    source: str
    accepted: bool
    reason: str
    manifest: Optional[RunManifest] = None
    queries: List[ResearchQuery] = field(default_factory=list)
    report: Optional[DevelopmentReport] = None

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "reason": self.reason,
            "queries": [asdict(q) for q in self.queries],
            "report": self.report.to_dict() if self.report else None,
            "dry_run": self.manifest.to_dict() if self.manifest else None,
        }


def _valid_d_raw(manifest: RunManifest) -> bool:
    d_raw = manifest.d_raw
    return (manifest.ok and isinstance(d_raw, dict) and bool(d_raw)
            and all(isinstance(v, dict) and "value" in v for v in d_raw.values()))


def coevolve_diag(r_sim: Optional[dict], analysis: Optional[StructuralAnalysis], archive_digest: str, llm,
                  retrieval, diag_parent: str, files: dict, dry_run: Callable[[str], RunManifest],
                  state_key: str = "default", top_n: int = DEFAULT_TOP_N) -> CoevolutionResult:
    """Plan, research, report and rewrite the diagnosis tool; keep it only if its dry run yields a valid D_raw.

    Every failure reverts to ``diag_parent``; nothing here raises into the main loop
    except gateway transport errors.
    """
    tags = [f["tag"] for f in (r_sim or {}).get("common_failures", [])]
    if analysis is None:
        return CoevolutionResult(diag_parent, False, "no structural analysis")
    if not tags and not analysis.gaps:
        return CoevolutionResult(diag_parent, False, "no-op: no simulator findings and no diagnosis gaps")
    analysis_text = analysis.to_text()
    queries: List[ResearchQuery] = []
    try:
        doc = llm.chat("I_PLAN_DIAG", {"r_sim": sim_text(r_sim), "analysis": analysis_text,
                                       "archive_digest": archive_digest},
                       state_key=state_key, schema="query_list")
        queries = [ResearchQuery(q["text"], q.get("motivation") or EXPLORATORY)
                   for q in doc["queries"][:MAX_QUERIES] if q["text"].strip()]
    except ParseError as exc:
        logger.warning("diagnosis query planning unparseable: %s", exc)
    docs = search(queries, top_n, retrieval) if queries else SearchResult([])
    try:
        doc = llm.chat("I_REPORT_DIAG", {"r_sim": sim_text(r_sim), "analysis": analysis_text, "docs": docs.to_text()},
                       state_key=state_key, schema="dev_report")
        known = tags + [g["component"] for g in analysis.gaps]
        report = _parse_dev_report(doc, known, docs)
    except ParseError as exc:
        return CoevolutionResult(diag_parent, False, f"probe plan unparseable: {exc}", queries=queries)
    try:
        doc = llm.chat("I_CODE_DIAG", {"r_dev_diag": report.to_text(), "files": render_files(files, skip=(DIAG_ENTRY,)),
                                       "diag_path": DIAG_ENTRY, "diag_source": diag_parent,
                                       "archive_digest": archive_digest},
                       state_key=state_key, schema="diag_source")
    except ParseError as exc:
        return CoevolutionResult(diag_parent, False, f"diagnosis source unparseable: {exc}", queries=queries,
                                 report=report)
    source = doc["content"]
    if source == diag_parent:
        return CoevolutionResult(diag_parent, False, "no-op: unchanged diagnosis source", queries=queries, report=report)
    manifest = dry_run(source)
    if not _valid_d_raw(manifest):
        why = manifest.failure_log.strip().splitlines()[-1] if manifest.failure_log.strip() else "invalid D_raw"
        logger.warning("co-evolved diagnosis tool failed its dry run, reverting: %s", why)
        return CoevolutionResult(diag_parent, False, f"dry run failed: {why}", manifest, queries, report)
    return CoevolutionResult(source, True, "accepted", manifest, queries, report)


__all__ = [
    "CoevolutionResult",
    "DevelopmentReport",
    "EditOutcome",
    "IterationAborted",
    "Modification",
    "StructuralAnalysis",
    "analyze_structure",
    "build_dev_report",
    "coevolve_diag",
    "evolve_code",
    "feedback_items",
    "plan_queries",
]
