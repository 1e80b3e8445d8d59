"""Seed diagnosis probes, raw-diagnostics assembly, and threshold-based interpretation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

COLLAPSE = "embedding_collapse"
MARGIN = "ranking_margin"
SWAP = "swap_sensitivity"

SEVERITY_RANK = {"info": 0, "warn": 1, "critical": 2}

# simulator failure tag -> probe able to test it
TAG_PROBES = {
    "recency_ignored": SWAP,
    "category_mismatch": MARGIN,
    "low_diversity": "topk_diversity",
    "popularity_bias": "popularity_bias",
    "price_mismatch": "price_alignment",
}


class DiagnosisError(ValueError):
    pass


@dataclass
class ProbeResult:
    probe_id: str
    value: object  # float or Dict[str, float]
    core_findings: List[Tuple[str, int]] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        values = self.value.values() if isinstance(self.value, dict) else [self.value]
        if not all(math.isfinite(float(v)) for v in values):
            raise DiagnosisError(f"probe {self.probe_id} produced a non-finite value")
        if any(c < 0 for _, c in self.core_findings):
            raise DiagnosisError("negative count in core_findings")

    def to_dict(self) -> dict:
        return {
            "probe_id": self.probe_id,
            "value": self.value,
            "core_findings": [[a, int(c)] for a, c in self.core_findings],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeResult":
        return cls(data["probe_id"], data["value"], [(a, int(c)) for a, c in data.get("core_findings", [])],
                   dict(data.get("metadata", {})))


# --------------------------------------------------------------------------
# probes


def probe_embedding_collapse(item_embeddings, sample_size: int = 512, seed: int = 0) -> ProbeResult:
    """Mean cosine similarity over all unordered pairs of (up to ``sample_size``) sampled rows."""
    X = np.asarray(item_embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DiagnosisError("insufficient embeddings")
    n = X.shape[0]
    if n > sample_size:
        rows = np.sort(np.random.default_rng(seed).choice(n, size=sample_size, replace=False))
        X = X[rows]
    norms = np.linalg.norm(X, axis=1)
    usable = norms > 0
    skipped = int((~usable).sum())
    X = X[usable] / norms[usable, None]
    m = X.shape[0]
    if m < 2:
        raise DiagnosisError("insufficient embeddings")
    iu = np.triu_indices(m, k=1)
    sims = (X @ X.T)[iu]
    return ProbeResult(COLLAPSE, float(np.mean(sims)),
                       metadata={"n_rows": n, "sampled": m + skipped, "zero_norm_skipped": skipped, "seed": seed})


@dataclass(frozen=True)
class MarginRow:
    user: str
    positive: str
    negative: str
    pos_score: float
    neg_score: float

    @property
    def margin(self) -> float:
        return self.pos_score - self.neg_score


def probe_ranking_margin(score_table: Sequence[MarginRow], attributes: Mapping[str, str],
                         low_fraction: float = 0.05) -> ProbeResult:
    """Mean of s(u,v) - s(u,v') plus category counts among the lowest-margin positives."""
    if not score_table:
        raise DiagnosisError("empty score table")
    if not 0.0 < low_fraction < 1.0:
        raise ValueError("low_fraction must lie in (0, 1)")
    margins = np.array([r.margin for r in score_table], dtype=np.float64)
    n_low = max(1, int(math.ceil(low_fraction * len(score_table))))
    # stable sort: ties keep table order
    low = np.argsort(margins, kind="stable")[:n_low]
    counts: Dict[str, int] = {}
    for i in low:
        cat = attributes.get(score_table[i].positive, "UNKNOWN")
        counts[cat] = counts.get(cat, 0) + 1
    findings = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ProbeResult(
        MARGIN,
        float(np.mean(margins)),
        core_findings=findings,
        metadata={"n_pairs": len(score_table), "n_low": n_low, "low_fraction": low_fraction,
                  "low_margin_max": float(margins[low].max())},
    )


def build_margin_table(model, users: Sequence[str], histories: Mapping[str, Sequence[str]],
                       exclude: Mapping[str, Sequence[str]], items: Sequence[str], seed: int = 0) -> List[MarginRow]:
    """One uniform negative outside ``exclude[u]`` for every (u, v in histories[u])."""
    rng = np.random.default_rng(seed)
    rows = []
    for u in users:
        hist = list(histories[u])
        if not hist:
            continue
        blocked = set(exclude.get(u, hist))
        pool = [v for v in items if v not in blocked]
        if not pool:
            continue
        negs = [pool[i] for i in rng.integers(0, len(pool), size=len(hist))]
        scores = model.score(u, None, hist + negs)
        for j, (v, vn) in enumerate(zip(hist, negs)):
            rows.append(MarginRow(u, v, vn, float(scores[j]), float(scores[len(hist) + j])))
    return rows


def _top_k(scores: np.ndarray, k: int, exclude: Sequence[int] = ()) -> List[int]:
    s = np.asarray(scores, dtype=np.float64).copy()
    if len(exclude):
        s[list(exclude)] = -np.inf
    order = np.lexsort((np.arange(len(s)), -s))
    return [int(i) for i in order[:k] if np.isfinite(s[i])]


def probe_swap_sensitivity(score_fn: Callable[[Sequence], np.ndarray], sequences: Sequence,
                           k: int = 10, item_index: Optional[Mapping] = None,
                           metadata: Optional[dict] = None) -> ProbeResult:
    """Effect of swapping the last two context items.

    ``score_fn(context)`` returns logits over the whole catalog. ``sequences``
    holds contexts (lists), ``(context, target)`` tuples or
    ``(context, target, key)`` tuples; with a key the call is
    ``score_fn(context, key)`` (e.g. a user id). With ``item_index``
    contexts and targets are item ids, otherwise catalog positions. Reported values:
    ``swap_sensitivity`` (mean share of top-k that changes) and
    ``logit_delta_swap`` (mean absolute change of the target's logit; the
    pre-swap top-1 item is used when no target is given).
    """
    if not sequences:
        raise DiagnosisError("no sequences to probe")
    changed, deltas, skipped = [], [], 0
    for entry in sequences:
        key = None
        if isinstance(entry, tuple):
            ctx, target = list(entry[0]), entry[1]
            if len(entry) > 2:
                key = entry[2]
        else:
            ctx, target = list(entry), None
        if len(ctx) < 2:
            skipped += 1
            continue
        swapped = ctx[:-2] + [ctx[-1], ctx[-2]]
        extra = () if key is None else (key,)
        before = np.asarray(score_fn(ctx, *extra), dtype=np.float64)
        after = np.asarray(score_fn(swapped, *extra), dtype=np.float64)
        excl = [item_index[v] for v in ctx] if item_index is not None else []
        top_before = _top_k(before, k, excl)
        top_after = _top_k(after, k, excl)
        changed.append(len(set(top_before) - set(top_after)) / max(1, len(top_before)))
        if target is None:
            t = top_before[0]
        else:
            t = item_index[target] if item_index is not None else int(target)
        deltas.append(abs(float(before[t]) - float(after[t])))
    meta = dict(metadata or {})
    meta.update({"n_sequences": len(changed), "skipped_short": skipped, "k": k})
    if not changed:
        raise DiagnosisError("every sequence was shorter than 2")
    return ProbeResult(SWAP, {"swap_sensitivity": float(np.mean(changed)),
                              "logit_delta_swap": float(np.mean(deltas))}, metadata=meta)


# --------------------------------------------------------------------------
# D_raw


def assemble_d_raw(probes: Sequence[ProbeResult]) -> Dict[str, dict]:
    if not probes:
        raise DiagnosisError("no probes")
    doc: Dict[str, dict] = {}
    for p in probes:
        if p.probe_id in doc:
            raise DiagnosisError(f"duplicate probe id {p.probe_id!r}")
        doc[p.probe_id] = p.to_dict()
    return doc


def dumps_d_raw(d_raw: Mapping[str, dict]) -> str:
    return json.dumps(d_raw, sort_keys=True)


def loads_d_raw(text: str) -> Dict[str, dict]:
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise DiagnosisError("d_raw must be a JSON object")
    return doc


# --------------------------------------------------------------------------
# interpretation


@dataclass
class Threshold:
    warn: Optional[float] = None
    critical: Optional[float] = None
    direction: str = "above"  # "above": large values are bad; "below": small values are bad
    value_key: Optional[str] = None
    claim: str = "{probe} = {value:.4f}"
    applies_when: Dict[str, object] = field(default_factory=dict)

    def severity(self, value: float) -> str:
        def hit(limit):
            if limit is None:
                return False
            return value >= limit if self.direction == "above" else value < limit

        if hit(self.critical):
            return "critical"
        if hit(self.warn):
            return "warn"
        return "info"


DEFAULT_THRESHOLDS: Dict[str, Threshold] = {
    COLLAPSE: Threshold(0.8, 0.9, "above", claim="High embedding collapse: mean pairwise cosine {value:.3f}"),
    MARGIN: Threshold(0.0, None, "below", claim="Weak discrimination: mean ranking margin {value:.3f}{core}"),
    SWAP: Threshold(0.01, None, "below", value_key="swap_sensitivity",
                    claim="Order-insensitive: swapping the last two items changes {value:.1%} of the top-k",
                    applies_when={"model_kind": "sequential"}),
}


@dataclass
class Finding:
    severity: str
    claim: str
    probes: List[str]


@dataclass
class DiagnosisReport:
    findings: List[Finding]
    verification: Dict[str, str]
    narrative: str
    flagged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DiagnosisReport":
        return cls([Finding(**f) for f in data["findings"]], dict(data["verification"]), data["narrative"],
                   data.get("flagged", False))

    def top_findings(self, n: int = 3) -> List[Finding]:
        ranked = sorted(self.findings, key=lambda f: -SEVERITY_RANK[f.severity])
        return [f for f in ranked if f.severity != "info"][:n]

    def to_text(self) -> str:
        lines = [f"[{f.severity.upper()}] {f.claim} (probes: {', '.join(f.probes)})" for f in self.findings]
        if self.verification:
            lines.append("Simulator claims: " + ", ".join(f"{t}={v}" for t, v in sorted(self.verification.items())))
        if self.narrative:
            lines.append("")
            lines.append(self.narrative.strip())
        return "\n".join(lines)


def _probe_value(entry: dict, rule: Threshold) -> Optional[float]:
    value = entry.get("value")
    if isinstance(value, dict):
        key = rule.value_key or next(iter(value), None)
        value = value.get(key) if key else None
    return None if value is None else float(value)


def _rule_for(probe_id: str, entry: dict, thresholds: Mapping[str, Threshold]) -> Optional[Threshold]:
    rule = thresholds.get(probe_id)
    if rule is None:
        # co-evolved probes may ship their own threshold
        spec = (entry.get("metadata") or {}).get("threshold")
        if isinstance(spec, dict):
            rule = Threshold(**{k: v for k, v in spec.items() if k in Threshold.__dataclass_fields__})
    if rule is None:
        return None
    meta = entry.get("metadata") or {}
    if any(meta.get(k) != v for k, v in rule.applies_when.items()):
        return None
    return rule


def assign_findings(d_raw: Mapping[str, dict], thresholds: Mapping[str, Threshold]) -> Tuple[List[Finding], Dict[str, str]]:
    """Deterministic part of interpretation: severities per probe. Returns findings and probe severities."""
    findings, severities = [], {}
    for probe_id in sorted(d_raw):
        entry = d_raw[probe_id]
        rule = _rule_for(probe_id, entry, thresholds)
        if rule is None:
            continue
        value = _probe_value(entry, rule)
        if value is None:
            continue
        sev = rule.severity(value)
        severities[probe_id] = sev
        core = entry.get("core_findings") or []
        core_txt = f"; lowest margins concentrate in {core[0][0]} ({core[0][1]} cases)" if core else ""
        claim = rule.claim.format(probe=probe_id, value=value, core=core_txt)
        if sev == "info":
            claim = f"{probe_id} within expected range ({value:.4f})"
        findings.append(Finding(sev, claim, [probe_id]))
    return findings, severities


def verify_sim_claims(sim_tags: Sequence[str], severities: Mapping[str, str]) -> Dict[str, str]:
    out = {}
    for tag in sim_tags:
        probe = TAG_PROBES.get(tag)
        if probe is None or probe not in severities:
            out[tag] = "untestable"
        else:
            out[tag] = "confirmed" if severities[probe] != "info" else "refuted"
    return out


def interpret_diagnosis(d_raw: Mapping[str, dict], thresholds: Optional[Mapping[str, Threshold]] = None,
                        sim_report=None, llm=None, state_key: str = "default") -> DiagnosisReport:
    """Severity by threshold, simulator-claim verification, and an LLM narrative.

    Only the narrative depends on the LLM; if the call fails the deterministic
    parts are returned with ``flagged`` set.
    """
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else thresholds
    findings, severities = assign_findings(d_raw, thresholds)
    tags = sim_report.tags() if sim_report is not None else []
    verification = verify_sim_claims(tags, severities)
    narrative, flagged = "", False
    if llm is not None:
        try:
            narrative = llm.chat(
                "I_DIAG",
                {"d_raw": dumps_d_raw(d_raw),
                 "findings": "\n".join(f"[{f.severity.upper()}] {f.claim}" for f in findings) or "(none)",
                 "verification": ", ".join(f"{t}={v}" for t, v in sorted(verification.items())) or "(none)"},
                state_key=state_key,
            ).strip()
        except Exception as exc:
            logger.warning("diagnosis narrative unavailable: %s", exc)
            flagged = True
    return DiagnosisReport(findings, verification, narrative, flagged)
