"""Sampled ranking metrics (NDCG@k, HR@k) and LLM-as-a-judge code scoring."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

logger = logging.getLogger(__name__)

DEFAULT_K = 5
JUDGE_DIMENSIONS = ("creativity", "explicitness", "insight", "personalization")


@dataclass(frozen=True)
class RankingOutcome:
    target_rank: int
    candidate_count: int

    def __post_init__(self):
        if not 1 <= self.target_rank <= self.candidate_count:
            raise ValueError(f"rank {self.target_rank} outside [1, {self.candidate_count}]")


@dataclass
class MetricReport:
    ndcg_at_5: float
    hr_at_5: float
    per_user: List[Tuple[float, float]]
    phase: str = "validation"
    users: List[str] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return len(self.per_user)

    def to_manifest(self) -> dict:
        return {
            "ndcg_at_5": self.ndcg_at_5,
            "hr_at_5": self.hr_at_5,
            "phase": self.phase,
            "n_users": self.n_users,
        }


def rank_target(scores: Mapping[str, float], target: str) -> RankingOutcome:
    """1-based rank of ``target``; equal scores are counted ahead of it."""
    if target not in scores:
        raise KeyError(f"target {target!r} not among candidates")
    t = scores[target]
    ahead = sum(1 for k, s in scores.items() if k != target and s >= t)
    return RankingOutcome(ahead + 1, len(scores))


def rank_target_array(target_score: float, negative_scores: Sequence[float]) -> RankingOutcome:
    """Same rule as :func:`rank_target` for a target plus a list of negative logits.

    Negatives may repeat (tiny catalogs), so this works on positions, not ids.
    """
    ahead = sum(1 for s in negative_scores if s >= target_score)
    return RankingOutcome(ahead + 1, len(negative_scores) + 1)


def ndcg_at_k(outcome: RankingOutcome, k: int = DEFAULT_K) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if outcome.target_rank > k:
        return 0.0
    return 1.0 / math.log2(outcome.target_rank + 1)


def hr_at_k(outcome: RankingOutcome, k: int = DEFAULT_K) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if outcome.target_rank <= k else 0.0


def aggregate_scores(per_user: Sequence[Tuple[float, float]], phase: str = "validation",
                     users: Sequence[str] = ()) -> MetricReport:
    if not per_user:
        raise ValueError("no evaluable users")
    pairs = [(float(n), float(h)) for n, h in per_user]
    ndcg = math.fsum(p[0] for p in pairs) / len(pairs)
    hr = math.fsum(p[1] for p in pairs) / len(pairs)
    return MetricReport(ndcg, hr, pairs, phase, list(users))


# --------------------------------------------------------------------------
# LLM-as-a-judge


class JudgeError(RuntimeError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass
class JudgeScores:
    creativity: float
    explicitness: float
    insight: float
    personalization: float
    rationale: Dict[str, str] = field(default_factory=dict)
    clamped: List[str] = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return bool(self.clamped)

    def as_dict(self) -> Dict[str, float]:
        return {d: getattr(self, d) for d in JUDGE_DIMENSIONS}


_SCORE_LINE = re.compile(
    r"(creativity|explicitness|insight|personalization)\s*[:=\-]\s*\**\s*(-?\d+(?:\.\d+)?)",
    re.IGNORECASE,
)


def parse_judge_reply(text: str) -> Tuple[Dict[str, float], Dict[str, str]]:
    """Pull the four dimension scores from a judge reply (JSON or ``Name: score`` lines)."""
    from .llm_gateway import extract_json

    scores: Dict[str, float] = {}
    rationale: Dict[str, str] = {}
    doc = extract_json(text)
    if isinstance(doc, dict):
        for dim in JUDGE_DIMENSIONS:
            entry = doc.get(dim) or doc.get(dim.capitalize())
            if isinstance(entry, dict):
                if isinstance(entry.get("score"), (int, float)):
                    scores[dim] = float(entry["score"])
                rationale[dim] = str(entry.get("rationale", ""))
            elif isinstance(entry, (int, float)) and not isinstance(entry, bool):
                scores[dim] = float(entry)
    if len(scores) < len(JUDGE_DIMENSIONS):
        for name, value in _SCORE_LINE.findall(text):
            scores.setdefault(name.lower(), float(value))
    missing = [d for d in JUDGE_DIMENSIONS if d not in scores]
    if missing:
        raise ValueError(f"missing judge dimensions: {', '.join(missing)}")
    return scores, rationale


def judge_codebase(evolved_source: str, seed_source: str, llm, retries: int = 2) -> JudgeScores:
    """Score the evolved recommender against the seed on four 1-10 dimensions."""
    if not evolved_source.strip() or not seed_source.strip():
        raise ValueError("both sources must be non-empty")
    bindings = {"evolved_source": evolved_source, "seed_source": seed_source}
    raw = ""
    for attempt in range(retries + 1):
        raw = llm.chat("I_JUDGE", bindings, state_key=f"attempt{attempt}")
        try:
            scores, rationale = parse_judge_reply(raw)
        except ValueError as exc:
            logger.warning("judge reply unparseable (attempt %d): %s", attempt + 1, exc)
            continue
        clamped = []
        for dim, value in scores.items():
            if not 1.0 <= value <= 10.0:
                clamped.append(dim)
                scores[dim] = min(10.0, max(1.0, value))
        if clamped:
            logger.warning("judge scores clamped: %s", clamped)
        return JudgeScores(**{d: scores[d] for d in JUDGE_DIMENSIONS}, rationale=rationale, clamped=clamped)
    raise JudgeError("judge reply unparseable after retries", raw)
