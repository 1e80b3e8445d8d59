"""LLM user simulator: per-user critiques, their summary, and paged satisfaction sessions."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import Dataset
from .llm_gateway import ParseError
from .personas import Persona

logger = logging.getLogger(__name__)

FAILURE_TAGS = ("category_mismatch", "popularity_bias", "low_diversity", "recency_ignored", "price_mismatch", "other")
DEFAULT_SAMPLE_SIZE = 20
DEFAULT_REC_LENGTH = 10
PAGE_SIZE = 4
DEFAULT_CONCURRENCY = 4


@dataclass
class Verdict:
    item: str
    accept: bool
    reason: str = ""


@dataclass
class UserCritique:
    user_id: str
    verdicts: List[Verdict]
    failure_tags: List[str]
    free_text: str
    parsed: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "UserCritique":
        return cls(data["user_id"], [Verdict(**v) for v in data["verdicts"]], list(data["failure_tags"]),
                   data["free_text"], data.get("parsed", True))


@dataclass
class SimulatorReport:
    common_failures: List[Tuple[str, float, List[str]]]
    narrative: str
    sample_size: int

    def prevalence(self, tag: str) -> float:
        for t, p, _ in self.common_failures:
            if t == tag:
                return p
        return 0.0

    def tags(self) -> List[str]:
        return [t for t, _, _ in self.common_failures]

    def to_dict(self) -> dict:
        return {
            "common_failures": [{"tag": t, "prevalence": p, "quotes": q} for t, p, q in self.common_failures],
            "narrative": self.narrative,
            "sample_size": self.sample_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimulatorReport":
        return cls([(f["tag"], f["prevalence"], list(f["quotes"])) for f in data["common_failures"]],
                   data["narrative"], data["sample_size"])

    def to_text(self) -> str:
        if not self.common_failures:
            head = f"No recurring failures across {self.sample_size} simulated users."
        else:
            head = "\n".join(
                f"- {t}: {p:.0%} of {self.sample_size} users" + (f' (e.g. "{q[0]}")' if q else "")
                for t, p, q in self.common_failures
            )
        return f"{head}\n\n{self.narrative.strip()}"


@dataclass
class SessionOutcome:
    view: float
    satisfy: float
    depth: int
    viewed: int = 0
    shown: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 <= self.view <= 1.0:
            raise ValueError("view must lie in [0, 1]")


def sample_users(d: Dataset, n: int = DEFAULT_SAMPLE_SIZE, seed: int = 0) -> List[str]:
    if n > len(d.users):
        raise ValueError(f"cannot sample {n} users from {len(d.users)}")
    idx = np.random.default_rng(seed).choice(len(d.users), size=n, replace=False)
    return [d.users[i] for i in sorted(idx)]


def describe_items(d: Dataset, items: Sequence[str]) -> str:
    lines = []
    for v in items:
        a = d.attributes.get(v)
        if a is None:
            lines.append(f"- {v}")
            continue
        price = "" if a.price is None else f", price {a.price:g}"
        title = f" {a.title}" if a.title else ""
        lines.append(f"- {v}:{title} [category {a.category}{price}]")
    return "\n".join(lines)


def _fallback_critique(user: str, recs: Sequence[str], raw: str) -> UserCritique:
    return UserCritique(user, [Verdict(v, False, "unparsed reply") for v in recs], ["other"], raw, parsed=False)


def _coerce_critique(user: str, recs: Sequence[str], doc: dict, raw: str) -> UserCritique:
    by_item: Dict[str, Verdict] = {}
    for v in doc["verdicts"]:
        if v["item"] in recs and v["item"] not in by_item:
            by_item[v["item"]] = Verdict(v["item"], bool(v["accept"]), v.get("reason", ""))
    missing = [v for v in recs if v not in by_item]
    if missing:
        raise ValueError(f"no verdict for {missing}")
    tags = [t for t in dict.fromkeys(doc["failure_tags"]) if t in FAILURE_TAGS]
    return UserCritique(user, [by_item[v] for v in recs], tags, doc.get("critique", raw))


def critique_user(persona: Persona, history_text: str, recs: Sequence[str], recs_text: str, llm) -> UserCritique:
    """One simulated user's structured verdicts on a recommendation list.

    Parse failures get one retry; a second failure yields a critique tagged
    ``other`` that keeps the raw reply. Gateway transport errors propagate.
    """
    if not recs:
        raise ValueError("recommendation list is empty")
    bindings = {"persona": persona.description, "history": history_text, "recommendations": recs_text}
    raw = ""
    for attempt in range(2):
        try:
            doc = llm.chat("I_SIM", bindings, state_key=persona.user_id, schema="critique")
            raw = json.dumps(doc)
            return _coerce_critique(persona.user_id, list(recs), doc, raw)
        except (ParseError, ValueError) as exc:
            raw = getattr(exc, "raw", raw)
            logger.warning("critique for %s unparseable (attempt %d): %s", persona.user_id, attempt + 1, exc)
    return _fallback_critique(persona.user_id, recs, raw)


def prevalence_table(critiques: Sequence[UserCritique]) -> List[Tuple[str, float, List[str]]]:
    n = len(critiques)
    counts = Counter(t for c in critiques for t in set(c.failure_tags))
    quotes: Dict[str, List[str]] = {}
    for c in critiques:
        for t in set(c.failure_tags):
            reasons = [v.reason for v in c.verdicts if not v.accept and v.reason]
            if reasons and len(quotes.setdefault(t, [])) < 3:
                quotes[t].append(reasons[0])
    rows = [(t, counts[t] / n, quotes.get(t, [])) for t in counts]
    rows.sort(key=lambda r: (-r[1], FAILURE_TAGS.index(r[0])))
    return rows


def summarize_reports(critiques: Sequence[UserCritique], llm) -> SimulatorReport:
    """Counted tag prevalence plus an LLM-written narrative over all critiques."""
    if not critiques:
        raise ValueError("no critiques to summarize")
    rows = prevalence_table(critiques)
    prevalence = "\n".join(f"{t}: {p:.2f}" for t, p, _ in rows) or "(no failure tags)"
    text = "\n\n".join(f"[{c.user_id}] tags={','.join(c.failure_tags) or 'none'}\n{c.free_text}" for c in critiques)
    narrative = llm.chat("I_SUMMARIZE", {"n_users": len(critiques), "prevalence": prevalence, "critiques": text},
                         state_key="summary")
    return SimulatorReport(rows, narrative.strip(), len(critiques))


def run_simulator(d: Dataset, personas: Dict[str, Persona], recommendations: Dict[str, List[str]],
                  history: Dict[str, List[str]], llm, concurrency: int = DEFAULT_CONCURRENCY):
    """Critique every user in ``recommendations`` (bounded concurrency), then summarize.

    Results are ordered by user so the report does not depend on scheduling.
    """
    users = sorted(recommendations)

    def one(u):
        recs = recommendations[u]
        return critique_user(personas[u], describe_items(d, history.get(u, [])), recs, describe_items(d, recs), llm)

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        critiques = list(pool.map(one, users))
    return critiques, summarize_reports(critiques, llm)


_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def parse_satisfaction(text: str) -> float:
    m = _NUMBER.search(text or "")
    if not m:
        raise ValueError(f"no satisfaction score in reply {text!r}")
    return min(10.0, max(1.0, float(m.group())))


def simulate_session(persona: Persona, pager: Callable[[int], Sequence[str]], llm, max_pages: int,
                     describe: Optional[Callable[[Sequence[str]], str]] = None) -> SessionOutcome:
    """Browse pages of recommendations until the persona leaves, pages run out, or ``max_pages``."""
    if max_pages < 1:
        raise ValueError("max_pages must be >= 1")
    describe = describe or (lambda items: "\n".join(f"- {v}" for v in items))
    shown = viewed = depth = 0
    log_lines = []
    for page in range(max_pages):
        items = list(pager(page) or [])[:PAGE_SIZE]
        if not items:
            break
        depth += 1
        shown += len(items)
        doc = llm.chat(
            "I_SESSION_PAGE",
            {"persona": persona.description, "page": page + 1, "items": describe(items), "pages_seen": page},
            state_key=f"{persona.user_id}:page{page}",
            schema="session_page",
        )
        picked = [v for v in dict.fromkeys(doc["viewed"]) if v in items]
        viewed += len(picked)
        log_lines.append(f"page {page + 1}: viewed {len(picked)} of {len(items)}")
        if not doc["continue"]:
            break
    if depth == 0:
        raise ValueError("pager returned no items for the first page")
    reply = llm.chat(
        "I_SESSION_SATISFY",
        {"persona": persona.description, "n_pages": depth, "n_viewed": viewed, "n_shown": shown,
         "session_log": "\n".join(log_lines)},
        state_key=f"{persona.user_id}:satisfy",
    )
    return SessionOutcome(view=viewed / shown, satisfy=parse_satisfaction(reply), depth=depth,
                          viewed=viewed, shown=shown)


def list_pager(items: Sequence[str]) -> Callable[[int], List[str]]:
    items = list(items)
    return lambda page: items[page * PAGE_SIZE:(page + 1) * PAGE_SIZE]


@dataclass
class ReliabilityResult:
    accuracy: float
    picks: Dict[str, str] = field(default_factory=dict)


def simulator_pick_accuracy(candidates: Dict[str, Sequence[str]], held_out: Dict[str, str],
                            pick: Callable[[str, Sequence[str]], str]) -> ReliabilityResult:
    """Fraction of users for whom ``pick`` chooses the held-out item among the candidates."""
    if not candidates:
        raise ValueError("no users")
    picks = {u: pick(u, cands) for u, cands in candidates.items()}
    hits = sum(1 for u, p in picks.items() if p == held_out[u])
    return ReliabilityResult(hits / len(candidates), picks)
