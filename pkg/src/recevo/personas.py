"""Persona traits (activity, conformity, diversity), tertile bucketing and rendering."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

from .dataset import Dataset, item_average_ratings

logger = logging.getLogger(__name__)

LOW, MID, HIGH = "LOW", "MID", "HIGH"
LEVEL_ORDER = {LOW: 0, MID: 1, HIGH: 2}
TRAITS = ("activity", "conformity", "diversity")

LEVEL_TEXT: Dict[str, Dict[str, str]] = {
    "activity": {
        HIGH: "Frequently interacts with the system and maintains a high volume of engagement with recommendations.",
        MID: "Interacts moderately, primarily when items strictly align with personal preferences.",
        LOW: "Rarely interacts with the system and does not interact if recommendations are not relevant to their interests.",
    },
    "conformity": {
        HIGH: "Heavily influenced by popularity and public ratings; tends to follow mainstream trends.",
        MID: "Considers both popularity and personal taste, balancing trends with individual preferences.",
        LOW: "Ignores popularity and trends, evaluating items purely based on intrinsic personal preference.",
    },
    "diversity": {
        HIGH: "Seeks high variety and novelty, enjoying the exploration of diverse categories and new styles.",
        MID: "Mostly consumes preferred categories but occasionally explores similar alternatives.",
        LOW: "Sticks strictly to a narrow set of familiar categories and avoids exploration.",
    },
}


@dataclass(frozen=True)
class TraitVector:
    activity: int
    conformity: float
    diversity: int

    def __post_init__(self):
        if self.activity < 0 or self.conformity < 0:
            raise ValueError("activity and conformity must be non-negative")
        if self.diversity > self.activity:
            raise ValueError("diversity cannot exceed activity")


@dataclass(frozen=True)
class Persona:
    user_id: str
    levels: Mapping[str, str]
    trait_values: TraitVector
    description: str

    def to_record(self) -> dict:
        return {
            "user": self.user_id,
            "activity": self.trait_values.activity,
            "conformity": self.trait_values.conformity,
            "diversity": self.trait_values.diversity,
            "levels": dict(self.levels),
            "description": self.description,
        }


def compute_activity(history: Sequence) -> int:
    return len(history)


def compute_conformity(ratings: Sequence[Tuple[float, float]]) -> float:
    """Mean squared gap between the user's rating and the item's global mean rating."""
    if not ratings:
        raise ValueError("conformity needs at least one rating")
    return sum((r - avg) ** 2 for r, avg in ratings) / len(ratings)


def compute_diversity(history_categories: Sequence[str]) -> int:
    if not history_categories:
        raise ValueError("diversity needs a non-empty history")
    return len(set(history_categories))


def compute_traits(d: Dataset) -> Dict[str, TraitVector]:
    averages = item_average_ratings(d)
    out = {}
    for u in d.users:
        hist = d.histories[u]
        out[u] = TraitVector(
            activity=compute_activity(hist),
            conformity=compute_conformity([(r.rating, averages[r.item_id]) for r in hist]),
            diversity=compute_diversity([d.category(r.item_id) for r in hist]),
        )
    return out


def tertile_thresholds(values: Sequence[float]) -> Tuple[float, float]:
    """Sorted values at 0-based positions floor(n/3) and floor(2n/3)."""
    s = sorted(values)
    n = len(s)
    return s[n // 3], s[(2 * n) // 3]


def _level(value: float, lo: float, hi: float) -> str:
    if value < lo:
        return LOW
    if value < hi:
        return MID
    return HIGH


def bucket_traits(all_users: Mapping[str, TraitVector]) -> Dict[str, Dict[str, str]]:
    """Per trait: below the 1/3 threshold is LOW, below the 2/3 threshold MID, else HIGH.

    Values equal to a threshold go to the higher bucket.
    """
    if len(all_users) < 3:
        logger.warning("bucketing %d user(s): fewer than 3, all levels set to MID", len(all_users))
        return {u: {t: MID for t in TRAITS} for u in all_users}
    out: Dict[str, Dict[str, str]] = {u: {} for u in all_users}
    for trait in TRAITS:
        lo, hi = tertile_thresholds([getattr(tv, trait) for tv in all_users.values()])
        for u, tv in all_users.items():
            out[u][trait] = _level(getattr(tv, trait), lo, hi)
    return out


def render_persona(user_id: str, levels: Mapping[str, str], trait_values: TraitVector) -> Persona:
    missing = [t for t in TRAITS if t not in levels]
    if missing:
        raise ValueError(f"missing levels for {missing}")
    lines = [
        f"Activity ({levels['activity']}): {LEVEL_TEXT['activity'][levels['activity']]}",
        f"Conformity ({levels['conformity']}): {LEVEL_TEXT['conformity'][levels['conformity']]}",
        f"Diversity ({levels['diversity']}): {LEVEL_TEXT['diversity'][levels['diversity']]}",
    ]
    return Persona(user_id, dict(levels), trait_values, "\n".join(lines))


def build_personas(d: Dataset) -> Dict[str, Persona]:
    traits = compute_traits(d)
    levels = bucket_traits(traits)
    return {u: render_persona(u, levels[u], traits[u]) for u in d.users}


def write_personas(personas: Mapping[str, Persona], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in personas.values():
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")


def read_personas(path) -> Dict[str, Persona]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            tv = TraitVector(rec["activity"], rec["conformity"], rec["diversity"])
            out[rec["user"]] = Persona(rec["user"], rec["levels"], tv, rec["description"])
    return out


def level_rank(level: str) -> int:
    return LEVEL_ORDER[level]
