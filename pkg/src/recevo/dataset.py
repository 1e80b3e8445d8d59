"""Interaction-log ingestion, five-core filtering and leave-last-out splitting.

Files are line-oriented, tab-separated, UTF-8:

* interactions: ``user  item  timestamp  rating  review`` (review may be empty)
* attributes:   ``item  category  title  price  [key=value ...]``
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN_CATEGORY = "UNKNOWN"
N_NEGATIVES = 99
INTERACTION_FORMATS = ("tsv",)


class DatasetError(ValueError):
    """Base class for dataset problems."""


class RecordParseError(DatasetError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateRecordError(DatasetError):
    def __init__(self, count: int):
        super().__init__(f"{count} duplicate (user, item, timestamp) record(s)")
        self.count = count


class SplitError(DatasetError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    rating: float
    review: str = ""

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        if not 1.0 <= self.rating <= 5.0:
            raise ValueError("rating out of range")


@dataclass(frozen=True)
class ItemAttributes:
    item_id: str
    category: str = UNKNOWN_CATEGORY
    title: str = ""
    price: Optional[float] = None
    extra: Dict[str, str] = field(default_factory=dict, hash=False, compare=True)

    def top_category(self) -> str:
        # hierarchical categories are written "A > B > C" or "A|B"
        for sep in (">", "|"):
            if sep in self.category:
                return self.category.split(sep)[0].strip() or UNKNOWN_CATEGORY
        return self.category


class Dataset:
    """Users, items, interactions and item attributes.

    ``histories[u]`` holds the user's records sorted by timestamp, with ties
    kept in input order.
    """

    def __init__(
        self,
        interactions: Iterable[InteractionRecord],
        attributes: Optional[Dict[str, ItemAttributes]] = None,
    ):
        self.interactions: List[InteractionRecord] = list(interactions)
        self.users: List[str] = []
        self.items: List[str] = []
        seen_u, seen_i = set(), set()
        by_user: Dict[str, List[InteractionRecord]] = defaultdict(list)
        for rec in self.interactions:
            if rec.user_id not in seen_u:
                seen_u.add(rec.user_id)
                self.users.append(rec.user_id)
            if rec.item_id not in seen_i:
                seen_i.add(rec.item_id)
                self.items.append(rec.item_id)
            by_user[rec.user_id].append(rec)
        # sorted() is stable, so equal timestamps keep input order
        self.histories: Dict[str, List[InteractionRecord]] = {
            u: sorted(by_user[u], key=lambda r: r.timestamp) for u in self.users
        }
        attributes = dict(attributes or {})
        self.attributes: Dict[str, ItemAttributes] = {}
        for item in self.items:
            attr = attributes.get(item)
            if attr is None:
                attr = ItemAttributes(item_id=item)
            elif not attr.category:
                attr = ItemAttributes(item, UNKNOWN_CATEGORY, attr.title, attr.price, dict(attr.extra))
            self.attributes[item] = attr
        self._item_index = {v: i for i, v in enumerate(self.items)}
        self._user_index = {u: i for i, u in enumerate(self.users)}

    def __len__(self) -> int:
        return len(self.interactions)

    def __repr__(self) -> str:
        return f"Dataset(users={len(self.users)}, items={len(self.items)}, interactions={len(self.interactions)})"

    def item_index(self, item: str) -> int:
        try:
            return self._item_index[item]
        except KeyError:
            raise KeyError(f"unknown item {item!r}") from None

    def user_index(self, user: str) -> int:
        try:
            return self._user_index[user]
        except KeyError:
            raise KeyError(f"unknown user {user!r}") from None

    def history_items(self, user: str) -> List[str]:
        return [r.item_id for r in self.histories[user]]

    def category(self, item: str) -> str:
        return self.attributes[item].top_category()

    def record_multiset(self) -> Counter:
        return Counter(self.interactions)


def _parse_interaction(line: str, line_no: int) -> InteractionRecord:
    parts = line.rstrip("\r\n").split("\t", 4)
    if len(parts) < 4:
        raise RecordParseError(line_no, f"expected at least 4 tab-separated fields, got {len(parts)}")
    user, item, ts, rating = parts[:4]
    review = parts[4] if len(parts) == 5 else ""
    if not user or not item:
        raise RecordParseError(line_no, "empty user or item id")
    try:
        ts_val = int(ts)
    except ValueError:
        raise RecordParseError(line_no, f"bad timestamp {ts!r}") from None
    try:
        rating_val = float(rating)
    except ValueError:
        raise RecordParseError(line_no, f"bad rating {rating!r}") from None
    if ts_val < 0:
        raise RecordParseError(line_no, "negative timestamp")
    if not 1.0 <= rating_val <= 5.0:
        raise RecordParseError(line_no, "rating out of range")
    return InteractionRecord(user, item, ts_val, rating_val, review)


def load_attributes(path) -> Dict[str, ItemAttributes]:
    out: Dict[str, ItemAttributes] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            item = parts[0]
            category = parts[1].strip() if len(parts) > 1 else ""
            title = parts[2] if len(parts) > 2 else ""
            price = None
            if len(parts) > 3 and parts[3].strip():
                try:
                    price = float(parts[3])
                except ValueError:
                    raise RecordParseError(line_no, f"bad price {parts[3]!r}") from None
                if price < 0:
                    raise RecordParseError(line_no, "negative price")
            extra = {}
            for kv in parts[4:]:
                key, _, value = kv.partition("=")
                extra[key] = value
            out[item] = ItemAttributes(item, category or UNKNOWN_CATEGORY, title, price, extra)
    return out


def load_interactions(path, format: str = "tsv", attributes_path=None) -> Dataset:
    """Read an interaction file (and optional attribute sidecar) into a Dataset."""
    if format not in INTERACTION_FORMATS:
        raise DatasetError(f"unknown record format {format!r}")
    records: List[InteractionRecord] = []
    keys = Counter()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = _parse_interaction(line, line_no)
            keys[(rec.user_id, rec.item_id, rec.timestamp)] += 1
            records.append(rec)
    dupes = sum(c - 1 for c in keys.values() if c > 1)
    if dupes:
        raise DuplicateRecordError(dupes)
    attributes = load_attributes(attributes_path) if attributes_path else None
    return Dataset(records, attributes)


def write_interactions(d: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in d.interactions:
            review = r.review.replace("\n", " ").replace("\t", " ")
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.timestamp}\t{r.rating:g}\t{review}\n")


def write_attributes(attributes: Dict[str, ItemAttributes], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, a in attributes.items():
            price = "" if a.price is None else f"{a.price:g}"
            extra = "".join(f"\t{k}={v}" for k, v in a.extra.items())
            fh.write(f"{item}\t{a.category}\t{a.title}\t{price}{extra}\n")


def apply_five_core(d: Dataset, k: int = 5) -> Dataset:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    records = list(d.interactions)
    passes = 0
    while True:
        passes += 1
        ucount = Counter(r.user_id for r in records)
        icount = Counter(r.item_id for r in records)
        kept = [r for r in records if ucount[r.user_id] >= k and icount[r.item_id] >= k]
        if len(kept) == len(records):
            break
        records = kept
    out = Dataset(records, d.attributes)
    out.five_core_passes = passes
    return out


def global_average_rating(d: Dataset, item: str) -> float:
    ratings = [r.rating for r in d.interactions if r.item_id == item]
    if not ratings:
        raise KeyError(f"unknown item {item!r}")
    return sum(ratings) / len(ratings)


def item_average_ratings(d: Dataset) -> Dict[str, float]:
    sums: Dict[str, float] = defaultdict(float)
    counts: Counter = Counter()
    for r in d.interactions:
        sums[r.item_id] += r.rating
        counts[r.item_id] += 1
    return {v: sums[v] / counts[v] for v in counts}


@dataclass
class SplitDataset:
    dataset: Dataset
    seed: int
    train: Dict[str, List[str]]
    validation: Dict[str, str]
    test: Dict[str, str]
    val_negatives: Dict[str, List[str]]
    test_negatives: Dict[str, List[str]]
    shortfall: Dict[str, int] = field(default_factory=dict)

    @property
    def users(self) -> List[str]:
        return self.dataset.users

    @property
    def items(self) -> List[str]:
        return self.dataset.items

    def train_records(self) -> List[InteractionRecord]:
        out = []
        for u in self.users:
            out.extend(self.dataset.histories[u][: len(self.train[u])])
        return out

    def eval_context(self, user: str, phase: str) -> List[str]:
        """Items visible to the model when predicting the held-out item of ``phase``."""
        if phase == "validation":
            return list(self.train[user])
        if phase == "test":
            return list(self.train[user]) + [self.validation[user]]
        raise ValueError(f"unknown phase {phase!r}")

    def eval_target(self, user: str, phase: str) -> str:
        return self.validation[user] if phase == "validation" else self.test[user]

    def eval_negatives(self, user: str, phase: str) -> List[str]:
        return self.val_negatives[user] if phase == "validation" else self.test_negatives[user]


def _sample_negatives(pool: List[str], n: int, rng: np.random.Generator) -> List[str]:
    if len(pool) <= n:
        return list(pool)
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def leave_last_out_split(d: Dataset, seed: int, n_negatives: int = N_NEGATIVES) -> SplitDataset:
    """Hold out each user's last item for test and second-to-last for validation."""
    train, val, test = {}, {}, {}
    val_neg, test_neg, shortfall = {}, {}, {}
    for ui, u in enumerate(d.users):
        hist = d.history_items(u)
        if len(hist) < 3:
            raise SplitError(f"user {u!r} has {len(hist)} interactions; need at least 3")
        train[u], val[u], test[u] = hist[:-2], hist[-2], hist[-1]
        seen = set(hist)
        pool = [v for v in d.items if v not in seen]
        # per-user streams keep negatives independent of user iteration order
        val_neg[u] = _sample_negatives(pool, n_negatives, np.random.default_rng([seed, ui, 0]))
        test_neg[u] = _sample_negatives(pool, n_negatives, np.random.default_rng([seed, ui, 1]))
        if len(pool) < n_negatives:
            shortfall[u] = n_negatives - len(pool)
    if shortfall:
        logger.info("negative pool shortfall for %d user(s)", len(shortfall))
    return SplitDataset(d, seed, train, val, test, val_neg, test_neg, shortfall)


def save_prepared(split: SplitDataset, out_dir, sources: Optional[dict] = None) -> Path:
    """Persist a five-core dataset plus its split under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(split.dataset, out / "interactions.tsv")
    write_attributes(split.dataset.attributes, out / "attributes.tsv")
    with open(out / "negatives.tsv", "w", encoding="utf-8") as fh:
        for u in split.users:
            fh.write(f"{u}\tvalidation\t{','.join(split.val_negatives[u])}\n")
            fh.write(f"{u}\ttest\t{','.join(split.test_negatives[u])}\n")
    manifest = {
        "sources": sources or {},
        "seed": split.seed,
        "five_core_passes": getattr(split.dataset, "five_core_passes", None),
        "n_users": len(split.users),
        "n_items": len(split.items),
        "n_interactions": len(split.dataset),
        "negative_shortfall_users": len(split.shortfall),
    }
    (out / "dataset_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_prepared(data_dir) -> SplitDataset:
    data_dir = Path(data_dir)
    d = load_interactions(data_dir / "interactions.tsv", attributes_path=data_dir / "attributes.tsv")
    manifest = json.loads((data_dir / "dataset_manifest.json").read_text())
    split = leave_last_out_split(d, manifest["seed"], n_negatives=0)
    with open(data_dir / "negatives.tsv", encoding="utf-8") as fh:
        for line in fh:
            user, phase, items = line.rstrip("\n").split("\t")
            negs = items.split(",") if items else []
            if phase == "validation":
                split.val_negatives[user] = negs
            else:
                split.test_negatives[user] = negs
    split.shortfall = {u: N_NEGATIVES - len(n) for u, n in split.test_negatives.items() if len(n) < N_NEGATIVES}
    return split
