"""Synthetic datasets with planted structure, for tests, demos and acceptance runs."""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .dataset import Dataset, InteractionRecord, ItemAttributes


def block_dataset(n_users: int = 40, n_items: int = 40, n_blocks: int = 2, per_user: int = 16,
                  seed: int = 0) -> Dataset:
    """Users of block b interact only with items of block b (``per_user`` random ones each)."""
    rng = np.random.default_rng(seed)
    items = [f"i{j:03d}" for j in range(n_items)]
    item_block = {v: j * n_blocks // n_items for j, v in enumerate(items)}
    records: List[InteractionRecord] = []
    for u in range(n_users):
        block = u * n_blocks // n_users
        pool = [v for v in items if item_block[v] == block]
        chosen = rng.choice(len(pool), size=min(per_user, len(pool)), replace=False)
        for t, j in enumerate(chosen):
            rating = float(rng.integers(3, 6))
            records.append(InteractionRecord(f"u{u:03d}", pool[j], 1000 * u + t, rating))
    attrs = {v: ItemAttributes(v, f"block{item_block[v]}", f"Item {v}", 10.0) for v in items}
    return Dataset(records, attrs)


def markov_sequence_dataset(n_users: int = 300, n_items: int = 150, length: int = 20,
                            follow_prob: float = 0.8, n_categories: int = 5, seed: int = 0) -> Dataset:
    """Sequences driven by a hidden successor permutation.

    Each step follows ``successor[last]`` with probability ``follow_prob`` and
    otherwise jumps to a uniform random item. The next item therefore depends on
    which context item came *last*, which an order-blind model cannot see.
    Repeated items within a user are skipped so every interaction is unique.
    """
    rng = np.random.default_rng(seed)
    items = [f"v{j:03d}" for j in range(n_items)]
    successor = rng.permutation(n_items)
    records: List[InteractionRecord] = []
    for u in range(n_users):
        seen: set = set()
        cur = int(rng.integers(n_items))
        seq = [cur]
        seen.add(cur)
        guard = 0
        while len(seq) < length and guard < 50 * length:
            guard += 1
            nxt = int(successor[cur]) if rng.random() < follow_prob else int(rng.integers(n_items))
            if nxt in seen:
                nxt = int(rng.integers(n_items))
                if nxt in seen:
                    continue
            seq.append(nxt)
            seen.add(nxt)
            cur = nxt
        for t, j in enumerate(seq):
            records.append(InteractionRecord(f"u{u:03d}", items[j], 100 * u + t, float(rng.integers(1, 6))))
    cats = [f"cat{c}" for c in range(n_categories)]
    attrs: Dict[str, ItemAttributes] = {
        v: ItemAttributes(v, cats[j % n_categories], f"Item {v}", float(5 + j % 7)) for j, v in enumerate(items)
    }
    return Dataset(records, attrs)
