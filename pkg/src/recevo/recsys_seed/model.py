"""Shared model types, scoring, top-k and artifact bundle I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..metrics import DEFAULT_K, aggregate_scores, hr_at_k, ndcg_at_k, rank_target_array

EMBEDDINGS_FILE = "item_embeddings.txt"
USER_EMBEDDINGS_FILE = "user_embeddings.txt"
SCORE_TABLE_FILE = "score_table.tsv"
TRAINING_LOG_FILE = "training_log.tsv"
PARAMS_FILE = "model.npz"
MODEL_META_FILE = "model.json"


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class ModelConfig:
    embedding_dim: int = 50
    batch_size: int = 128
    learning_rate: float = 0.001
    max_epochs: int = 300
    max_sequence_length: int = 50
    rng_seed: int = 0
    patience: int = 20
    eval_every: int = 1
    l2_reg: float = 0.0
    # sequential model only
    use_positional: bool = True
    num_heads: int = 1
    dropout: float = 0.0
    n_sampled_negatives: int = 100

    def __post_init__(self):
        for name in ("embedding_dim", "batch_size", "max_sequence_length", "eval_every", "num_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("max_epochs and patience must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class TopK(NamedTuple):
    items: List[str]
    truncated: bool


@dataclass
class TrainedModel:
    """Parameters plus enough bookkeeping to score any (user, context, item)."""

    kind: str
    users: List[str]
    items: List[str]
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    config: ModelConfig
    train_items: Dict[str, List[str]]
    log: List[Tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        self._item_index = {v: i for i, v in enumerate(self.items)}
        self._user_index = {u: i for i, u in enumerate(self.users)}

    def item_ids_to_index(self, items: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._item_index[v] for v in items], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown item {exc.args[0]!r}") from None

    def user_to_index(self, user: str) -> int:
        try:
            return self._user_index[user]
        except KeyError:
            raise KeyError(f"unknown user {user!r}") from None

    def user_vector(self, user: str, context: Optional[Sequence[str]]) -> np.ndarray:
        raise NotImplementedError

    def score(self, user: str, context: Optional[Sequence[str]], candidates: Sequence[str]) -> np.ndarray:
        idx = self.item_ids_to_index(candidates)
        return self.item_embeddings[idx] @ self.user_vector(user, context)

    def score_all(self, user: str, context: Optional[Sequence[str]] = None) -> np.ndarray:
        return self.item_embeddings @ self.user_vector(user, context)

    def default_context(self, user: str) -> List[str]:
        return list(self.train_items.get(user, []))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"user_embeddings": self.user_embeddings, "item_embeddings": self.item_embeddings}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters().values())


def score_candidates(m: TrainedModel, user: str, context: Optional[Sequence[str]],
                     candidates: Sequence[str]) -> Dict[str, float]:
    """Logit per candidate. Duplicated candidates collapse to one key with the shared logit."""
    if not candidates:
        raise ValueError("candidates must be non-empty")
    logits = m.score(user, context, candidates)
    return {v: float(s) for v, s in zip(candidates, logits)}


def recommend_top_k(m: TrainedModel, user: str, k: int, context: Optional[Sequence[str]] = None) -> TopK:
    """Top-k unseen items; equal logits are ordered by item id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ctx = m.default_context(user) if context is None else list(context)
    seen = set(m.train_items.get(user, [])) | set(ctx)
    scores = m.score_all(user, ctx)
    pool = [(-float(scores[i]), v) for i, v in enumerate(m.items) if v not in seen]
    pool.sort()
    chosen = [v for _, v in pool[:k]]
    return TopK(chosen, truncated=len(chosen) < k)


def evaluate_split(m: TrainedModel, split, phase: str = "validation", k: int = DEFAULT_K):
    """Rank each user's held-out item against its fixed negatives.

    Returns ``(MetricReport, rows)`` where each row is
    ``(user, target, negatives, logits)`` with the target logit first.
    """
    per_user, rows, users = [], [], []
    for u in split.users:
        target = split.eval_target(u, phase)
        negs = split.eval_negatives(u, phase)
        logits = m.score(u, split.eval_context(u, phase), [target] + list(negs))
        outcome = rank_target_array(float(logits[0]), [float(x) for x in logits[1:]])
        per_user.append((ndcg_at_k(outcome, k), hr_at_k(outcome, k)))
        rows.append((u, target, list(negs), [float(x) for x in logits]))
        users.append(u)
    return aggregate_scores(per_user, phase, users), rows


# --------------------------------------------------------------------------
# artifact bundle


def write_matrix(matrix: np.ndarray, path) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    rows, cols = matrix.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{rows} {cols}\n")
        for row in matrix:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_matrix(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        rows, cols = int(header[0]), int(header[1])
        data = [[float(x) for x in line.split()] for line in fh if line.strip()]
    out = np.array(data, dtype=np.float64).reshape(rows, cols)
    return out


def write_score_table(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, target, negs, logits in rows:
            fields = [user, target, *negs, *(repr(float(x)) for x in logits)]
            fh.write("\t".join(fields) + "\n")


def read_score_table(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            user, target, rest = parts[0], parts[1], parts[2:]
            n_neg = (len(rest) - 1) // 2
            negs = rest[:n_neg]
            logits = [float(x) for x in rest[n_neg:]]
            rows.append((user, target, negs, logits))
    return rows


def write_training_log(log, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for epoch, loss, val_hr in log:
            fh.write(f"{epoch}\t{loss!r}\t{val_hr!r}\n")


def read_training_log(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                e, loss, hr = line.split("\t")
                out.append((int(e), float(loss), float(hr)))
    return out


def export_artifacts(m: TrainedModel, out_dir, split=None, phase: str = "validation") -> Dict[str, str]:
    """Write embeddings, training log, reloadable parameters and (given a split) the score table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "item_embeddings": out / EMBEDDINGS_FILE,
        "user_embeddings": out / USER_EMBEDDINGS_FILE,
        "training_log": out / TRAINING_LOG_FILE,
        "params": out / PARAMS_FILE,
        "model_meta": out / MODEL_META_FILE,
    }
    write_matrix(m.item_embeddings, paths["item_embeddings"])
    write_matrix(m.user_embeddings, paths["user_embeddings"])
    write_training_log(m.log, paths["training_log"])
    np.savez(paths["params"], **m.parameters())
    meta = {
        "kind": m.kind,
        "users": m.users,
        "items": m.items,
        "config": m.config.to_dict(),
        "train_items": m.train_items,
    }
    paths["model_meta"].write_text(json.dumps(meta))
    if split is not None:
        _, rows = evaluate_split(m, split, phase)
        paths["score_table"] = out / SCORE_TABLE_FILE
        write_score_table(rows, paths["score_table"])
    return {k: str(v) for k, v in paths.items()}


def load_model(model_dir) -> TrainedModel:
    """Rebuild a TrainedModel from an exported bundle."""
    from .mf import MFModel
    from .sequential import SequentialModel

    model_dir = Path(model_dir)
    meta = json.loads((model_dir / MODEL_META_FILE).read_text())
    with np.load(model_dir / PARAMS_FILE) as npz:
        params = {k: npz[k] for k in npz.files}
    cfg = ModelConfig.from_dict(meta["config"])
    log = read_training_log(model_dir / TRAINING_LOG_FILE)
    common = dict(users=meta["users"], items=meta["items"], config=cfg, train_items=meta["train_items"], log=log)
    if meta["kind"] == "mf":
        return MFModel(kind="mf", user_embeddings=params["user_embeddings"],
                       item_embeddings=params["item_embeddings"], **common)
    if meta["kind"] == "sequential":
        return SequentialModel.from_parameters(params, **common)
    raise ValueError(f"unknown model kind {meta['kind']!r}")
