"""Matrix factorization trained with the pairwise BPR loss, in plain numpy."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..metrics import DEFAULT_K
from .model import DivergenceError, ModelConfig, TrainedModel, evaluate_split

logger = logging.getLogger(__name__)


@dataclass
class MFModel(TrainedModel):
    def user_vector(self, user: str, context: Optional[Sequence[str]]) -> np.ndarray:
        return self.user_embeddings[self.user_to_index(user)]


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def bpr_loss_and_grad(U: np.ndarray, V: np.ndarray, users: np.ndarray, pos: np.ndarray,
                      neg: np.ndarray, l2_reg: float = 0.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean of -log sigmoid(s(u,i) - s(u,j)) over the triples, plus optional L2 on touched rows.

    Returns ``(loss, dL/dU, dL/dV)`` as dense arrays.
    """
    n = len(users)
    Uu, Vi, Vj = U[users], V[pos], V[neg]
    x = np.einsum("bd,bd->b", Uu, Vi - Vj)
    loss = -np.mean(_log_sigmoid(x))
    # d/dx of -log sigmoid(x) = -sigmoid(-x)
    g = -np.exp(_log_sigmoid(-x)) / n
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    np.add.at(gU, users, g[:, None] * (Vi - Vj))
    np.add.at(gV, pos, g[:, None] * Uu)
    np.add.at(gV, neg, -g[:, None] * Uu)
    if l2_reg:
        loss += 0.5 * l2_reg * (np.sum(Uu ** 2) + np.sum(Vi ** 2) + np.sum(Vj ** 2)) / n
        np.add.at(gU, users, l2_reg * Uu / n)
        np.add.at(gV, pos, l2_reg * Vi / n)
        np.add.at(gV, neg, l2_reg * Vj / n)
    return float(loss), gU, gV


class _Adam:
    def __init__(self, shapes, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def init_embeddings(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.5 / d, 0.5 / d, size=(n, d))


def _sample_negatives(users: np.ndarray, train_sets, n_items: int, rng: np.random.Generator) -> np.ndarray:
    neg = rng.integers(0, n_items, size=len(users))
    for b, u in enumerate(users):
        seen = train_sets[u]
        if len(seen) >= n_items:
            continue
        while neg[b] in seen:
            neg[b] = rng.integers(0, n_items)
    return neg


def train_mf_bpr(split, cfg: ModelConfig, k: int = DEFAULT_K) -> MFModel:
    """Fit user/item embeddings with Adam on BPR triples.

    Each epoch pairs every training interaction with one fresh uniform negative
    outside the user's training items. Validation HR@k is checked every
    ``cfg.eval_every`` epochs; the best parameters are kept and training stops
    after ``cfg.patience`` epochs without improvement.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    users, items = list(split.users), list(split.items)
    if not users or not items:
        raise ValueError("split is empty")
    d = cfg.embedding_dim
    U = init_embeddings(len(users), d, rng)
    V = init_embeddings(len(items), d, rng)
    uidx = {u: i for i, u in enumerate(users)}
    iidx = {v: i for i, v in enumerate(items)}
    pairs = np.array([(uidx[u], iidx[v]) for u in users for v in split.train[u]], dtype=np.int64).reshape(-1, 2)
    train_sets = [set(iidx[v] for v in split.train[u]) for u in users]
    train_items = {u: list(split.train[u]) for u in users}
    model = MFModel("mf", users, items, U, V, cfg, train_items)
    if cfg.max_epochs == 0 or len(pairs) == 0:
        return model

    opt = _Adam([U.shape, V.shape], cfg.learning_rate)
    best = (-1.0, U.copy(), V.copy())
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = pairs[order[start:start + cfg.batch_size]]
            bu, bi = batch[:, 0], batch[:, 1]
            bj = _sample_negatives(bu, train_sets, len(items), rng)
            loss, gU, gV = bpr_loss_and_grad(U, V, bu, bi, bj, cfg.l2_reg)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            opt.step([U, V], [gU, gV])
            total += loss * len(batch)
        epoch_loss = total / len(pairs)
        if not np.isfinite(epoch_loss) or not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise DivergenceError(epoch, epoch_loss)
        val_hr = float("nan")
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            val_hr = evaluate_split(model, split, "validation", k)[0].hr_at_5
            if val_hr > best[0]:
                best = (val_hr, U.copy(), V.copy())
                since_best = 0
            else:
                since_best += cfg.eval_every
        model.log.append((epoch, epoch_loss, val_hr))
        if cfg.patience and since_best >= cfg.patience:
            logger.info("early stop at epoch %d (best val HR %.4f)", epoch, best[0])
            break
    U[...] = best[1]
    V[...] = best[2]
    return model
