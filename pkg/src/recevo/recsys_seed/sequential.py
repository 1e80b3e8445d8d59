"""Single-block causal self-attention next-item model (torch, CPU, float64).

The context (at most ``max_sequence_length`` most recent items) is followed by
a learned query token; the query's output after one attention block is the
user state, scored against the shared item embeddings by dot product. An empty
context leaves only the query token, which is the cold-start fallback.

Positions are indexed by distance from the query token (query = 0, most recent
item = 1, ...). Without positional embeddings the query output is a function of
the *set* of context items, so the model is order-blind by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from ..metrics import DEFAULT_K
from .model import DivergenceError, ModelConfig, TrainedModel, evaluate_split

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class AttentionBlockNet(nn.Module):
    def __init__(self, n_items: int, cfg: ModelConfig):
        super().__init__()
        d = cfg.embedding_dim
        self.max_len = cfg.max_sequence_length
        self.use_positional = cfg.use_positional
        # row 0 is padding; item i lives at row i + 1
        self.item_emb = nn.Embedding(n_items + 1, d, padding_idx=0)
        self.query = nn.Parameter(0.02 * torch.randn(d))
        self.pos_emb = nn.Embedding(self.max_len + 1, d) if cfg.use_positional else None
        self.norm_in = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, cfg.num_heads, dropout=cfg.dropout, batch_first=True)
        self.norm_ff = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Dropout(cfg.dropout), nn.Linear(d, d))
        self.norm_out = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)

    def encode(self, ctx: torch.Tensor) -> torch.Tensor:
        """``ctx``: (B, L) left-padded item rows (0 = pad). Returns (B, d) user states."""
        B, L = ctx.shape
        x = self.item_emb(ctx)
        q = self.query.expand(B, 1, -1)
        x = torch.cat([x, q], dim=1)
        if self.pos_emb is not None:
            dist = torch.arange(L, -1, -1, device=ctx.device)
            x = x + self.pos_emb(dist)[None]
        x = self.drop(x)
        pad = torch.cat([ctx == 0, torch.zeros(B, 1, dtype=torch.bool)], dim=1)
        h = self.norm_in(x)
        # the query sits last, so under a causal mask its row sees every
        # position; only that row feeds the output, so only it is computed
        a, _ = self.attn(h[:, -1:], h, h, key_padding_mask=pad, need_weights=False)
        y = x[:, -1] + a[:, 0]
        y = y + self.ff(self.norm_ff(y))
        return self.norm_out(y)

    def item_table(self) -> torch.Tensor:
        return self.item_emb.weight[1:]


def _pad_contexts(contexts: Sequence[Sequence[int]], max_len: int) -> torch.Tensor:
    L = max(1, max((min(len(c), max_len) for c in contexts), default=1))
    out = torch.zeros(len(contexts), L, dtype=torch.long)
    for b, c in enumerate(contexts):
        c = list(c)[-max_len:]
        if c:
            out[b, L - len(c):] = torch.tensor(c, dtype=torch.long) + 1
    return out


@dataclass
class SequentialModel(TrainedModel):
    net: Optional[AttentionBlockNet] = field(default=None, repr=False)

    def __post_init__(self):
        super().__post_init__()
        self.net.eval()
        with torch.no_grad():
            self.item_embeddings = self.net.item_table().detach().numpy().copy()

    def encode_contexts(self, contexts: Sequence[Sequence[str]]) -> np.ndarray:
        idx = [self.item_ids_to_index(c).tolist() for c in contexts]
        with torch.no_grad():
            return self.net.encode(_pad_contexts(idx, self.config.max_sequence_length)).numpy()

    def user_vector(self, user: str, context: Optional[Sequence[str]]) -> np.ndarray:
        if context is None:
            context = self.default_context(user)
        return self.encode_contexts([list(context)])[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {f"net.{k}": v.detach().numpy().copy() for k, v in self.net.state_dict().items()}
        out["user_embeddings"] = self.user_embeddings
        out["item_embeddings"] = self.item_embeddings
        return out

    @classmethod
    def from_parameters(cls, params: Dict[str, np.ndarray], users, items, config: ModelConfig,
                        train_items, log) -> "SequentialModel":
        net = AttentionBlockNet(len(items), config).to(DTYPE)
        state = {k[4:]: torch.from_numpy(np.array(v)) for k, v in params.items() if k.startswith("net.")}
        net.load_state_dict(state)
        return cls("sequential", list(users), list(items), np.array(params["user_embeddings"]),
                   np.array(params["item_embeddings"]), config, dict(train_items), list(log), net=net)


def _build(split, cfg: ModelConfig, net: AttentionBlockNet, log) -> SequentialModel:
    users, items = list(split.users), list(split.items)
    train_items = {u: list(split.train[u]) for u in users}
    model = SequentialModel("sequential", users, items, np.zeros((len(users), cfg.embedding_dim)),
                            np.zeros((len(items), cfg.embedding_dim)), cfg, train_items, log, net=net)
    model.user_embeddings = model.encode_contexts([train_items[u] for u in users]) if users else model.user_embeddings
    return model


def train_sequential_attention(split, cfg: ModelConfig, k: int = DEFAULT_K) -> SequentialModel:
    """Next-item training with sampled softmax over every prefix of each training sequence.

    Each training sequence ``[v1..vn]`` yields samples (context ``v1..v(t-1)``,
    target ``vt``) for t = 1..n, the first one having an empty context.
    """
    users, items = list(split.users), list(split.items)
    if not users or not items:
        raise ValueError("split is empty")
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    n_items = len(items)
    d = cfg.embedding_dim
    net = AttentionBlockNet(n_items, cfg).to(DTYPE)
    with torch.no_grad():
        w = torch.from_numpy(rng.uniform(-0.5 / d, 0.5 / d, size=(n_items, d)))
        net.item_emb.weight[1:] = w
        net.item_emb.weight[0] = 0.0
        if net.pos_emb is not None:
            # same scale as items, otherwise positions swamp item identity after LayerNorm
            net.pos_emb.weight.copy_(torch.from_numpy(rng.uniform(-0.5 / d, 0.5 / d, size=net.pos_emb.weight.shape)))
    log: List = []
    if cfg.max_epochs == 0:
        return _build(split, cfg, net, log)

    iidx = {v: i for i, v in enumerate(items)}
    contexts, targets = [], []
    for u in users:
        seq = [iidx[v] for v in split.train[u]]
        for t in range(len(seq)):
            contexts.append(seq[max(0, t - cfg.max_sequence_length):t])
            targets.append(seq[t])
    targets_t = torch.tensor(targets, dtype=torch.long)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    n_neg = cfg.n_sampled_negatives
    full_softmax = n_neg <= 0 or n_neg >= n_items - 1

    best_hr, best_state, since_best = -1.0, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        order = rng.permutation(len(targets))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            ctx = _pad_contexts([contexts[i] for i in b], cfg.max_sequence_length)
            tgt = targets_t[b]
            h = net.encode(ctx)
            table = net.item_table()
            if full_softmax:
                logits = h @ table.T
                loss = nn.functional.cross_entropy(logits, tgt)
            else:
                negs = torch.from_numpy(rng.integers(0, n_items, size=(len(b), n_neg)))
                cand = torch.cat([tgt[:, None], negs], dim=1)
                logits = torch.einsum("bd,bkd->bk", h, table[cand])
                logits = logits.masked_fill(torch.cat(
                    [torch.zeros(len(b), 1, dtype=torch.bool), negs == tgt[:, None]], dim=1), -1e9)
                loss = nn.functional.cross_entropy(logits, torch.zeros(len(b), dtype=torch.long))
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        epoch_loss = total / max(1, len(targets))
        val_hr = float("nan")
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            val_hr = evaluate_split(_build(split, cfg, net, log), split, "validation", k)[0].hr_at_5
            if val_hr > best_hr:
                best_hr, since_best = val_hr, 0
                best_state = {kk: v.detach().clone() for kk, v in net.state_dict().items()}
            else:
                since_best += cfg.eval_every
        log.append((epoch, epoch_loss, val_hr))
        if cfg.patience and since_best >= cfg.patience:
            logger.info("early stop at epoch %d (best val HR %.4f)", epoch, best_hr)
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    model = _build(split, cfg, net, log)
    if not model.all_finite():
        raise DivergenceError(len(log), float("nan"))
    return model
