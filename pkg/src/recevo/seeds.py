"""Seed candidate codebases: a recommendation pipeline plus its paired diagnosis tool."""

from __future__ import annotations

from dataclasses import fields
from typing import Optional

from .recsys_seed.model import ModelConfig
from .sandbox import DIAG_ENTRY, PIPELINE_ENTRY, CandidateCodebase

TRAINERS = {
    "mf": ("train_mf_bpr", "matrix factorization trained with the BPR loss"),
    "sequential": ("train_sequential_attention", "one-block self-attention next-item model"),
}

PIPELINE_TEMPLATE = '''"""Recommendation pipeline: {description}."""

from recevo.candidate import run_pipeline
from recevo.recsys_seed import ModelConfig, {trainer}
from recevo.recsys_seed import load_model as load_bundle

CONFIG = ModelConfig(
{config_lines}
)


def train(split, cfg):
    return {trainer}(split, cfg)


def load_model(train_dir):
    return load_bundle(train_dir)


if __name__ == "__main__":
    run_pipeline(train, load_model, CONFIG)
'''

SEED_DIAG_SOURCE = '''"""Diagnosis tool: embedding collapse, ranking margin and swap sensitivity probes."""

from recevo.candidate import probe_users, run_diagnosis
from recevo.diagnosis import (
    build_margin_table,
    probe_embedding_collapse,
    probe_ranking_margin,
    probe_swap_sensitivity,
)

from pipeline import load_model


def probes(model, split, config):
    seed = int(config.get("seed", 0))
    users = probe_users(split, config)
    categories = {v: split.dataset.category(v) for v in split.items}
    histories = {u: split.train[u] for u in users}
    exclude = {u: split.dataset.history_items(u) for u in users}
    out = [probe_embedding_collapse(model.item_embeddings, seed=seed)]
    table = build_margin_table(model, users, histories, exclude, split.items, seed)
    out.append(probe_ranking_margin(table, categories))
    index = {v: i for i, v in enumerate(model.items)}
    sequences = [(split.train[u], split.validation[u], u) for u in users]
    out.append(probe_swap_sensitivity(lambda ctx, u: model.score_all(u, ctx), sequences, k=10,
                                      item_index=index, metadata={"model_kind": model.kind}))
    return out


if __name__ == "__main__":
    run_diagnosis(probes, load_model)
'''


def pipeline_source(kind: str = "mf", **config) -> str:
    """Render a pipeline entrypoint for ``kind`` with an explicit ModelConfig literal."""
    if kind not in TRAINERS:
        raise ValueError(f"unknown seed kind {kind!r}; expected one of {sorted(TRAINERS)}")
    cfg = ModelConfig(**config)  # validates
    values = cfg.to_dict()
    lines = [f"    {f.name}={values[f.name]!r}," for f in fields(ModelConfig)]
    trainer, description = TRAINERS[kind]
    return PIPELINE_TEMPLATE.format(description=description, trainer=trainer, config_lines="\n".join(lines))


def seed_codebase(kind: str = "mf", diag_source: Optional[str] = None, **config) -> CandidateCodebase:
    return CandidateCodebase({PIPELINE_ENTRY: pipeline_source(kind, **config),
                              DIAG_ENTRY: diag_source or SEED_DIAG_SOURCE})
