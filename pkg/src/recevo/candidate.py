"""Child-side harness for candidate entrypoints.

A candidate's ``pipeline.py`` calls :func:`run_pipeline` and its
``diagnosis.py`` calls :func:`run_diagnosis`. Both parse the protocol
arguments, do the phase work and write ``<out>/manifest``. Exceptions become a
FAIL manifest plus exit code 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .dataset import SplitDataset, load_prepared
from .diagnosis import ProbeResult, assemble_d_raw
from .recsys_seed.model import ModelConfig, evaluate_split, export_artifacts, recommend_top_k, write_score_table

logger = logging.getLogger(__name__)

RECOMMENDATIONS_FILE = "recommendations.tsv"
DEFAULT_REC_K = 10


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="candidate phase runner")
    p.add_argument("--phase", required=True, choices=("train", "evaluate", "diagnose"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", required=True)
    return p.parse_args(argv)


def _write_manifest(out: Path, doc: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest").write_text(json.dumps(doc, sort_keys=True))


def _guarded(phase_fn: Callable[[argparse.Namespace, dict], dict], argv) -> None:
    args = parse_args(argv)
    out = Path(args.out)
    start = time.monotonic()
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = json.loads(Path(args.config).read_text())
        doc = phase_fn(args, config)
    except Exception as exc:  # report, then signal failure via exit code
        log = traceback.format_exc()
        print(log, file=sys.stderr)
        _write_manifest(out, {"status": "FAIL", "phase": args.phase, "failure_log": f"{type(exc).__name__}: {exc}\n{log}",
                              "wall_time": time.monotonic() - start})
        sys.exit(1)
    doc.setdefault("status", "OK")
    doc["phase"] = args.phase
    doc["wall_time"] = time.monotonic() - start
    _write_manifest(out, doc)


def write_recommendations(recs: Dict[str, List[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in recs.items():
            fh.write(u + "\t" + ",".join(items) + "\n")


def read_recommendations(path) -> Dict[str, List[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, items = line.rstrip("\n").split("\t")
                out[u] = [v for v in items.split(",") if v]
    return out


def apply_overrides(cfg: ModelConfig, config: dict) -> ModelConfig:
    """Run-level overrides (e.g. desk-scale epoch budgets) applied on top of the candidate's own config."""
    overrides = config.get("model_overrides") or {}
    if not overrides:
        return cfg
    data = cfg.to_dict()
    data.update(overrides)
    return ModelConfig.from_dict(data)


def run_pipeline(train_fn: Callable[[SplitDataset, ModelConfig], object], load_fn: Callable[[str], object],
                 config: ModelConfig, argv: Optional[Sequence[str]] = None) -> None:
    """Train / evaluate phases for a recommendation pipeline.

    train: fit, export the artifact bundle, report validation metrics.
    evaluate: reload the trained bundle, report metrics on ``eval_phase``
    (validation unless the orchestrator asks for test), write the score table
    and top-k lists for the configured simulator users.
    """

    def phase(args, run_cfg):
        split = load_prepared(args.data)
        out = Path(args.out)
        if args.phase == "train":
            cfg = apply_overrides(config, run_cfg)
            model = train_fn(split, cfg)
            artifacts = export_artifacts(model, out, split, "validation")
            report, _ = evaluate_split(model, split, "validation")
            return {"metrics": report.to_manifest(), "artifacts": artifacts, "model_kind": model.kind}
        if args.phase == "evaluate":
            model = load_fn(run_cfg["train_dir"])
            eval_phase = run_cfg.get("eval_phase", "validation")
            report, rows = evaluate_split(model, split, eval_phase)
            write_score_table(rows, out / "score_table.tsv")
            k = int(run_cfg.get("rec_k", DEFAULT_REC_K))
            recs = {}
            for u in run_cfg.get("sim_users", []):
                recs[u] = recommend_top_k(model, u, k, split.eval_context(u, eval_phase)).items
            write_recommendations(recs, out / RECOMMENDATIONS_FILE)
            return {"metrics": report.to_manifest(), "model_kind": model.kind,
                    "artifacts": {"score_table": str(out / "score_table.tsv"),
                                  "recommendations": str(out / RECOMMENDATIONS_FILE)}}
        raise ValueError(f"pipeline does not handle phase {args.phase!r}")

    _guarded(phase, argv)


def probe_users(split: SplitDataset, config: dict) -> List[str]:
    """Deterministic user subset for probes (all users when ``probe_users`` is unset)."""
    n = config.get("probe_users")
    users = list(split.users)
    if not n or n >= len(users):
        return users
    idx = np.random.default_rng(int(config.get("seed", 0))).choice(len(users), size=int(n), replace=False)
    return [users[i] for i in sorted(idx)]


def run_diagnosis(probes_fn: Callable[[object, SplitDataset, dict], Sequence[ProbeResult]],
                  load_fn: Callable[[str], object], argv: Optional[Sequence[str]] = None) -> None:
    """Diagnose phase: load the trained model and emit D_raw from ``probes_fn``."""

    def phase(args, run_cfg):
        if args.phase != "diagnose":
            raise ValueError(f"diagnosis tool does not handle phase {args.phase!r}")
        split = load_prepared(args.data)
        model = load_fn(run_cfg["train_dir"])
        d_raw = assemble_d_raw(list(probes_fn(model, split, run_cfg)))
        (Path(args.out) / "d_raw.json").write_text(json.dumps(d_raw, sort_keys=True))
        return {"d_raw": d_raw, "model_kind": model.kind, "artifacts": {"d_raw": str(Path(args.out) / "d_raw.json")}}

    _guarded(phase, argv)
