"""Command-line entry points: prepare, evaluate, diagnose, simulate, evolve, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .dataset import DatasetError, apply_five_core, leave_last_out_split, load_interactions, load_prepared, save_prepared
from .diagnosis import interpret_diagnosis
from .evolution import (
    ARCHIVE_FILE,
    ArchiveError,
    EvolutionArchive,
    EvolutionConfig,
    EvolutionDeps,
    EvolutionError,
    InitializationError,
    run_evolution,
)
from .llm_gateway import GatewayConfig, GatewayError, build_gateway
from .personas import build_personas
from .retrieval import build_backend
from .sandbox import DIAG_ENTRY, PIPELINE_ENTRY, RUNS_DIR, CandidateCodebase, ResourceLimits, Sandbox
from .seeds import TRAINERS, seed_codebase

logger = logging.getLogger("recevo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
CONFIG_FILE = "config.json"
REPORT_DIR = "report"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    data_dir: str
    out_dir: str
    seed: Dict[str, object] = field(default_factory=lambda: {"kind": "mf", "model": {}})
    evolution: Dict[str, object] = field(default_factory=dict)
    gateway: Optional[Dict[str, object]] = None
    retrieval: Dict[str, object] = field(default_factory=lambda: {"backend": "none"})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}", EXIT_CONFIG) from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}", EXIT_CONFIG) from None
        if not isinstance(doc, dict):
            raise CliError("config must be a JSON object", EXIT_CONFIG)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_CONFIG)
        missing = [k for k in ("data_dir", "out_dir") if k not in doc]
        if missing:
            raise CliError(f"config lacks {missing}", EXIT_CONFIG)
        cfg = cls(**doc)
        cfg.resolve_paths(path.parent)
        return cfg

    def resolve_paths(self, base: Path) -> None:
        def fix(p):
            return str((base / p).resolve()) if p and not Path(p).is_absolute() else p

        self.data_dir, self.out_dir = fix(self.data_dir), fix(self.out_dir)
        if self.seed.get("path"):
            self.seed["path"] = fix(self.seed["path"])
        if self.gateway:
            for k in ("script_path", "replay_path", "transcript_path", "templates_dir"):
                if self.gateway.get(k):
                    self.gateway[k] = fix(self.gateway[k])
        if self.retrieval.get("corpus_dir"):
            self.retrieval["corpus_dir"] = fix(self.retrieval["corpus_dir"])

    def evolution_config(self) -> EvolutionConfig:
        try:
            return EvolutionConfig.from_dict(dict(self.evolution))
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid evolution config: {exc}", EXIT_CONFIG) from None

    def gateway_config(self) -> Optional[GatewayConfig]:
        if not self.gateway:
            return None
        unknown = set(self.gateway) - set(GatewayConfig.__dataclass_fields__)
        if unknown:
            raise CliError(f"unknown gateway keys: {sorted(unknown)}", EXIT_CONFIG)
        try:
            cfg = GatewayConfig(**self.gateway)
        except ValueError as exc:
            raise CliError(f"invalid gateway config: {exc}", EXIT_CONFIG) from None
        for k in ("script_path", "replay_path", "templates_dir"):
            p = getattr(cfg, k)
            if p and not Path(p).exists():
                raise CliError(f"gateway {k} does not exist: {p}", EXIT_CONFIG)
        return cfg

    def retrieval_backend(self):
        allowed = {"backend", "corpus_dir", "base_url", "timeout"}
        unknown = set(self.retrieval) - allowed
        if unknown:
            raise CliError(f"unknown retrieval keys: {sorted(unknown)}", EXIT_CONFIG)
        try:
            return build_backend(self.retrieval.get("backend", "none"), self.retrieval.get("corpus_dir"),
                                 self.retrieval.get("base_url"), float(self.retrieval.get("timeout", 20.0)))
        except (ValueError, OSError) as exc:
            raise CliError(f"retrieval backend: {exc}", EXIT_CONFIG) from None

    def seed_candidate(self) -> CandidateCodebase:
        unknown = set(self.seed) - {"kind", "model", "path"}
        if unknown:
            raise CliError(f"unknown seed keys: {sorted(unknown)}", EXIT_CONFIG)
        if self.seed.get("path"):
            return load_candidate_dir(self.seed["path"])
        kind = self.seed.get("kind", "mf")
        if kind not in TRAINERS:
            raise CliError(f"unknown seed kind {kind!r}", EXIT_CONFIG)
        try:
            return seed_codebase(kind, **dict(self.seed.get("model") or {}))
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid seed model config: {exc}", EXIT_CONFIG) from None


def load_candidate_dir(path) -> CandidateCodebase:
    root = Path(path)
    if not root.is_dir():
        raise CliError(f"candidate directory not found: {root}", EXIT_CONFIG)
    files = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and not rel.startswith(RUNS_DIR + "/") and "__pycache__" not in rel:
            files[rel] = p.read_text(encoding="utf-8")
    c = CandidateCodebase(files)
    for entry in (PIPELINE_ENTRY, DIAG_ENTRY):
        if entry not in files:
            raise CliError(f"candidate directory lacks {entry}", EXIT_CONFIG)
    return c


def _load_split(data_dir):
    path = Path(data_dir)
    if not (path / "dataset_manifest.json").exists():
        raise CliError(f"no prepared dataset at {path} (run 'prepare' first)", EXIT_DATA)
    try:
        return load_prepared(path)
    except (DatasetError, OSError, ValueError) as exc:
        raise CliError(f"cannot load prepared dataset {path}: {exc}", EXIT_DATA) from None


def _claim_out_dir(out: Path, force: bool, marker: str) -> None:
    if (out / marker).exists():
        if not force:
            raise CliError(f"{out} already holds output ({marker}); pass --force to overwrite", EXIT_CONFIG)
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _single_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        if not args.data or not args.out:
            raise CliError("--data and --out are required without --config", EXIT_CONFIG)
        cfg = RunConfig(data_dir=args.data, out_dir=args.out)
    if args.data:
        cfg.data_dir = str(Path(args.data).resolve())
    if args.out:
        cfg.out_dir = str(Path(args.out).resolve())
    if getattr(args, "candidate", None):
        cfg.seed = {"path": str(Path(args.candidate).resolve())}
    elif getattr(args, "seed_kind", None):
        cfg.seed = {"kind": args.seed_kind, "model": json.loads(args.model or "{}")}
    if getattr(args, "gateway_script", None):
        cfg.gateway = {"provider": "mock", "script_path": str(Path(args.gateway_script).resolve())}
    return cfg


def _clear_run(out: Path) -> None:
    # only what a run writes; anything else the user keeps there survives
    for name in ("iterations", "workspaces", REPORT_DIR):
        if (out / name).exists():
            shutil.rmtree(out / name)
    (out / ARCHIVE_FILE).unlink(missing_ok=True)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    out = Path(args.out)
    for p in [args.interactions] + ([args.attributes] if args.attributes else []):
        if not Path(p).exists():
            raise CliError(f"input file not found: {p}", EXIT_DATA)
    _claim_out_dir(out, args.force, "dataset_manifest.json")
    try:
        d = load_interactions(args.interactions, attributes_path=args.attributes)
        d = apply_five_core(d, args.core)
        split = leave_last_out_split(d, args.seed)
    except DatasetError as exc:
        raise CliError(f"dataset error: {exc}", EXIT_DATA) from None
    sources = {"interactions": str(Path(args.interactions).resolve()),
               "attributes": str(Path(args.attributes).resolve()) if args.attributes else None}
    save_prepared(split, out, sources)
    print(f"prepared {len(split.users)} users, {len(split.items)} items, {len(d)} interactions -> {out}")
    return EXIT_OK


def _run_candidate(cfg: RunConfig, phases, sim_users=(), eval_phase="validation"):
    split = _load_split(cfg.data_dir)
    cand = cfg.seed_candidate()
    out = Path(cfg.out_dir)
    ecfg = cfg.evolution_config()
    sb = Sandbox(out / "workspaces", cfg.data_dir, ResourceLimits(ecfg.wall_time_limit, ecfg.memory_limit))
    ws = sb.materialize(cand)
    manifests = {}
    run_cfg = {
        "train": {"seed": ecfg.seed, "model_overrides": ecfg.model_overrides},
        "evaluate": {"seed": ecfg.seed, "eval_phase": eval_phase, "sim_users": list(sim_users), "rec_k": ecfg.rec_k},
        "diagnose": {"seed": ecfg.seed, "probe_users": ecfg.probe_users},
    }
    for phase in phases:
        m = sb.run_phase(ws, phase, run_cfg[phase])
        manifests[phase] = m
        if not m.ok:
            raise CliError(f"{phase} phase {m.status}:\n{m.failure_log[-2000:]}", EXIT_RUNTIME)
    return split, cand, ws, manifests


def cmd_evaluate(args) -> int:
    cfg = _single_config(args)
    _claim_out_dir(Path(cfg.out_dir), args.force, "metrics.json")
    _, cand, _, manifests = _run_candidate(cfg, ("train", "evaluate"), eval_phase=args.split)
    metrics = manifests["evaluate"].metrics
    _write_json(Path(cfg.out_dir) / "metrics.json", {"candidate": cand.id, **metrics})
    print(f"candidate {cand.id} {args.split}: NDCG@5 {metrics['ndcg_at_5']:.4f} HR@5 {metrics['hr_at_5']:.4f}")
    return EXIT_OK


def _gateway(cfg: RunConfig, required: bool):
    gcfg = cfg.gateway_config()
    if gcfg is None:
        if required:
            raise CliError("this command needs a 'gateway' section (or --gateway-script)", EXIT_CONFIG)
        return None
    try:
        return build_gateway(gcfg)
    except GatewayError as exc:
        raise CliError(f"gateway startup error: {exc}", EXIT_CONFIG) from None


def cmd_diagnose(args) -> int:
    cfg = _single_config(args)
    llm = _gateway(cfg, required=False)
    out = Path(cfg.out_dir)
    _claim_out_dir(out, args.force, "r_diag.json")
    _, cand, _, manifests = _run_candidate(cfg, ("train", "diagnose"))
    d_raw = manifests["diagnose"].d_raw
    report = interpret_diagnosis(d_raw, llm=llm, state_key=cand.id)
    _write_json(out / "d_raw.json", d_raw)
    _write_json(out / "r_diag.json", report.to_dict())
    (out / "r_diag.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .candidate import RECOMMENDATIONS_FILE, read_recommendations
    from .dataset import Dataset
    from .simulator import run_simulator, sample_users

    cfg = _single_config(args)
    llm = _gateway(cfg, required=True)
    out = Path(cfg.out_dir)
    _claim_out_dir(out, args.force, "r_sim.json")
    ecfg = cfg.evolution_config()
    split = _load_split(cfg.data_dir)
    train_d = Dataset(split.train_records(), split.dataset.attributes)
    users = sample_users(train_d, min(args.users or ecfg.sample_size, len(split.users)), ecfg.seed)
    _, cand, ws, _ = _run_candidate(cfg, ("train", "evaluate"), sim_users=users)
    recs = read_recommendations(ws / RUNS_DIR / "evaluate" / RECOMMENDATIONS_FILE)
    history = {u: list(split.train[u])[-ecfg.history_limit:] for u in recs}
    critiques, report = run_simulator(train_d, build_personas(train_d), recs, history, llm, ecfg.concurrency)
    _write_json(out / "r_sim.json", report.to_dict())
    with open(out / "critiques.jsonl", "w", encoding="utf-8") as fh:
        for c in critiques:
            fh.write(json.dumps(c.to_dict(), sort_keys=True) + "\n")
    print(report.to_text())
    return EXIT_OK


def cmd_evolve(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.out:
        cfg.out_dir = str(Path(args.out).resolve())
    if args.T is not None:
        cfg.evolution = dict(cfg.evolution, T=args.T)
    ecfg = cfg.evolution_config()
    llm = _gateway(cfg, required=True)
    retrieval = cfg.retrieval_backend()
    seed = cfg.seed_candidate()
    split = _load_split(cfg.data_dir)
    out = Path(cfg.out_dir)
    if (out / ARCHIVE_FILE).exists() and not args.resume:
        if not args.force:
            raise CliError(f"{out} holds a run; pass --resume to continue or --force to start over", EXIT_CONFIG)
        _clear_run(out)
    elif args.resume and not (out / ARCHIVE_FILE).exists():
        raise CliError(f"nothing to resume in {out}", EXIT_CONFIG)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / CONFIG_FILE, asdict(cfg))
    deps = EvolutionDeps(Sandbox(out / "workspaces", cfg.data_dir, ecfg.limits), split, llm, out, retrieval)
    try:
        archive, best, peak = run_evolution(ecfg, seed, deps, resume=args.resume, stop_after=args.stop_after)
    except InitializationError as exc:
        raise CliError(f"seed initialization failed: {exc}\n{exc.failure_log[-2000:]}", EXIT_RUNTIME) from None
    except (EvolutionError, ArchiveError, GatewayError) as exc:
        raise CliError(f"evolution failed: {exc}", EXIT_RUNTIME) from None
    entry = archive.entries[best.id]
    test = archive.best_test_metrics
    test_txt = f" test HR@5 {test['hr_at_5']:.4f} NDCG@5 {test['ndcg_at_5']:.4f}" if test else " (partial run)"
    print(f"best {best.id} validation {ecfg.score_metric} {entry.score:.4f}{test_txt} peak iteration {peak}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reports


def _trajectory(a: EvolutionArchive) -> List[str]:
    rows = ["| iteration | outcome | candidate | score | best so far |", "|---|---|---|---|---|"]
    best = None
    seed = next((e for e in a.entries.values() if e.iteration == 0), None)
    if seed is not None:
        best = seed.score
        rows.append(f"| 0 | seed | {seed.id} | {seed.score:.4f} | {best:.4f} |")
    for t in range(1, a.completed_iterations + 1):
        events = [e for e in a.events if e["iteration"] == t]
        admitted = [e for e in events if e["kind"] == "admitted"]
        if admitted:
            ev = admitted[-1]
            best = ev["score"] if best is None else max(best, ev["score"])
            rows.append(f"| {t} | admitted | {ev['candidate']} | {ev['score']:.4f} | {best:.4f} |")
            continue
        final = [e for e in events if e["kind"] in ("fail", "timeout", "aborted", "cache_hit")]
        ev = final[-1] if final else {"kind": "no-op", "candidate": None}
        outcome = ev["kind"] if ev["kind"] != "cache_hit" else "cached"
        best_txt = f"{best:.4f}" if best is not None else "-"
        rows.append(f"| {t} | {outcome} | {ev.get('candidate') or '-'} | - | {best_txt} |")
    return rows


def _lineage(a: EvolutionArchive) -> List[str]:
    children: Dict[Optional[str], List[str]] = {}
    for e in a.entries.values():
        parent = e.candidate.parent_id if e.candidate.parent_id in a.entries else None
        children.setdefault(parent, []).append(e.id)
    lines = []

    def walk(cid, depth):
        e = a.entries[cid]
        mark = " (best)" if cid == a.best_id else ""
        lines.append(f"{'  ' * depth}- {cid} iter {e.iteration} score {e.score:.4f}{mark}: {e.change_summary or 'seed'}")
        for child in children.get(cid, []):
            walk(child, depth + 1)

    for root in children.get(None, []):
        walk(root, 0)
    return lines


def write_reports(run_dir) -> Dict[str, Path]:
    run_dir = Path(run_dir)
    path = run_dir / ARCHIVE_FILE
    if not path.exists():
        raise CliError(f"no archive index in {run_dir}", EXIT_DATA)
    try:
        a = EvolutionArchive.load(path)
    except ArchiveError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    if not a.entries:
        raise CliError(f"archive in {run_dir} has no entries", EXIT_DATA)
    out = run_dir / REPORT_DIR
    out.mkdir(exist_ok=True)
    partial = not a.finished
    flag = "PARTIAL RUN: the archive was not finalized; no test evaluation yet.\n\n" if partial else ""
    files = {}

    files["trajectory"] = out / "trajectory.md"
    files["trajectory"].write_text(flag + "# Validation score per iteration\n\n" + "\n".join(_trajectory(a)) + "\n")

    rows = ["| candidate | iteration | tag | prevalence |", "|---|---|---|---|"]
    for e in a.entries.values():
        for f in (e.sim_report or {}).get("common_failures", []):
            rows.append(f"| {e.id} | {e.iteration} | {f['tag']} | {f['prevalence']:.2f} |")
    files["sim"] = out / "sim_prevalence.md"
    files["sim"].write_text(flag + "# Simulator failure-tag prevalence\n\n" + "\n".join(rows) + "\n")

    rows = ["| candidate | iteration | severity | finding |", "|---|---|---|---|"]
    for e in a.entries.values():
        for f in e.diag_report.get("findings", []):
            rows.append(f"| {e.id} | {e.iteration} | {f['severity']} | {f['claim']} |")
    files["diag"] = out / "diag_findings.md"
    files["diag"].write_text(flag + "# Diagnosis findings\n\n" + "\n".join(rows) + "\n")

    files["lineage"] = out / "lineage.md"
    files["lineage"].write_text(flag + "# Lineage\n\n" + "\n".join(_lineage(a)) + "\n")

    best = a.best
    summary = [f"status: {'partial' if partial else 'complete'}",
               f"iterations completed: {max(0, a.completed_iterations)}",
               f"best: {best.id} (iteration {best.iteration}, validation score {best.score:.4f})",
               f"peak iteration: {a.peak_iteration}"]
    if a.best_test_metrics:
        summary.append(f"test: HR@5 {a.best_test_metrics['hr_at_5']:.4f} NDCG@5 {a.best_test_metrics['ndcg_at_5']:.4f}")
    files["summary"] = out / "summary.md"
    files["summary"].write_text(flag + "\n".join(summary) + "\n")
    return files


def cmd_report(args) -> int:
    files = write_reports(args.run)
    for name, p in files.items():
        print(f"{name}: {p}")
    return EXIT_OK


# --------------------------------------------------------------------------


def _add_single_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (supplies data, gateway and seed sections)")
    p.add_argument("--data", help="prepared dataset directory")
    p.add_argument("--out", help="output directory")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--candidate", help="directory with pipeline.py and diagnosis.py")
    src.add_argument("--seed-kind", choices=sorted(TRAINERS), help="use a built-in seed pipeline")
    p.add_argument("--model", help="JSON object of model settings for --seed-kind")
    p.add_argument("--force", action="store_true", help="overwrite existing output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recevo", description="Evolve recommender codebases from directional feedback.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="five-core filter and leave-last-out split")
    p.add_argument("--interactions", required=True, help="TSV: user, item, timestamp, rating[, review]")
    p.add_argument("--attributes", help="TSV: item, category, title, price")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="negative-sampling seed")
    p.add_argument("--core", type=int, default=5)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("evaluate", help="train and evaluate one candidate")
    _add_single_args(p)
    p.add_argument("--split", choices=("validation", "test"), default="validation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="train one candidate and run its diagnosis tool")
    _add_single_args(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="critique one candidate's recommendations with simulated users")
    _add_single_args(p)
    p.add_argument("--gateway-script", help="mock script (JSON/JSONL) for the LLM gateway")
    p.add_argument("--users", type=int, help="number of simulated users")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evolve", help="run the evolution loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--T", type=int, help="override the iteration budget")
    p.add_argument("--resume", action="store_true", help="continue from the persisted archive")
    p.add_argument("--force", action="store_true", help="discard an existing run in out_dir")
    p.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("report", help="render trajectory, feedback and lineage tables for a run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # last resort: report, never a bare traceback
        logger.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
