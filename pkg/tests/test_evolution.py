import json
from collections import Counter

import numpy as np
import pytest

from recevo.evolution import (
    ARCHIVE_FILE,
    ArchiveEntry,
    ArchiveError,
    DevelopmentReport,
    EvolutionArchive,
    EvolutionConfig,
    EvolutionDeps,
    EvolutionError,
    InitializationError,
    IterationAborted,
    Modification,
    analyze_structure,
    archive_digest,
    build_dev_report,
    coevolve_diag,
    evaluate_codebase,
    evolve_code,
    load_run_transcripts,
    plan_queries,
    run_evolution,
    sample_parent,
)
from recevo.diagnosis import DiagnosisReport, Finding
from recevo.llm_gateway import Gateway, MockBackend
from recevo.retrieval import OfflineCorpus, RetrievedDoc, SearchResult
from recevo.sandbox import DIAG_ENTRY, PIPELINE_ENTRY, CandidateCodebase, RunManifest, Sandbox
from recevo.simulator import SimulatorReport
from recevo.seeds import SEED_DIAG_SOURCE, pipeline_source, seed_codebase
from scripted import base_records

R_SIM = SimulatorReport([("recency_ignored", 0.75, [])], "ignores recency", 4).to_dict()
R_DIAG = DiagnosisReport([Finding("warn", "Order-insensitive: swap moves nothing", ["swap_sensitivity"])], {},
                         "").to_dict()
MF_MODEL = dict(embedding_dim=8, learning_rate=0.05, max_epochs=15)


def llm(records):
    return Gateway(MockBackend(records))


def entry(score, iteration=0, tag="x", parent=None):
    c = CandidateCodebase({PIPELINE_ENTRY: f"# {tag}", DIAG_ENTRY: "d"}, parent_id=parent, iteration=iteration)
    return ArchiveEntry(c, score, {"hr_at_5": score}, None, {"findings": []}, {}, {}, iteration)


# ---------------------------------------------------------------- archive


def test_archive_best_is_strict():
    a = EvolutionArchive()
    assert a.add(entry(0.5, 0, "a"))
    assert not a.add(entry(0.5, 1, "b"))
    assert a.best.candidate.files[PIPELINE_ENTRY] == "# a" and a.peak_iteration == 0
    assert a.add(entry(0.6, 2, "c")) and a.peak_iteration == 2
    with pytest.raises(ArchiveError):
        a.add(entry(0.9, 3, "a"))


def test_sample_parent_argmax_and_ties():
    a = EvolutionArchive()
    for i, s in enumerate([0.2, 0.7, 0.7]):
        a.add(entry(s, i, f"e{i}"))
    assert sample_parent(a, 0.0, 1).files[PIPELINE_ENTRY] == "# e1"
    with pytest.raises(ValueError):
        sample_parent(a, -1.0, 0)
    with pytest.raises(ArchiveError):
        sample_parent(EvolutionArchive(), 0.7, 0)


def test_sample_parent_softmax_frequencies():
    a = EvolutionArchive()
    scores = [0.1, 0.4, 0.5]
    for i, s in enumerate(scores):
        a.add(entry(s, i, f"e{i}"))
    temp = 0.2
    counts = Counter(sample_parent(a, temp, seed).files[PIPELINE_ENTRY] for seed in range(3000))
    p = np.exp(np.array(scores) / temp)
    p /= p.sum()
    for i in range(3):
        assert abs(counts[f"# e{i}"] / 3000 - p[i]) < 0.03


def test_sample_parent_deterministic_per_seed():
    a = EvolutionArchive()
    for i in range(5):
        a.add(entry(0.1 * i, i, f"e{i}"))
    assert [sample_parent(a, 0.7, s).id for s in range(20)] == [sample_parent(a, 0.7, s).id for s in range(20)]


def test_archive_persistence(tmp_path):
    a = EvolutionArchive()
    a.add(entry(0.3, 0, "a"))
    a.add(entry(0.4, 1, "b", parent="p"))
    a.log(1, "admitted", "x", score=0.4)
    a.save(tmp_path / ARCHIVE_FILE)
    b = EvolutionArchive.load(tmp_path / ARCHIVE_FILE)
    assert b.to_dict() == a.to_dict()
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ArchiveError):
        EvolutionArchive.load(tmp_path / "bad.json")
    (tmp_path / "bad2.json").write_text(json.dumps({"entries": [], "best_id": "nope"}))
    with pytest.raises(ArchiveError):
        EvolutionArchive.load(tmp_path / "bad2.json")


def test_digest_best_first():
    a = EvolutionArchive()
    assert archive_digest(a) == "(empty archive)"
    a.add(entry(0.3, 0, "a"))
    a.add(entry(0.8, 1, "b"))
    lines = archive_digest(a).splitlines()
    assert "0.8000" in lines[0] and "0.3000" in lines[1]


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(T=0)
    with pytest.raises(ValueError):
        EvolutionConfig(score_metric="mrr")
    with pytest.raises(ValueError, match="unknown"):
        EvolutionConfig.from_dict({"T": 2, "bogus": 1})
    assert EvolutionConfig().T == 21 and EvolutionConfig().temperature == 0.7


# ---------------------------------------------------------------- planning


def test_plan_queries_capped_and_linked():
    qs = {"queries": [{"text": f"q{i}", "motivation": "recency_ignored"} for i in range(8)]}
    out = plan_queries(R_SIM, R_DIAG, "", llm([{"instruction_id": "I_PLAN", "reply": qs}]))
    assert len(out) == 5 and out[0].motivation == "recency_ignored"
    with pytest.raises(ValueError):
        plan_queries(None, None, "", llm([]))


def test_plan_queries_without_feedback_is_single_exploratory():
    qs = {"queries": [{"text": "a", "motivation": "x"}, {"text": "b"}]}
    out = plan_queries(SimulatorReport([], "", 1).to_dict(), DiagnosisReport([], {}, "").to_dict(), "",
                       llm([{"instruction_id": "I_PLAN", "reply": qs}]))
    assert [(q.text, q.motivation) for q in out] == [("a", "exploratory")]


def test_plan_queries_unparseable_degrades():
    assert plan_queries(R_SIM, None, "", llm([{"instruction_id": "I_PLAN", "reply": "no idea"}])) == []


def test_dev_report_links_and_citations():
    reply = {"summary": "s", "modifications": [
        {"target": "pipeline.py", "change": "positions", "addresses": ["swap_sensitivity"]},
        {"target": "pipeline.py", "change": "bigger dim", "addresses": ["made_up"]}],
        "citations": ["d1", "ghost"]}
    docs = SearchResult([RetrievedDoc("d1", "t", "s", "offline", 1)])
    r = build_dev_report(R_SIM, R_DIAG, "", docs, llm([{"instruction_id": "I_REPORT", "reply": reply}]))
    assert r.modifications[0].addresses == ["swap_sensitivity"] and not r.modifications[0].exploratory
    assert r.modifications[1].exploratory and r.modifications[1].addresses == []
    assert r.citations == ["d1"]
    assert "exploratory" in r.to_text()


def test_dev_report_unparseable_aborts():
    with pytest.raises(IterationAborted):
        build_dev_report(R_SIM, R_DIAG, "", None, llm([{"instruction_id": "I_REPORT", "reply": "??"}]))


REPORT = DevelopmentReport("s", [Modification("pipeline.py", "c")])
PARENT = CandidateCodebase({PIPELINE_ENTRY: "old", DIAG_ENTRY: "diag"})


def test_evolve_code_applies_and_rejects():
    reply = {"summary": "new\nsecond line", "edits": [{"path": PIPELINE_ENTRY, "content": "new"},
                                                       {"path": DIAG_ENTRY, "content": "hack"},
                                                       {"path": "other.py", "content": "x"}]}
    out = evolve_code(REPORT, PARENT, "", llm([{"instruction_id": "I_CODE", "reply": reply}]), iteration=3)
    assert out.child.files == {PIPELINE_ENTRY: "new", DIAG_ENTRY: "diag"}
    assert out.child.parent_id == PARENT.id and out.child.iteration == 3
    assert {r["path"] for r in out.rejected} == {DIAG_ENTRY, "other.py"}
    assert out.summary == "new"


@pytest.mark.parametrize("reply", [{"summary": "x", "edits": []}, "garbage",
                                   {"summary": "x", "edits": [{"path": DIAG_ENTRY, "content": "y"}]}])
def test_evolve_code_aborts(reply):
    with pytest.raises(IterationAborted):
        evolve_code(REPORT, PARENT, "", llm([{"instruction_id": "I_CODE", "reply": reply}]))


def test_analyze_drops_absent_components():
    child = CandidateCodebase({PIPELINE_ENTRY: "class Attention: pass", DIAG_ENTRY: "mentions GhostLayer"})
    reply = {"execution_flow": "f", "gaps": [{"component": "Attention", "reason": "r"},
                                             {"component": "GhostLayer", "reason": "r"}]}
    out = analyze_structure(child, "", llm([{"instruction_id": "I_ANALYZE", "reply": reply}]))
    assert [g["component"] for g in out.gaps] == ["Attention"]
    assert [g["component"] for g in out.dropped_gaps] == ["GhostLayer"]
    assert analyze_structure(child, "", llm([{"instruction_id": "I_ANALYZE", "reply": "nope"}])) is None


def coevolve(records, dry_run, r_sim=R_SIM, gaps=()):
    analysis = analyze_structure(
        CandidateCodebase({PIPELINE_ENTRY: "x", DIAG_ENTRY: "d"}), "d",
        llm([{"instruction_id": "I_ANALYZE", "reply": {"execution_flow": "f", "gaps": list(gaps)}}]))
    return coevolve_diag(r_sim, analysis, "", llm(records + base_records()), None, "old diag", {}, dry_run)


def test_coevolve_noop_without_findings():
    calls = []
    out = coevolve([], calls.append, r_sim=None)
    assert not out.accepted and "no-op" in out.reason and calls == []


def test_coevolve_accepts_valid_dry_run():
    rec = [{"instruction_id": "I_CODE_DIAG", "reply": {"summary": "s", "content": "new diag"}}]
    ok = RunManifest("OK", "diagnose", d_raw={"p": {"value": 1.0}})
    out = coevolve(rec, lambda src: ok)
    assert out.accepted and out.source == "new diag"


@pytest.mark.parametrize("manifest", [
    RunManifest("FAIL", "diagnose", failure_log="RuntimeError: probe exploded"),
    RunManifest("OK", "diagnose", d_raw={"p": {"no_value": 1}}),
])
def test_coevolve_reverts_on_bad_dry_run(manifest):
    rec = [{"instruction_id": "I_CODE_DIAG", "reply": {"summary": "s", "content": "new diag"}}]
    out = coevolve(rec, lambda src: manifest)
    assert not out.accepted and out.source == "old diag" and "dry run failed" in out.reason


def test_coevolve_unchanged_source_is_noop():
    rec = [{"instruction_id": "I_CODE_DIAG", "reply": {"summary": "s", "content": "old diag"}}]
    out = coevolve(rec, lambda src: pytest.fail("no dry run expected"))
    assert not out.accepted and "unchanged" in out.reason


# ---------------------------------------------------------------- engine


def mf_records(dim=16):
    recs = [r for r in base_records() if r["instruction_id"] != "I_CODE"]
    code = {"summary": "wider embeddings", "edits": [
        {"path": PIPELINE_ENTRY, "content": pipeline_source("mf", **dict(MF_MODEL, embedding_dim=dim))}]}
    return [{"instruction_id": "I_CODE", "reply": code}] + recs


def make_deps(tmp_path, split, data_dir, records, name="run", retrieval=None):
    cfg = EvolutionConfig(T=2, seed=0, sample_size=4, probe_users=20)
    sb = Sandbox(tmp_path / name / "workspaces", data_dir, cfg.limits)
    return cfg, EvolutionDeps(sb, split, llm(records), tmp_path / name, retrieval)


@pytest.fixture(scope="module")
def mf_run(tmp_path_factory, block_split, block_data_dir):
    tmp = tmp_path_factory.mktemp("evo")
    cfg, deps = make_deps(tmp, block_split, block_data_dir, mf_records())
    a, best, peak = run_evolution(cfg, seed_codebase("mf", **MF_MODEL), deps)
    return tmp, cfg, deps, a, best, peak


def test_run_shape(mf_run):
    tmp, cfg, deps, a, best, peak = mf_run
    assert a.finished and a.completed_iterations == 2
    assert best.id == a.best_id and a.best_test_metrics is not None
    assert a.entries[best.id].score == max(e.score for e in a.entries.values())
    run = tmp / "run"
    for t in range(3):
        assert (run / "iterations" / f"iter_{t:03d}" / "transcript.jsonl").exists()
    kinds = [e["kind"] for e in a.events]
    assert kinds.count("admitted") == 2
    # iteration 2 proposes the same edit again: reproduced candidate, nothing spawned for it
    assert any(e["kind"] == "cache_hit" and e["iteration"] == 2 for e in a.events)
    assert load_run_transcripts(run)


def test_sim_feedback_recorded(mf_run):
    _, _, _, a, _, _ = mf_run
    seed = next(e for e in a.entries.values() if e.iteration == 0)
    assert seed.sim_report["common_failures"][0]["tag"] == "recency_ignored"
    assert seed.sim_report["sample_size"] == 4 and len(seed.critiques) == 4
    assert set(seed.d_raw) == {"embedding_collapse", "ranking_margin", "swap_sensitivity"}


def test_cache_hit_spawns_nothing(mf_run):
    _, cfg, deps, a, _, _ = mf_run
    before = deps.sandbox.spawned
    ev = evaluate_codebase(a.best.candidate, a, deps, cfg, iteration=99)
    assert ev.cached and deps.sandbox.spawned == before
    assert ev.entry is a.best


def test_existing_archive_requires_resume(mf_run):
    _, cfg, deps, _, _, _ = mf_run
    with pytest.raises(EvolutionError, match="resume"):
        run_evolution(cfg, seed_codebase("mf", **MF_MODEL), deps)


def test_resume_matches_uninterrupted(mf_run, block_split, block_data_dir):
    tmp, cfg, _, full, _, _ = mf_run
    _, deps = make_deps(tmp, block_split, block_data_dir, mf_records(), name="resumed")
    part, _, _ = run_evolution(cfg, seed_codebase("mf", **MF_MODEL), deps, stop_after=1)
    assert not part.finished and part.completed_iterations == 1
    _, deps2 = make_deps(tmp, block_split, block_data_dir, mf_records(), name="resumed")
    done, _, _ = run_evolution(cfg, seed_codebase("mf", **MF_MODEL), deps2, resume=True)
    assert done.lineage() == full.lineage()
    assert done.best_test_metrics == full.best_test_metrics


def test_broken_seed_raises_initialization_error(tmp_path, block_split, block_data_dir):
    cfg, deps = make_deps(tmp_path, block_split, block_data_dir, base_records())
    bad = CandidateCodebase({PIPELINE_ENTRY: "raise SystemExit('no')", DIAG_ENTRY: SEED_DIAG_SOURCE})
    with pytest.raises(InitializationError):
        run_evolution(cfg, bad, deps)


def test_needs_llm(tmp_path, block_split, block_data_dir):
    cfg, deps = make_deps(tmp_path, block_split, block_data_dir, [])
    deps.llm = None
    with pytest.raises(EvolutionError):
        run_evolution(cfg, seed_codebase("mf"), deps)


def test_retrieval_docs_reach_bundle(tmp_path, block_split, block_data_dir):
    corpus = OfflineCorpus([("doc-pos", "Sequential recommendation positional encoding", "order matters")])
    cfg, deps = make_deps(tmp_path, block_split, block_data_dir, mf_records(), retrieval=corpus)
    cfg.T = 1
    cfg.simulate = False
    run_evolution(cfg, seed_codebase("mf", **MF_MODEL), deps)
    docs = json.loads((tmp_path / "run" / "iterations" / "iter_001" / "docs.json").read_text())
    assert docs[0]["doc_id"] == "doc-pos"
