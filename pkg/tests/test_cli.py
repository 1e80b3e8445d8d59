import json

import pytest

from recevo.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from recevo.dataset import apply_five_core, leave_last_out_split, load_prepared, write_attributes, write_interactions
from recevo.seeds import pipeline_source
from recevo.synthetic import block_dataset
from scripted import base_records

MODEL = {"embedding_dim": 8, "max_epochs": 15, "learning_rate": 0.05}


@pytest.fixture(scope="module")
def raw_files(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("raw")
    d = block_dataset()
    write_interactions(d, tmp / "interactions.tsv")
    write_attributes(d.attributes, tmp / "items.tsv")
    return tmp


@pytest.fixture(scope="module")
def prepared(raw_files, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep") / "data"
    code = main(["prepare", "--interactions", str(raw_files / "interactions.tsv"),
                 "--attributes", str(raw_files / "items.tsv"), "--out", str(out)])
    assert code == EXIT_OK
    return out


def write_script(path, records):
    def plain(r):
        # callables cannot be serialized; the file script uses a static I_SIM reply
        return {k: v for k, v in r.items() if not callable(v)}

    path.write_text(json.dumps([plain(r) for r in records if not callable(r.get("reply"))]))
    return path


def test_prepare(prepared, raw_files):
    split = load_prepared(prepared)
    direct = leave_last_out_split(apply_five_core(block_dataset()), 0)
    assert split.train == direct.train and split.test == direct.test
    assert split.test_negatives == direct.test_negatives
    again = ["prepare", "--interactions", str(raw_files / "interactions.tsv"), "--out", str(prepared)]
    assert main(again) == EXIT_CONFIG
    assert main(again + ["--force", "--attributes", str(raw_files / "items.tsv")]) == EXIT_OK


def test_prepare_missing_or_bad_input(tmp_path):
    assert main(["prepare", "--interactions", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "bad.tsv").write_text("u1\ti1\tnot-a-time\t5\n")
    assert main(["prepare", "--interactions", str(tmp_path / "bad.tsv"), "--out", str(tmp_path / "o2")]) == EXIT_DATA


def test_evaluate(prepared, tmp_path, capsys):
    out = tmp_path / "eval"
    args = ["evaluate", "--data", str(prepared), "--out", str(out), "--seed-kind", "mf", "--model", json.dumps(MODEL)]
    assert main(args) == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0 <= metrics["hr_at_5"] <= 1 and metrics["phase"] == "validation"
    assert "HR@5" in capsys.readouterr().out
    assert main(args) == EXIT_CONFIG
    assert main(args + ["--force", "--split", "test"]) == EXIT_OK
    assert json.loads((out / "metrics.json").read_text())["phase"] == "test"


def test_evaluate_errors(prepared, tmp_path):
    assert main(["evaluate", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--seed-kind", "mf"]) == EXIT_DATA
    assert main(["evaluate", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["evaluate", "--data", str(prepared), "--out", str(tmp_path / "o2"), "--candidate",
                 str(tmp_path / "missing")]) == EXIT_CONFIG
    bad = tmp_path / "cand"
    bad.mkdir()
    (bad / "pipeline.py").write_text("raise SystemExit(1)")
    (bad / "diagnosis.py").write_text("")
    assert main(["evaluate", "--data", str(prepared), "--out", str(tmp_path / "o3"), "--candidate", str(bad)]) == 4


def test_diagnose(prepared, tmp_path):
    out = tmp_path / "diag"
    assert main(["diagnose", "--data", str(prepared), "--out", str(out), "--seed-kind", "mf",
                 "--model", json.dumps(MODEL)]) == EXIT_OK
    d_raw = json.loads((out / "d_raw.json").read_text())
    assert {"embedding_collapse", "ranking_margin", "swap_sensitivity"} <= set(d_raw)
    assert "findings" in json.loads((out / "r_diag.json").read_text())


def test_simulate(prepared, tmp_path):
    reply = {"verdicts": [], "failure_tags": ["popularity_bias"], "critique": "all blockbusters"}
    script = write_script(tmp_path / "s.json", [{"instruction_id": "I_SIM", "reply": reply}] + base_records())
    out = tmp_path / "sim"
    code = main(["simulate", "--data", str(prepared), "--out", str(out), "--seed-kind", "mf",
                 "--model", json.dumps(MODEL), "--gateway-script", str(script), "--users", "3"])
    assert code == EXIT_OK
    r = json.loads((out / "r_sim.json").read_text())
    assert r["sample_size"] == 3
    assert len((out / "critiques.jsonl").read_text().splitlines()) == 3


def test_simulate_needs_gateway(prepared, tmp_path):
    assert main(["simulate", "--data", str(prepared), "--out", str(tmp_path / "o"), "--seed-kind", "mf"]) == EXIT_CONFIG


def evolve_config(tmp_path, prepared, **evolution):
    records = [r for r in base_records() if r["instruction_id"] not in ("I_SIM", "I_CODE")]
    records.insert(0, {"instruction_id": "I_CODE", "reply": {"summary": "wider embeddings", "edits": [
        {"path": "pipeline.py", "content": pipeline_source("mf", **dict(MODEL, embedding_dim=16))}]}})
    write_script(tmp_path / "script.json", records)
    cfg = {"data_dir": str(prepared), "out_dir": "run", "seed": {"kind": "mf", "model": MODEL},
           "evolution": dict({"T": 2, "simulate": False, "probe_users": 20}, **evolution),
           "gateway": {"provider": "mock", "script_path": "script.json"}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path / "cfg.json"


def test_evolve_and_report(prepared, tmp_path, capsys):
    cfg = evolve_config(tmp_path, prepared)
    assert main(["evolve", "--config", str(cfg)]) == EXIT_OK
    assert "peak iteration" in capsys.readouterr().out
    run = tmp_path / "run"
    assert (run / "archive.json").exists() and (run / "config.json").exists()
    assert main(["evolve", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["report", "--run", str(run)]) == EXIT_OK
    for name in ("trajectory", "sim_prevalence", "diag_findings", "lineage", "summary"):
        assert (run / "report" / f"{name}.md").exists()
    summary = (run / "report" / "summary.md").read_text()
    assert "status: complete" in summary and "test: HR@5" in summary
    traj = (run / "report" / "trajectory.md").read_text()
    assert "| 0 | seed |" in traj and "| 2 | cached |" in traj
    assert main(["evolve", "--config", str(cfg), "--force", "--T", "1"]) == EXIT_OK
    assert json.loads((run / "archive.json").read_text())["completed_iterations"] == 1


def test_partial_run_and_resume(prepared, tmp_path):
    cfg = evolve_config(tmp_path, prepared)
    assert main(["evolve", "--config", str(cfg), "--stop-after", "1"]) == EXIT_OK
    assert main(["report", "--run", str(tmp_path / "run")]) == EXIT_OK
    assert "PARTIAL RUN" in (tmp_path / "run" / "report" / "summary.md").read_text()
    assert main(["evolve", "--config", str(cfg), "--resume"]) == EXIT_OK
    main(["report", "--run", str(tmp_path / "run")])
    assert "PARTIAL RUN" not in (tmp_path / "run" / "report" / "summary.md").read_text()


def test_evolve_config_errors(prepared, tmp_path):
    assert main(["evolve", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["evolve", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    (tmp_path / "extra.json").write_text(json.dumps({"data_dir": "d", "out_dir": "o", "colour": "red"}))
    assert main(["evolve", "--config", str(tmp_path / "extra.json")]) == EXIT_CONFIG
    cfg = evolve_config(tmp_path, prepared, T=0)
    assert main(["evolve", "--config", str(cfg)]) == EXIT_CONFIG
    cfg = evolve_config(tmp_path, prepared)
    assert main(["evolve", "--config", str(cfg), "--resume"]) == EXIT_CONFIG
    doc = json.loads(cfg.read_text())
    del doc["gateway"]
    cfg.write_text(json.dumps(doc))
    assert main(["evolve", "--config", str(cfg)]) == EXIT_CONFIG


def test_report_missing_run(tmp_path):
    assert main(["report", "--run", str(tmp_path / "nope")]) == EXIT_DATA
