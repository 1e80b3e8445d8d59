import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from recevo.diagnosis import (
    COLLAPSE,
    MARGIN,
    SWAP,
    DiagnosisError,
    DiagnosisReport,
    MarginRow,
    ProbeResult,
    Threshold,
    assemble_d_raw,
    build_margin_table,
    dumps_d_raw,
    interpret_diagnosis,
    loads_d_raw,
    probe_embedding_collapse,
    probe_ranking_margin,
    probe_swap_sensitivity,
)
from recevo.llm_gateway import Gateway, MockBackend
from recevo.simulator import SimulatorReport


def brute_collapse(X):
    sims = []
    for i, j in itertools.combinations(range(len(X)), 2):
        a, b = X[i], X[j]
        sims.append(sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))))
    return sum(sims) / len(sims)


# ---------------------------------------------------------------- collapse


def test_collapse_examples():
    assert probe_embedding_collapse(np.tile([[1.0, 2.0]], (5, 1))).value == pytest.approx(1.0, abs=1e-12)
    assert probe_embedding_collapse(np.eye(2)).value == 0.0
    X = np.array([[1, 0], [0, 1], [1 / math.sqrt(2), 1 / math.sqrt(2)]])
    assert probe_embedding_collapse(X).value == pytest.approx((0 + 2 * 0.70710678) / 3, abs=1e-6)


def test_collapse_errors_and_zero_rows():
    with pytest.raises(DiagnosisError, match="insufficient"):
        probe_embedding_collapse(np.ones((1, 3)))
    with pytest.raises(DiagnosisError, match="insufficient"):
        probe_embedding_collapse(np.array([[0.0, 0.0], [1.0, 0.0]]))
    r = probe_embedding_collapse(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]))
    assert r.metadata["zero_norm_skipped"] == 1
    assert r.value == pytest.approx(1 / math.sqrt(2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 5)), elements=st.floats(0.1, 3)),
       arrays(np.float64, 12, elements=st.floats(0.01, 100)))
def test_collapse_oracle_and_scale_invariance(X, scales):
    r = probe_embedding_collapse(X)
    assert abs(r.value - brute_collapse(X.tolist())) < 1e-9
    scaled = X * scales[: len(X), None]
    assert abs(probe_embedding_collapse(scaled).value - r.value) < 1e-9


def test_collapse_sampling_is_seeded():
    X = np.random.default_rng(0).normal(size=(600, 8))
    a = probe_embedding_collapse(X, sample_size=100, seed=1)
    assert a.value == probe_embedding_collapse(X, sample_size=100, seed=1).value
    assert a.metadata["sampled"] == 100


# ---------------------------------------------------------------- margin


def test_margin_examples():
    r = probe_ranking_margin([MarginRow("u", "v", "w", 2.0, 0.5)], {"v": "c"})
    assert r.value == 1.5
    r = probe_ranking_margin([MarginRow("u", f"v{i}", "w", 1.0, 1.0) for i in range(5)], {})
    assert r.value == 0.0
    with pytest.raises(ValueError):
        probe_ranking_margin([MarginRow("u", "v", "w", 1, 0)], {}, low_fraction=1.0)
    with pytest.raises(DiagnosisError):
        probe_ranking_margin([], {})


def test_margin_planted_category():
    rng = np.random.default_rng(0)
    cats = ["Books", "Computers", "Toys", "Music"]
    rows, attrs = [], {}
    for i in range(500):
        cat = cats[i % 4]
        v = f"v{i}"
        attrs[v] = cat
        pos = rng.normal(2.0, 0.3) if cat != "Computers" else rng.normal(-1.0, 0.3)
        rows.append(MarginRow(f"u{i % 50}", v, f"n{i}", pos, rng.normal(0, 0.1)))
    r = probe_ranking_margin(rows, attrs, low_fraction=0.05)
    assert r.core_findings[0][0] == "Computers"
    assert sum(c for _, c in r.core_findings) == 25


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=200))
def test_margin_double_loop_oracle(pairs):
    rows = [MarginRow(f"u{i % 7}", f"v{i}", f"n{i}", p, n) for i, (p, n) in enumerate(pairs)]
    r = probe_ranking_margin(rows, {})
    total, count = 0.0, 0
    for u in sorted({row.user for row in rows}):
        for row in rows:
            if row.user == u:
                total += row.pos_score - row.neg_score
                count += 1
    assert abs(r.value - total / count) < 1e-9


class DotModel:
    def __init__(self, items, dim=3, seed=0):
        rng = np.random.default_rng(seed)
        self.items = list(items)
        self.item_embeddings = rng.normal(size=(len(items), dim))
        self.user_vec = rng.normal(size=dim)

    def score(self, user, context, candidates):
        idx = [self.items.index(v) for v in candidates]
        return self.item_embeddings[idx] @ self.user_vec


def test_build_margin_table_negatives_outside_history():
    items = [f"v{i}" for i in range(10)]
    m = DotModel(items)
    hist = {"u": ["v0", "v1", "v2"]}
    table = build_margin_table(m, ["u"], hist, {"u": items[:6]}, items, seed=0)
    assert [r.positive for r in table] == ["v0", "v1", "v2"]
    assert all(r.negative not in items[:6] for r in table)
    assert table == build_margin_table(m, ["u"], hist, {"u": items[:6]}, items, seed=0)


# ---------------------------------------------------------------- swap


def bag_scorer(n_items=20, seed=0):
    W = np.random.default_rng(seed).normal(size=(n_items, n_items))
    return lambda ctx: W[sorted(ctx)].sum(axis=0)


def positional_scorer(n_items=20, seed=0):
    W = np.random.default_rng(seed).normal(size=(n_items, n_items))

    def f(ctx):
        return sum((i + 1) ** 2 * W[c] for i, c in enumerate(ctx))
    return f


def test_swap_zero_for_bag_model():
    seqs = [[1, 2, 3], [4, 5], [7, 8, 9, 10]]
    r = probe_swap_sensitivity(bag_scorer(), seqs, k=5)
    assert r.value == {"swap_sensitivity": 0.0, "logit_delta_swap": 0.0}


def test_swap_matches_recomputation():
    f = positional_scorer()
    seqs = [[1, 2, 3], [4, 5], [7, 8, 9, 10], [11, 0]]
    k = 5
    r = probe_swap_sensitivity(f, [(s, s[0]) for s in seqs], k=k)
    changed, deltas = [], []
    for s in seqs:
        b, a = f(s), f(s[:-2] + [s[-1], s[-2]])
        tb = list(np.argsort(-b, kind="stable")[:k])
        ta = list(np.argsort(-a, kind="stable")[:k])
        changed.append(len(set(tb) - set(ta)) / k)
        deltas.append(abs(b[s[0]] - a[s[0]]))
    assert r.value["swap_sensitivity"] == pytest.approx(np.mean(changed), abs=1e-12)
    assert r.value["logit_delta_swap"] == pytest.approx(np.mean(deltas), abs=1e-12)
    assert r.value["swap_sensitivity"] > 0


def test_swap_single_sequence_top1_unchanged():
    scores = np.arange(10, dtype=float)

    def f(ctx):
        out = scores.copy()
        out[0] += 0.001 * ctx[-1]  # order matters, top item does not move
        return out

    r = probe_swap_sensitivity(f, [[1, 2]], k=1)
    assert r.value["swap_sensitivity"] == 0.0


def test_swap_skips_short_and_passes_keys():
    calls = []

    def f(ctx, user):
        calls.append(user)
        return np.zeros(5)

    r = probe_swap_sensitivity(f, [(["a"], "b", "u1"), (["a", "b"], "c", "u2")], k=2,
                               item_index={v: i for i, v in enumerate("abcde")}, metadata={"model_kind": "sequential"})
    assert r.metadata["skipped_short"] == 1 and r.metadata["n_sequences"] == 1
    assert r.metadata["model_kind"] == "sequential"
    assert calls == ["u2", "u2"]
    with pytest.raises(DiagnosisError):
        probe_swap_sensitivity(f, [(["a"], "b", "u")])


# ---------------------------------------------------------------- D_raw


def test_assemble_and_round_trip():
    probes = [ProbeResult(COLLAPSE, 0.5), ProbeResult(SWAP, {"swap_sensitivity": 0.1, "logit_delta_swap": 0.2})]
    doc = assemble_d_raw(probes)
    assert set(doc) == {COLLAPSE, SWAP}
    assert loads_d_raw(dumps_d_raw(doc)) == doc
    assert ProbeResult.from_dict(doc[SWAP]) == probes[1]
    with pytest.raises(DiagnosisError, match="duplicate"):
        assemble_d_raw([ProbeResult(COLLAPSE, 0.1), ProbeResult(COLLAPSE, 0.2)])
    with pytest.raises(DiagnosisError):
        assemble_d_raw([])
    with pytest.raises(DiagnosisError):
        ProbeResult("x", float("nan"))
    with pytest.raises(DiagnosisError):
        ProbeResult("x", 1.0, core_findings=[("c", -1)])


# ---------------------------------------------------------------- interpretation


def d_raw(collapse=0.2, swap=0.5, kind="sequential", margin=0.3):
    return assemble_d_raw([
        ProbeResult(COLLAPSE, collapse),
        ProbeResult(MARGIN, margin, core_findings=[("Computers", 4)]),
        ProbeResult(SWAP, {"swap_sensitivity": swap, "logit_delta_swap": swap}, metadata={"model_kind": kind}),
    ])


def sim(*tags):
    return SimulatorReport([(t, 0.5, []) for t in tags], "n", 10)


def test_collapse_critical():
    r = interpret_diagnosis(d_raw(collapse=0.98))
    f = [f for f in r.findings if COLLAPSE in f.probes][0]
    assert f.severity == "critical" and "collapse" in f.claim.lower()


def test_untestable_tag():
    r = interpret_diagnosis(d_raw(), sim_report=sim("low_diversity"))
    assert r.verification == {"low_diversity": "untestable"}


def test_order_insensitive_on_sequential_model():
    r = interpret_diagnosis(d_raw(swap=0.0), sim_report=sim("recency_ignored"))
    f = [f for f in r.findings if SWAP in f.probes][0]
    assert f.severity == "warn" and f.claim.startswith("Order-insensitive")
    assert r.verification["recency_ignored"] == "confirmed"


def test_swap_rule_ignored_for_mf():
    r = interpret_diagnosis(d_raw(swap=0.0, kind="mf"), sim_report=sim("recency_ignored"))
    assert not any(SWAP in f.probes for f in r.findings)
    assert r.verification["recency_ignored"] == "untestable"


def test_refuted_claim_and_margin_core():
    r = interpret_diagnosis(d_raw(swap=0.4, margin=-0.2), sim_report=sim("recency_ignored", "category_mismatch"))
    assert r.verification == {"recency_ignored": "refuted", "category_mismatch": "confirmed"}
    f = [f for f in r.findings if MARGIN in f.probes][0]
    assert "Computers" in f.claim


def test_probe_supplied_threshold():
    doc = d_raw()
    doc["topk_diversity"] = ProbeResult("topk_diversity", 0.1, metadata={
        "threshold": {"warn": 0.3, "direction": "below", "claim": "Low diversity {value:.2f}"}}).to_dict()
    r = interpret_diagnosis(doc, sim_report=sim("low_diversity"))
    assert r.verification["low_diversity"] == "confirmed"
    assert any(f.claim == "Low diversity 0.10" for f in r.findings)


def test_llm_only_touches_narrative():
    good = Gateway(MockBackend([{"instruction_id": "I_DIAG", "reply": "the encoder ignores order"}]))
    broken = Gateway(MockBackend([]))
    a = interpret_diagnosis(d_raw(swap=0.0), llm=good)
    b = interpret_diagnosis(d_raw(swap=0.0), llm=broken)
    c = interpret_diagnosis(d_raw(swap=0.0))
    assert a.findings == b.findings == c.findings
    assert a.narrative == "the encoder ignores order" and not a.flagged
    assert b.flagged and b.narrative == ""
    assert DiagnosisReport.from_dict(a.to_dict()) == a
    assert "Order-insensitive" in a.to_text()


def test_threshold_directions():
    above = Threshold(0.8, 0.9, "above")
    assert [above.severity(v) for v in (0.5, 0.85, 0.95)] == ["info", "warn", "critical"]
    below = Threshold(0.01, None, "below")
    assert [below.severity(v) for v in (0.0, 0.5)] == ["warn", "info"]
