"""Scripted mock LLM records shared by the evolution, cli and acceptance tests."""

import json
import re

from recevo.seeds import SEED_DIAG_SOURCE, pipeline_source

_REC_BLOCK = re.compile(r"The recommender now shows you this list:\n(.*?)\n\n", re.S)
_ITEM_LINE = re.compile(r"^- ([^:\s]+)", re.M)


def rec_items(prompt):
    m = _REC_BLOCK.search(prompt)
    return _ITEM_LINE.findall(m.group(1)) if m else []


def sim_reply(tags=("recency_ignored",), accept=False, reason="does not follow what I just bought"):
    """I_SIM reply built from the items in the prompt: one verdict per item."""

    def reply(prompt):
        items = rec_items(prompt)
        return json.dumps({
            "verdicts": [{"item": v, "accept": accept, "reason": reason} for v in items],
            "failure_tags": list(tags),
            "critique": "These suggestions ignore my latest purchase.",
        })

    return reply


def no_op_code(path="pipeline.py", content=None):
    return {"summary": "no change", "edits": [] if content is None else [{"path": path, "content": content}]}


def base_records(sim_tags=("recency_ignored",)):
    """Wildcard replies for every instruction; specific records go in front of these."""
    return [
        {"instruction_id": "I_SIM", "reply": sim_reply(sim_tags)},
        {"instruction_id": "I_SUMMARIZE", "reply": "Users complain the list ignores what they did last."},
        {"instruction_id": "I_DIAG", "reply": "The probes point at the sequence encoder."},
        {"instruction_id": "I_PLAN", "reply": {"queries": [
            {"text": "sequential recommendation positional encoding", "motivation": "recency_ignored"}]}},
        {"instruction_id": "I_REPORT", "reply": {"summary": "explore regularization", "modifications": [
            {"target": "pipeline.py", "change": "tune weight decay", "expected_effect": "minor",
             "addresses": []}], "citations": []}},
        {"instruction_id": "I_CODE", "reply": no_op_code()},
        {"instruction_id": "I_ANALYZE", "reply": {"execution_flow": "train then evaluate", "added": [], "removed": [],
                                                  "modified": [], "loss_function": "softmax", "gaps": []}},
        {"instruction_id": "I_PLAN_DIAG", "reply": {"queries": [{"text": "diversity metrics", "motivation": "low_diversity"}]}},
        {"instruction_id": "I_REPORT_DIAG", "reply": {"summary": "keep probes", "modifications": [], "citations": []}},
        {"instruction_id": "I_CODE_DIAG", "reply": {"summary": "unchanged", "content": SEED_DIAG_SOURCE}},
    ]


def positional_fix_records(fixed_config):
    """Propose enabling positional encoding only when DIAG reports order-insensitivity."""
    fixed = pipeline_source("sequential", **fixed_config)
    return [
        {"instruction_id": "I_REPORT", "when": ["Order-insensitive"], "reply": {
            "summary": "add positional encoding to the attention block",
            "modifications": [{"target": "pipeline.py", "change": "enable positional embeddings (use_positional=True)",
                               "expected_effect": "the model can tell which item came last",
                               "addresses": ["swap_sensitivity", "recency_ignored"]}],
            "citations": []}},
        {"instruction_id": "I_CODE", "when": ["add positional encoding"], "reply": {
            "summary": "enable positional embeddings", "edits": [{"path": "pipeline.py", "content": fixed}]}},
    ]


DIVERSITY_PROBE_SOURCE = SEED_DIAG_SOURCE.replace(
    "    return out\n",
    '''    recs = [model.score_all(u, split.train[u]) for u in users]
    cats = []
    for u, s in zip(users, recs):
        seen = set(split.train[u])
        top = [model.items[i] for i in s.argsort()[::-1] if model.items[i] not in seen][:10]
        cats.append(len({categories[v] for v in top}) / max(1, len(top)))
    from recevo.diagnosis import ProbeResult
    out.append(ProbeResult("topk_diversity", sum(cats) / len(cats),
                           metadata={"threshold": {"warn": 0.3, "direction": "below",
                                                   "claim": "Low top-k category diversity {value:.2f}"}}))
    return out
''',
)

CRASHING_DIAG_SOURCE = SEED_DIAG_SOURCE.replace(
    "    return out\n", '    raise RuntimeError("probe exploded")\n'
)


def diag_edit_records(source):
    return [
        {"instruction_id": "I_ANALYZE", "reply": {"execution_flow": "train then evaluate", "added": [],
                                                  "removed": [], "modified": ["train"], "loss_function": "softmax",
                                                  "gaps": [{"component": "ModelConfig", "reason": "no probe"}]}},
        {"instruction_id": "I_REPORT_DIAG", "reply": {"summary": "add a probe", "modifications": [
            {"target": "diagnosis.py", "change": "add top-k category diversity", "expected_effect": "measure boredom",
             "addresses": ["low_diversity"]}], "citations": []}},
        {"instruction_id": "I_CODE_DIAG", "reply": {"summary": "new probe", "content": source}},
    ]
