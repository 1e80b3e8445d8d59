"""Literature retrieval: an offline corpus scored by token overlap, or a live JSON search endpoint."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import httpx

logger = logging.getLogger(__name__)

DEFAULT_TOP_N = 3
SNIPPET_CHARS = 400
_TOKEN = re.compile(r"[a-z0-9]+")
_STOP = frozenset("a an and are as at be by for from in into is it of on or that the this to with".split())


def tokenize(text: str) -> List[str]:
    return [t for t in _TOKEN.findall(text.lower()) if t not in _STOP]


@dataclass
class ResearchQuery:
    text: str
    motivation: str = "exploratory"

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("query text must be non-empty")


@dataclass
class RetrievedDoc:
    doc_id: str
    title: str
    snippet: str
    source: str
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchResult:
    docs: List[RetrievedDoc]
    warning: Optional[str] = None

    def __iter__(self):
        return iter(self.docs)

    def __len__(self):
        return len(self.docs)

    def to_text(self) -> str:
        if not self.docs:
            return "(no documents retrieved)"
        return "\n\n".join(f"[{d.rank}] {d.title} ({d.doc_id})\n{d.snippet}" for d in self.docs)


class OfflineCorpus:
    """Directory with ``manifest.json`` (list of {doc_id, title, path}) and the text files it names."""

    source = "offline"

    def __init__(self, docs: Sequence[Tuple[str, str, str]]):
        self.docs = list(docs)
        self._tf = [Counter(tokenize(title + " " + title + " " + body)) for _, title, body in self.docs]
        n = len(self.docs)
        df = Counter(t for tf in self._tf for t in tf)
        self._idf = {t: math.log((n + 1) / (c + 0.5)) for t, c in df.items()}

    @classmethod
    def from_dir(cls, path) -> "OfflineCorpus":
        root = Path(path)
        manifest = json.loads((root / "manifest.json").read_text())
        docs = []
        for entry in manifest:
            body = (root / entry["path"]).read_text(encoding="utf-8") if entry.get("path") else entry.get("text", "")
            docs.append((str(entry["doc_id"]), entry["title"], body))
        return cls(docs)

    def query(self, q: ResearchQuery, top_n: int) -> List[Tuple[float, str, str, str]]:
        terms = Counter(tokenize(q.text))
        scored = []
        for (doc_id, title, body), tf in zip(self.docs, self._tf):
            s = sum(qc * (1.0 + math.log(tf[t])) * self._idf.get(t, 0.0) for t, qc in terms.items() if tf[t])
            if s > 0:
                scored.append((s, doc_id, title, body))
        scored.sort(key=lambda r: (-r[0], r[1]))
        return scored[:top_n]


class LiveSearch:
    """GET ``<base_url>?q=...&n=...`` returning ``{"results": [{"id", "title", "snippet"}]}``."""

    source = "live"

    def __init__(self, base_url: str, timeout: float = 20.0, transport: Optional[httpx.BaseTransport] = None):
        self.base_url = base_url
        self.client = httpx.Client(timeout=timeout, transport=transport)

    def query(self, q: ResearchQuery, top_n: int) -> List[Tuple[float, str, str, str]]:
        resp = self.client.get(self.base_url, params={"q": q.text, "n": top_n})
        resp.raise_for_status()
        results = resp.json().get("results", [])
        out = []
        for i, r in enumerate(results[:top_n]):
            out.append((float(top_n - i), str(r["id"]), r.get("title", ""), r.get("snippet", "")))
        return out


def search(queries: Sequence[ResearchQuery], top_n: int = DEFAULT_TOP_N, backend=None) -> SearchResult:
    """Run every query, keep at most ``top_n`` hits each, merge and dedupe by doc_id.

    Merge order is (per-query rank, query order, doc_id); ranks are then
    renumbered from 1. Backend errors yield an empty result with a warning.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if backend is None or not queries:
        # retrieval disabled or nothing to ask: planning proceeds on feedback alone
        return SearchResult([])
    hits: List[Tuple[int, int, str, str, str]] = []
    try:
        for qi, q in enumerate(queries):
            for r, (_, doc_id, title, body) in enumerate(backend.query(q, top_n), start=1):
                hits.append((r, qi, doc_id, title, body))
    except (httpx.HTTPError, ValueError, KeyError, OSError) as exc:
        msg = f"retrieval backend failed: {exc}"
        logger.warning(msg)
        return SearchResult([], msg)
    hits.sort(key=lambda h: (h[0], h[1], h[2]))
    seen: Dict[str, RetrievedDoc] = {}
    for _, _, doc_id, title, body in hits:
        if doc_id not in seen:
            seen[doc_id] = RetrievedDoc(doc_id, title, " ".join(body.split())[:SNIPPET_CHARS],
                                        backend.source, len(seen) + 1)
    return SearchResult(list(seen.values()))


def build_backend(kind: str, corpus_dir=None, base_url: Optional[str] = None, timeout: float = 20.0):
    if kind == "none":
        return None
    if kind == "offline":
        if corpus_dir is None:
            raise ValueError("offline retrieval needs a corpus directory")
        return OfflineCorpus.from_dir(corpus_dir)
    if kind == "live":
        if not base_url:
            raise ValueError("live retrieval needs a base_url")
        return LiveSearch(base_url, timeout)
    raise ValueError(f"unknown retrieval backend {kind!r}")
