"""Dense and lexical search, ranking metrics, and reciprocal rank fusion.

Rankings are strictly score-descending with ascending doc_id as the
tie-break everywhere, which keeps every output deterministic. NDCG uses the
trec-style gain 2^rel - 1 with a log2(rank + 1) discount; BM25 is the Okapi
form with k1=1.2, b=0.75 over lowercase whitespace tokens.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numkernel as nk
from . import retriever as retriever_mod
from .corpus import tokenize
from .retriever import Encoder

RRF_K = 60
RRF_DEPTH = 200

# Qrels: query_id -> {doc_id: integer relevance >= 0}
Qrels = dict[str, dict[str, int]]


@dataclass
class RankedList:
    query_id: str
    items: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for doc_id, _ in self.items:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r} in ranking "
                                 f"for query {self.query_id!r}")
            seen.add(doc_id)
        expected = rank_items(self.items)
        if self.items != expected:
            raise ValueError(f"ranking for query {self.query_id!r} is not sorted "
                             "by descending score with doc_id tie-break")

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]


def rank_items(pairs: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    """Sort (doc_id, score) pairs by descending score, ascending doc_id on ties."""
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def ranked(query_id: str, pairs: Iterable[tuple[str, float]]) -> RankedList:
    return RankedList(query_id, rank_items(pairs))


# ---------------------------------------------------------------------------
# dense search


def dense_search(queries: Sequence[tuple[str, str]], corpus: Sequence[tuple[str, str]],
                 encoder: Encoder, top_k: int = 10) -> list[RankedList]:
    """Cosine search of query-role embeddings against passage-role embeddings."""
    if top_k < 1:
        raise ValueError("top_k must be positive")
    if not corpus:
        return [RankedList(qid, []) for qid, _ in queries]
    doc_ids = [doc_id for doc_id, _ in corpus]
    with nk.no_grad():
        doc_emb = _encode_all([text for _, text in corpus], "passage", encoder)
        query_emb = _encode_all([text for _, text in queries], "query", encoder)
    doc_unit = doc_emb / np.maximum(np.linalg.norm(doc_emb, axis=1, keepdims=True), 1e-12)
    query_unit = query_emb / np.maximum(np.linalg.norm(query_emb, axis=1, keepdims=True),
                                        1e-12)
    scores = query_unit @ doc_unit.T
    out = []
    for row, (qid, _) in enumerate(queries):
        pairs = rank_items(zip(doc_ids, scores[row].tolist()))[:top_k]
        out.append(RankedList(qid, pairs))
    return out


def _encode_all(texts: Sequence[str], role: str, encoder: Encoder,
                batch_size: int = 32) -> np.ndarray:
    rows = []
    for start in range(0, len(texts), batch_size):
        ids = [tokenize(t) for t in texts[start:start + batch_size]]
        rows.append(retriever_mod.encode_batch(ids, role, encoder).data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, encoder.d_embed))


# ---------------------------------------------------------------------------
# BM25


def lexical_tokens(text: str) -> list[str]:
    return text.lower().split()


class Bm25Index:
    """Okapi BM25 inverted index with idf = ln(1 + (N - df + 0.5) / (df + 0.5))."""

    def __init__(self, corpus: Sequence[tuple[str, str]], k1: float = 1.2,
                 b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
        self.doc_len: dict[str, int] = {}
        for doc_id, text in corpus:
            if doc_id in self.doc_len:
                raise ValueError(f"duplicate doc_id {doc_id!r}")
            terms = lexical_tokens(text)
            self.doc_len[doc_id] = len(terms)
            for term, tf in sorted(Counter(terms).items()):
                self.postings[term].append((doc_id, tf))
        for plist in self.postings.values():
            plist.sort()
        self.n_docs = len(self.doc_len)
        self.avg_len = (sum(self.doc_len.values()) / self.n_docs) if self.n_docs else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query: str, doc_id: str) -> float:
        """Brute-force score of one document (the searcher's reference)."""
        total = 0.0
        length = self.doc_len[doc_id]
        for term in sorted(set(lexical_tokens(query))):
            tf = dict(self.postings.get(term, ())).get(doc_id, 0)
            if tf == 0:
                continue
            denom = tf + self.k1 * (1.0 - self.b + self.b * length / self.avg_len)
            total += self.idf(term) * tf * (self.k1 + 1.0) / denom
        return total


def bm25_search(query_id: str, query: str, index: Bm25Index,
                top_k: int = 10) -> RankedList:
    """Score every document containing a query term; unique terms count once."""
    if top_k < 1:
        raise ValueError("top_k must be positive")
    scores: dict[str, float] = defaultdict(float)
    for term in sorted(set(lexical_tokens(query))):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            length = index.doc_len[doc_id]
            denom = tf + index.k1 * (1.0 - index.b + index.b * length / index.avg_len)
            scores[doc_id] += idf * tf * (index.k1 + 1.0) / denom
    pairs = rank_items(scores.items())[:top_k]
    return RankedList(query_id, pairs)


# ---------------------------------------------------------------------------
# metrics


def _dcg(grades: Sequence[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg_at_k(ranking: RankedList, qrels_row: Mapping[str, int], k: int = 10) -> float:
    """DCG of the top k over the ideal DCG; 0 when the query has no relevant docs."""
    if k < 1:
        raise ValueError("k must be positive")
    ideal = sorted((g for g in qrels_row.values() if g > 0), reverse=True)[:k]
    if not ideal:
        return 0.0
    grades = [qrels_row.get(doc_id, 0) for doc_id in ranking.doc_ids()[:k]]
    return _dcg(grades) / _dcg(ideal)


def recall_at_k(ranking: RankedList, qrels_row: Mapping[str, int],
                k: int) -> float | None:
    """Fraction of relevant docs in the top k; None (excluded) with no relevant docs."""
    if k < 1:
        raise ValueError("k must be positive")
    relevant = {doc_id for doc_id, g in qrels_row.items() if g > 0}
    if not relevant:
        return None
    hits = sum(1 for doc_id in ranking.doc_ids()[:k] if doc_id in relevant)
    return hits / len(relevant)


def rrf_fuse(run1: RankedList, run2: RankedList, k: int = RRF_K,
             depth: int = RRF_DEPTH) -> RankedList:
    """score(d) = sum over runs containing d of 1 / (k + rank(d)), rank 1-based.

    Documents missing from a run contribute nothing for it; the fused list is
    re-sorted and truncated to ``depth``.
    """
    if run1.query_id != run2.query_id:
        raise ValueError("fusion requires runs for the same query")
    scores: dict[str, float] = defaultdict(float)
    for run in (run1, run2):
        for rank, doc_id in enumerate(run.doc_ids(), start=1):
            scores[doc_id] += 1.0 / (k + rank)
    return RankedList(run1.query_id, rank_items(scores.items())[:depth])


def evaluate_runs(runs: Mapping[str, RankedList], qrels: Qrels,
                  metrics: Sequence[str]) -> dict:
    """Mean and per-query values for metric names like 'ndcg@10' or 'recall@100'."""
    parsed = [_parse_metric(m) for m in metrics]
    per_query: dict[str, dict[str, float | None]] = {}
    for qid, run in sorted(runs.items()):
        row = qrels.get(qid, {})
        values: dict[str, float | None] = {}
        for name, func, k in parsed:
            values[name] = func(run, row, k)
        per_query[qid] = values
    means: dict[str, float] = {}
    for name, _, _ in parsed:
        defined = [v[name] for v in per_query.values() if v[name] is not None]
        means[name] = sum(defined) / len(defined) if defined else 0.0
    return {"mean": means, "per_query": per_query}


def _parse_metric(spec: str):
    name, _, depth = spec.partition("@")
    if not depth.isdigit():
        raise ValueError(f"metric {spec!r} must look like 'ndcg@10'")
    k = int(depth)
    if name == "ndcg":
        return spec, ndcg_at_k, k
    if name == "recall":
        return spec, recall_at_k, k
    raise ValueError(f"unknown metric {name!r}")


# ---------------------------------------------------------------------------
# file formats


def load_queries(path: str) -> list[tuple[str, str]]:
    queries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            queries.append((str(rec["id"]), rec["text"]))
    return queries


def load_qrels(path: str) -> Qrels:
    qrels: Qrels = defaultdict(dict)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: qrels line needs "
                                 "query_id<TAB>doc_id<TAB>relevance")
            qid, doc_id, grade = parts
            grade_int = int(grade)
            if grade_int < 0:
                raise ValueError(f"{path}:{lineno}: negative relevance grade")
            qrels[qid][doc_id] = grade_int
    return dict(qrels)


def write_run(rankings: Sequence[RankedList], path: str, tag: str = "revela") -> None:
    """TREC 6-column format: qid Q0 docid rank score tag (rank 1-based)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ranking in rankings:
            for rank, (doc_id, score) in enumerate(ranking.items, start=1):
                fh.write(f"{ranking.query_id} Q0 {doc_id} {rank} {score!r} {tag}\n")


def read_run(path: str) -> dict[str, RankedList]:
    rows: dict[str, list[tuple[str, float]]] = defaultdict(list)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 run-file columns")
            qid, _, doc_id, _, score, _ = parts
            rows[qid].append((doc_id, float(score)))
    return {qid: RankedList(qid, rank_items(pairs)) for qid, pairs in rows.items()}
