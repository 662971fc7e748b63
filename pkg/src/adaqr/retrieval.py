"""Exact dense retrieval and nDCG evaluation."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, DimensionMismatchError
from .store import Corpus, Document, RelevanceJudgments

log = logging.getLogger(__name__)

SIMILARITIES = ("cosine", "dot")


@dataclass(frozen=True)
class RankedList:
    query_id: str
    items: tuple[tuple[str, float], ...]

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]


@dataclass
class EvalReport:
    per_query: dict[str, float]
    mean_ndcg: float
    k: int
    per_tag: dict[str, float] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mean_ndcg": self.mean_ndcg,
            "num_queries": len(self.per_query),
            "num_excluded": len(self.excluded),
            "excluded": list(self.excluded),
            "per_tag": dict(sorted(self.per_tag.items())),
            "per_query": dict(sorted(self.per_query.items())),
        }

    def to_text(self) -> str:
        lines = [
            f"k = {self.k}",
            f"mean_ndcg = {self.mean_ndcg:.6f}",
            f"num_queries = {len(self.per_query)}",
            f"num_excluded = {len(self.excluded)}",
        ]
        for tag, v in sorted(self.per_tag.items()):
            lines.append(f"ndcg[{tag or '-'}] = {v:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path_prefix) -> None:
        """Write ``<prefix>.txt`` and ``<prefix>.json``."""
        with open(f"{path_prefix}.txt", "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(f"{path_prefix}.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dims differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _as_corpus(corpus) -> Corpus:
    return corpus if isinstance(corpus, Corpus) else Corpus(corpus)


def score_corpus(query_embedding, corpus: Corpus, similarity: str = "cosine") -> np.ndarray:
    """Similarity of the query against every document, in corpus order."""
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.ndim != 1 or q.size != corpus.dim:
        raise DimensionMismatchError(f"query dim {q.size} != corpus dim {corpus.dim}")
    if similarity == "cosine":
        n = np.linalg.norm(q)
        if n == 0:
            raise DataError("cosine similarity undefined for a zero-norm query")
        # row-wise reduction keeps each score independent of row position
        return (corpus.unit_matrix() * (q / n)).sum(axis=1)
    if similarity == "dot":
        return (corpus.matrix * q).sum(axis=1)
    raise ValueError(f"unknown similarity {similarity!r}")


def retrieve_topk(
    query_embedding,
    corpus: Corpus | Sequence[Document],
    k: int,
    similarity: str = "cosine",
    query_id: str = "",
) -> RankedList:
    """Exhaustive top-k; equal scores are ordered by ascending doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    corpus = _as_corpus(corpus)
    if len(corpus) == 0:
        return RankedList(query_id, ())
    scores = score_corpus(query_embedding, corpus, similarity)
    n = scores.size
    if k < n:
        # keep every row tied with the k-th best so the tie-break sees them all
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    ids = corpus.ids
    order = sorted(cand.tolist(), key=lambda i: (-scores[i], ids[i]))[:k]
    return RankedList(query_id, tuple((ids[i], float(scores[i])) for i in order))


def retrieve_batch(
    queries: Mapping[str, np.ndarray],
    corpus: Corpus,
    k: int,
    similarity: str = "cosine",
    workers: int = 1,
) -> list[RankedList]:
    """Retrieve for many queries; output order follows ``queries``."""
    items = list(queries.items())

    def one(item):
        qid, e = item
        return retrieve_topk(e, corpus, k, similarity, query_id=qid)

    if workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, items))


def _dcg(grades: Sequence[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades))


def ideal_dcg(judgments: RelevanceJudgments, query_id: str, k: int) -> float:
    grades = sorted(judgments.grades(query_id).values(), reverse=True)[:k]
    return _dcg(grades)


def ndcg_at_k(ranked: RankedList, judgments: RelevanceJudgments, k: int) -> float:
    """nDCG@k with exponential gain; unjudged documents count as grade 0.

    The ideal ordering is drawn from every judged document of the query. A
    query whose judgments are all zero scores 0.0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if ranked.query_id not in judgments:
        raise DataError(f"query {ranked.query_id!r} has no relevance judgments")
    grades = judgments.grades(ranked.query_id)
    idcg = ideal_dcg(judgments, ranked.query_id, k)
    if idcg == 0:
        return 0.0
    dcg = _dcg([grades.get(d, 0) for d, _ in ranked.items[:k]])
    return dcg / idcg


def evaluate(
    ranked_lists: Sequence[RankedList],
    judgments: RelevanceJudgments,
    k: int = 10,
    tags: Mapping[str, str] | None = None,
) -> EvalReport:
    per_query: dict[str, float] = {}
    excluded: list[str] = []
    for rl in ranked_lists:
        if rl.query_id not in judgments:
            raise DataError(f"query {rl.query_id!r} has no relevance judgments")
        if ideal_dcg(judgments, rl.query_id, k) == 0:
            excluded.append(rl.query_id)
            continue
        per_query[rl.query_id] = ndcg_at_k(rl, judgments, k)
    if excluded:
        log.warning("excluded %d queries with no relevant documents", len(excluded))
    if not per_query:
        raise DataError("no evaluable queries")
    mean = math.fsum(per_query.values()) / len(per_query)
    per_tag: dict[str, float] = {}
    if tags is not None:
        buckets: dict[str, list[float]] = {}
        for qid, v in per_query.items():
            buckets.setdefault(tags.get(qid, ""), []).append(v)
        per_tag = {t: math.fsum(vs) / len(vs) for t, vs in buckets.items()}
    return EvalReport(per_query, mean, k, per_tag, excluded)


def write_run(ranked_lists: Sequence[RankedList], path, run_tag: str = "adaqr") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rl in ranked_lists:
            for rank, (did, score) in enumerate(rl.items, start=1):
                fh.write(f"{rl.query_id} Q0 {did} {rank} {score:.8f} {run_tag}\n")


def read_run(path) -> list[RankedList]:
    runs: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{line_no}: expected 6 columns")
            qid, _, did, rank, score, _ = parts
            runs.setdefault(qid, []).append((int(rank), did, float(score)))
    return [
        RankedList(qid, tuple((d, s) for _, d, s in sorted(rows)))
        for qid, rows in runs.items()
    ]
