"""Adaptive query reasoning for dense retrieval.

A small embedding-space mapper imitates LLM query rewriting; a similarity
router sends each query either through that mapper or to a real LLM rewrite.
"""

from .errors import AdaqrError, DataError, ServiceError
from .reasoner import MapperParams, TrainConfig, forward, init_params, train_stage
from .retrieval import cosine_similarity, evaluate, ndcg_at_k, retrieve_topk
from .router import Anchor, RouterConfig, build_anchor, mean_resultant_length, route
from .store import (
    Corpus,
    Document,
    EmbeddingPairSet,
    QueryRecord,
    RelevanceJudgments,
    load_corpus,
    load_qrels,
    load_query_collection,
)

__version__ = "0.1.0"

__all__ = [
    "AdaqrError", "DataError", "ServiceError",
    "MapperParams", "TrainConfig", "forward", "init_params", "train_stage",
    "cosine_similarity", "evaluate", "ndcg_at_k", "retrieve_topk",
    "Anchor", "RouterConfig", "build_anchor", "mean_resultant_length", "route",
    "Corpus", "Document", "EmbeddingPairSet", "QueryRecord", "RelevanceJudgments",
    "load_corpus", "load_qrels", "load_query_collection",
]
