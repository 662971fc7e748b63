"""Oracle-anchor routing between the dense reasoner and the LLM path.

Also hosts the embedding-shift diagnostics: mean resultant length of the
original -> reasoned shift directions, and a 2-D PCA arrow export.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    EmptyOracleSetError,
    MissingRewriteError,
    ZeroShiftError,
)
from .reasoner import MapperParams, forward
from .store import EmbeddingPairSet, QueryRecord, as_embedding

log = logging.getLogger(__name__)

DENSE = "dense"
LLM = "llm"

# thresholds reported per retriever family
TAU_PROFILES = {
    "bge-large": 0.75,
    "bge-m3": 0.70,
    "reasonir-8b": 0.70,
    "qwen3-embedding-0.6b": 0.60,
    "qwen3-embedding-4b": 0.60,
}

ALWAYS_DENSE = "always-dense"
ALWAYS_LLM = "always-llm"


@dataclass(frozen=True, eq=False)
class Anchor:
    p: np.ndarray
    member_ids: tuple[str, ...]
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.member_ids:
            raise EmptyOracleSetError("anchor needs at least one member")

    @property
    def dim(self) -> int:
        return int(self.p.size)


@dataclass(frozen=True)
class RouterConfig:
    """``mode`` is ``threshold`` (compare to ``tau``) or one of the sentinels."""

    tau: float = 0.70
    similarity: str = "cosine"
    mode: str = "threshold"

    def __post_init__(self):
        if self.mode not in ("threshold", ALWAYS_DENSE, ALWAYS_LLM):
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.mode == "threshold" and self.similarity == "cosine" and not -1.0 <= self.tau <= 1.0:
            raise ValueError(f"cosine tau must lie in [-1, 1], got {self.tau}")

    @classmethod
    def parse(cls, spec: str | float, similarity: str = "cosine") -> "RouterConfig":
        """Accept a number, a retriever profile name, or a sentinel mode."""
        if isinstance(spec, (int, float)):
            return cls(float(spec), similarity)
        s = str(spec).strip().lower()
        if s in (ALWAYS_DENSE, ALWAYS_LLM):
            return cls(0.0, similarity, s)
        if s in TAU_PROFILES:
            return cls(TAU_PROFILES[s], similarity)
        try:
            return cls(float(s), similarity)
        except ValueError:
            raise ValueError(
                f"tau must be a number, one of {sorted(TAU_PROFILES)}, "
                f"{ALWAYS_DENSE!r} or {ALWAYS_LLM!r}; got {spec!r}"
            ) from None

    def label(self) -> str:
        return self.mode if self.mode != "threshold" else f"{self.tau:g}"


@dataclass(frozen=True)
class RoutingDecision:
    query_id: str
    path: str
    similarity: float
    tau: float | None = None

    def to_dict(self) -> dict:
        sim = None if math.isnan(self.similarity) else self.similarity
        return {"id": self.query_id, "similarity": sim, "tau": self.tau, "path": self.path}


def mean_resultant_length(pairs: EmbeddingPairSet) -> float:
    shifts = pairs.reasoned - pairs.originals
    norms = np.linalg.norm(shifts, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroShiftError(int(zero[0]))
    units = shifts / norms[:, None]
    return float(np.linalg.norm(units.sum(axis=0)) / len(pairs))


def shift_norm_stats(pairs: EmbeddingPairSet) -> dict[str, float]:
    norms = np.linalg.norm(pairs.reasoned - pairs.originals, axis=1)
    return {
        "count": int(norms.size),
        "mean": float(norms.mean()),
        "std": float(norms.std()),
        "min": float(norms.min()),
        "median": float(np.median(norms)),
        "max": float(norms.max()),
    }


def build_oracle_set(
    per_query_dr_scores: Mapping[str, float],
    per_query_llm_scores: Mapping[str, float],
    epsilon: float = 0.0,
) -> list[str]:
    """Queries where the dense path scores within ``epsilon`` of the LLM path."""
    if set(per_query_dr_scores) != set(per_query_llm_scores):
        raise DataError("dense and LLM score maps cover different query ids")
    members = [
        q
        for q in sorted(per_query_dr_scores)
        if per_query_dr_scores[q] >= per_query_llm_scores[q] - epsilon
    ]
    if not members:
        raise EmptyOracleSetError("no query where the dense reasoner matches the LLM path")
    return members


def build_anchor(
    queries: Sequence[QueryRecord], oracle_set: Sequence[str], epsilon: float = 0.0
) -> Anchor:
    """Mean of the members' original embeddings."""
    if not oracle_set:
        raise EmptyOracleSetError("oracle set is empty")
    by_id = {q.id: q for q in queries}
    rows = []
    for qid in oracle_set:
        q = by_id.get(qid)
        if q is None:
            raise DataError(f"oracle member {qid!r} not among the queries")
        if q.embedding is None:
            raise DataError(f"oracle member {qid!r} has no original embedding")
        rows.append(q.embedding)
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise DimensionMismatchError(f"oracle members have mixed dims {sorted(dims)}")
    p = np.mean(np.vstack(rows), axis=0)
    return Anchor(as_embedding(p), tuple(oracle_set), float(epsilon))


def similarity(e_q, anchor: Anchor, kind: str = "cosine") -> float:
    e = np.asarray(e_q, dtype=np.float64)
    if e.shape != anchor.p.shape:
        raise DimensionMismatchError(f"query dim {e.size} != anchor dim {anchor.dim}")
    dot = float(np.dot(e, anchor.p))
    if kind == "dot":
        return dot
    denom = float(np.linalg.norm(e) * np.linalg.norm(anchor.p))
    if denom == 0:
        raise DataError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(dot / denom, -1.0, 1.0))


def route(e_q, anchor: Anchor, config: RouterConfig, query_id: str = "") -> RoutingDecision:
    sim = similarity(e_q, anchor, config.similarity)
    if config.mode == ALWAYS_DENSE:
        return RoutingDecision(query_id, DENSE, sim, None)
    if config.mode == ALWAYS_LLM:
        return RoutingDecision(query_id, LLM, sim, None)
    path = DENSE if sim >= config.tau else LLM
    return RoutingDecision(query_id, path, sim, config.tau)


def resolve_embedding(
    decision: RoutingDecision,
    query: QueryRecord,
    mapper: MapperParams,
    llm_embedding_source: Callable[[QueryRecord], np.ndarray] | None = None,
) -> np.ndarray:
    """The embedding handed to retrieval for a routed query."""
    if decision.path == DENSE:
        if query.embedding is None:
            raise DataError(f"query {query.id!r} has no original embedding")
        return forward(mapper, query.embedding)
    if query.reasoned_embedding is not None:
        out = query.reasoned_embedding
    elif llm_embedding_source is not None:
        out = np.asarray(llm_embedding_source(query), dtype=np.float64)
    else:
        raise MissingRewriteError(query.id, "routed to the LLM path but no rewrite is available offline")
    if out.size != mapper.dim:
        raise DimensionMismatchError(
            f"query {query.id!r}: reasoned embedding dim {out.size} != pipeline dim {mapper.dim}"
        )
    return out


# -- anchor file -------------------------------------------------------------

_ANCHOR_HEADER = "ADQR-ANCHOR 1"


def save_anchor(anchor: Anchor, path) -> None:
    """Text header (epsilon, members) followed by ``END`` and the f32 vector."""
    lines = [
        _ANCHOR_HEADER,
        f"epsilon {anchor.epsilon!r}",
        f"dim {anchor.dim}",
        f"members {len(anchor.member_ids)}",
        *anchor.member_ids,
        "END",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(np.asarray(anchor.p, dtype="<f4").tobytes())


def load_anchor(path) -> Anchor:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\nEND\n")
    if not raw.startswith(_ANCHOR_HEADER.encode()) or cut < 0:
        raise DataError(f"{path}: not an anchor file")
    lines = raw[:cut].decode("utf-8").split("\n")
    try:
        epsilon = float(lines[1].split()[1])
        dim = int(lines[2].split()[1])
        count = int(lines[3].split()[1])
    except (IndexError, ValueError):
        raise DataError(f"{path}: malformed anchor header") from None
    members = tuple(lines[4:])
    if len(members) != count:
        raise DataError(f"{path}: header says {count} members, found {len(members)}")
    body = raw[cut + 5 :]
    if len(body) != 4 * dim:
        raise DimensionMismatchError(f"{path}: vector has {len(body)} bytes, expected {4 * dim}")
    p = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return Anchor(as_embedding(p), members, epsilon)


def _f32(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def anchor_from_f32(anchor: Anchor) -> Anchor:
    """The anchor as it will read back from disk."""
    return Anchor(as_embedding(_f32(anchor.p)), anchor.member_ids, anchor.epsilon)


# -- PCA shift arrows --------------------------------------------------------


@dataclass(frozen=True)
class Arrow:
    query_id: str
    start: tuple[float, float]
    end: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "id": self.query_id,
            "start_x": self.start[0],
            "start_y": self.start[1],
            "end_x": self.end[0],
            "end_y": self.end[1],
        }


@dataclass(frozen=True, eq=False)
class PcaProjection:
    arrows: list[Arrow]
    components: np.ndarray  # (2, dim), rows are unit principal axes
    explained_variance: np.ndarray  # (2,)
    mean: np.ndarray


def pca_shift_projection(pairs: EmbeddingPairSet) -> PcaProjection:
    """Project each (original, reasoned) pair onto the top-2 principal axes.

    The PCA is fitted on the union of original and reasoned rows. Each axis
    is sign-fixed so its largest-magnitude entry is positive.
    """
    if len(pairs) < 2:
        raise DataError("PCA export needs at least 2 pairs")
    if pairs.dim < 2:
        raise DataError("PCA export needs dim >= 2")
    x = np.vstack([pairs.originals, pairs.reasoned])
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0:
        raise DataError("degenerate covariance: all points are identical")
    top = np.argsort(evals)[::-1][:2]
    comps = evecs[:, top].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    var = np.clip(evals[top], 0.0, None)
    m = len(pairs)
    proj = xc @ comps.T
    ids = pairs.ids or tuple(str(i) for i in range(m))
    arrows = [
        Arrow(ids[i], (float(proj[i, 0]), float(proj[i, 1])), (float(proj[m + i, 0]), float(proj[m + i, 1])))
        for i in range(m)
    ]
    return PcaProjection(arrows, comps, var, mean)
