"""Synthetic benchmark with a controllable share of structured query shifts.

Structured queries live in a cap around a shared direction and their reasoning
target is ``normalize(A e + b)`` for a fixed near-rotation ``A`` and shift
``b``. Unstructured queries are uniform on the sphere and their target is an
independent random direction. The simulated LLM rewrite embeds the target
plus gaussian noise (before normalisation). Each evaluation query gets one
relevant document placed at its noise-free target plus a smaller jitter, so a
mapper that learns the systematic shift can out-rank a noisy rewrite while
unstructured queries still need the LLM.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .store import (
    Corpus,
    Document,
    QueryRecord,
    RelevanceJudgments,
    as_embedding,
    save_embeddings,
    save_qrels,
)

FILES = {
    "queries": "queries.jsonl",
    "pairs": "pairs.jsonl",
    "corpus": "corpus.jsonl",
    "qrels": "qrels.txt",
    "truth": "truth.jsonl",
    "spec": "synth.json",
}


@dataclass
class SyntheticSpec:
    dim: int = 64
    num_train_pairs: int = 2000
    num_eval_queries: int = 1000
    corpus_size: int = 3000
    noise_sigma: float = 0.05
    structured_fraction: float = 1.0
    seed: int = 0
    # geometry knobs
    rotation: float = 0.6
    shift_norm: float = 1.0
    cluster_spread: float = 0.6
    domain_shift: float = 0.0
    num_tags: int = 4
    # structured share of the external pretraining pool; None -> structured_fraction
    pretrain_structured_fraction: float | None = None

    def __post_init__(self):
        if self.dim < 2:
            raise DataError("dim must be >= 2")
        if not 0.0 <= self.structured_fraction <= 1.0:
            raise DataError("structured_fraction must lie in [0, 1]")
        psf = self.pretrain_structured_fraction
        if psf is not None and not 0.0 <= psf <= 1.0:
            raise DataError("pretrain_structured_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.num_train_pairs < 1 or self.num_eval_queries < 1:
            raise DataError("pair and query counts must be >= 1")
        if self.corpus_size < self.num_eval_queries:
            raise DataError("corpus_size must be at least num_eval_queries")
        if self.num_tags < 1:
            raise DataError("num_tags must be >= 1")


@dataclass
class SyntheticBenchmark:
    spec: SyntheticSpec
    queries: list[QueryRecord]
    pairs: list[QueryRecord]
    corpus: Corpus
    qrels: RelevanceJudgments
    clean_targets: dict[str, np.ndarray] = field(default_factory=dict)
    structured: dict[str, bool] = field(default_factory=dict)

    def noise_floor(self, ids) -> float:
        """Mean squared distance between rewrite embeddings and their noise-free targets."""
        by_id = {q.id: q for q in self.queries + self.pairs}
        d = [np.sum((by_id[i].reasoned_embedding - self.clean_targets[i]) ** 2) for i in ids]
        return float(np.mean(d))

    def write(self, directory) -> dict[str, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / v for k, v in FILES.items()}
        save_embeddings(self.queries, paths["queries"])
        save_embeddings(self.pairs, paths["pairs"])
        save_embeddings(self.corpus, paths["corpus"])
        save_qrels(self.qrels, paths["qrels"])
        with open(paths["truth"], "w", encoding="utf-8") as fh:
            for qid in sorted(self.clean_targets):
                fh.write(json.dumps({
                    "id": qid,
                    "structured": self.structured[qid],
                    "clean_target": [float(v) for v in self.clean_targets[qid]],
                }) + "\n")
        with open(paths["spec"], "w", encoding="utf-8") as fh:
            json.dump(asdict(self.spec), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return paths


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _cayley(rng, dim, strength):
    """Orthogonal matrix (I - S)^-1 (I + S) from a random skew-symmetric S."""
    g = rng.standard_normal((dim, dim))
    s = (g - g.T) * (strength / (2.0 * np.sqrt(dim)))
    eye = np.eye(dim)
    return np.linalg.solve(eye - s, eye + s)


class _Generator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d = spec.dim
        self.center = _unit(rng.standard_normal(d))
        self.A = _cayley(rng, d, spec.rotation)
        self.b = _unit(rng.standard_normal(d)) * spec.shift_norm
        # always drawn so changing domain_shift never perturbs the other streams
        extra = _cayley(rng, d, spec.domain_shift) if spec.domain_shift > 0 else np.eye(d)
        self.A_pretrain = extra @ self.A
        self.rng_eval = np.random.default_rng([spec.seed, 1])
        self.rng_pairs = np.random.default_rng([spec.seed, 2])
        self.rng_docs = np.random.default_rng([spec.seed, 3])
        self.rng_text = np.random.default_rng([spec.seed, 4])

    def draw(self, rng, n, A, fraction):
        """Originals, noise-free targets, noisy rewrites, structured flags."""
        s, d = self.spec, self.spec.dim
        n_struct = int(round(fraction * n))
        flags = np.zeros(n, dtype=bool)
        flags[rng.permutation(n)[:n_struct]] = True
        spread = rng.standard_normal((n, d)) / np.sqrt(d)
        cap = _unit(self.center + s.cluster_spread * spread)
        uniform = _unit(rng.standard_normal((n, d)))
        orig = np.where(flags[:, None], cap, uniform)
        mapped = orig @ A.T + self.b
        free = _unit(rng.standard_normal((n, d)))
        scale = np.where(flags, np.linalg.norm(mapped, axis=1), 1.0)
        raw_target = np.where(flags[:, None], mapped, free)
        noise = rng.standard_normal((n, d)) * s.noise_sigma * scale[:, None]
        clean = _unit(raw_target)
        noisy = _unit(raw_target + noise)
        return orig, clean, noisy, flags

    def reasoned_text(self, i):
        n = int(self.rng_text.integers(20, 120))
        return f"rewrite {i}: " + " ".join(f"t{j}" for j in range(n))


def generate(spec: SyntheticSpec) -> SyntheticBenchmark:
    g = _Generator(spec)
    n, d = spec.num_eval_queries, spec.dim

    orig, clean, noisy, flags = g.draw(g.rng_eval, n, g.A, spec.structured_fraction)
    queries, clean_targets, structured = [], {}, {}
    for i in range(n):
        qid = f"q{i:05d}"
        queries.append(QueryRecord(
            qid,
            f"synthetic query {i}",
            as_embedding(orig[i]),
            g.reasoned_text(i),
            as_embedding(noisy[i]),
            f"task{i % spec.num_tags}",
        ))
        clean_targets[qid] = clean[i]
        structured[qid] = bool(flags[i])

    psf = spec.pretrain_structured_fraction
    if psf is None:
        psf = spec.structured_fraction
    porig, pclean, pnoisy, pflags = g.draw(g.rng_pairs, spec.num_train_pairs, g.A_pretrain, psf)
    pairs = []
    for i in range(spec.num_train_pairs):
        pid = f"p{i:05d}"
        pairs.append(QueryRecord(pid, f"pretraining query {i}", as_embedding(porig[i]),
                                 None, as_embedding(pnoisy[i]), "pretrain"))
        clean_targets[pid] = pclean[i]
        structured[pid] = bool(pflags[i])

    jitter = g.rng_docs.standard_normal((n, d)) * (spec.noise_sigma / 2.0)
    rel = _unit(clean + jitter)
    distract = _unit(g.rng_docs.standard_normal((spec.corpus_size - n, d)))
    docs = [Document(f"d{i:05d}", f"relevant document for query {i}", as_embedding(rel[i])) for i in range(n)]
    docs += [Document(f"x{j:05d}", f"distractor {j}", as_embedding(v)) for j, v in enumerate(distract)]
    qrels = RelevanceJudgments({f"q{i:05d}": {f"d{i:05d}": 1} for i in range(n)})
    return SyntheticBenchmark(spec, queries, pairs, Corpus(docs), qrels, clean_targets, structured)


def cmd_synth(spec: SyntheticSpec, out_dir) -> dict[str, Path]:
    return generate(spec).write(out_dir)
