"""End-to-end experiment drivers behind the CLI subcommands.

Every driver reads its inputs from files named in a ``PipelineConfig`` and
writes its outputs under ``out_dir``. Nothing touches the network unless an
LLM or embedding endpoint is configured.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .errors import DataError
from .llm import (
    CostLedger,
    EmbeddingClient,
    LlmReasoner,
    RewriteCache,
    RewriteResult,
    accumulate_cost,
    render_prompt,
)
from .reasoner import (
    MapperParams,
    TrainReport,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_stage,
)
from .retrieval import EvalReport, RankedList, evaluate, retrieve_topk, write_run
from .router import (
    ALWAYS_DENSE,
    ALWAYS_LLM,
    DENSE,
    LLM,
    Anchor,
    RouterConfig,
    RoutingDecision,
    build_anchor,
    build_oracle_set,
    load_anchor,
    mean_resultant_length,
    pca_shift_projection,
    resolve_embedding,
    route,
    save_anchor,
    shift_norm_stats,
)
from .store import (
    Corpus,
    EmbeddingPairSet,
    QueryRecord,
    RelevanceJudgments,
    load_corpus,
    load_pairs,
    load_qrels,
    load_query_collection,
    save_embeddings,
)

log = logging.getLogger(__name__)

PRETRAIN_CKPT = "dr_pretrain.adqm"
FINETUNE_CKPT = "dr_finetune.adqm"
ANCHOR_FILE = "anchor.adqa"
MODES = ("adaqr", "no_rr", "no_dr_rr", "all_llm")
ORIGINAL = "original"


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def split_queries(records: Sequence[QueryRecord], seed: int, train_fraction: float = 0.7):
    """Seeded split stratified by ``dataset_tag``; file order kept on both sides."""
    groups: dict[str, list[str]] = {}
    for r in records:
        groups.setdefault(r.dataset_tag, []).append(r.id)
    rng = np.random.default_rng(seed)
    train_ids = set()
    for tag in sorted(groups):
        ids = sorted(groups[tag])
        n = len(ids)
        n_train = int(round(train_fraction * n))
        if n >= 2:
            n_train = min(max(n_train, 1), n - 1)
        else:
            n_train = n
        perm = rng.permutation(n)
        train_ids.update(ids[i] for i in perm[:n_train])
    train = [r for r in records if r.id in train_ids]
    test = [r for r in records if r.id not in train_ids]
    return train, test


def offline_rewrites(records: Sequence[QueryRecord]) -> dict[str, RewriteResult]:
    """Rewrite results for records that already carry reasoned text.

    Token counts are whitespace-token estimates of the prompt and rewrite.
    """
    out = {}
    for r in records:
        if r.reasoned_text:
            out[r.id] = RewriteResult(
                r.id,
                r.reasoned_text,
                prompt_tokens=len(render_prompt(r.text or r.id).split()),
                completion_tokens=len(r.reasoned_text.split()),
            )
    return out


def load_rewrites(path) -> dict[str, RewriteResult]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = RewriteResult.from_dict(json.loads(line))
                out[r.query_id] = r
    return out


@dataclass
class Workspace:
    config: PipelineConfig
    queries: list[QueryRecord]
    corpus: Corpus
    qrels: RelevanceJudgments
    train: list[QueryRecord]
    test: list[QueryRecord]

    @classmethod
    def load(cls, cfg: PipelineConfig) -> "Workspace":
        queries = load_query_collection(cfg.path("queries"))
        corpus = load_corpus(cfg.path("corpus"))
        qrels = load_qrels(cfg.path("qrels"))
        if not queries:
            raise DataError("query collection is empty")
        if corpus.dim is not None:
            bad = next((q for q in queries if q.dim not in (None, corpus.dim)), None)
            if bad is not None:
                raise DataError(f"query {bad.id!r} dim {bad.dim} != corpus dim {corpus.dim}")
        train, test = split_queries(queries, cfg.seed, cfg.train_fraction)
        return cls(cfg, queries, corpus, qrels, train, test)

    @property
    def tags(self) -> dict[str, str]:
        return {q.id: q.dataset_tag for q in self.queries}

    def rewrites(self) -> dict[str, RewriteResult]:
        cfg = self.config
        if cfg.rewrites:
            return load_rewrites(cfg.path("rewrites"))
        return offline_rewrites(self.queries)


# -- training ----------------------------------------------------------------


@dataclass
class TrainOutcome:
    pretrained: MapperParams
    finetuned: MapperParams
    pretrain_report: TrainReport
    finetune_report: TrainReport


def _stage_metadata(stage_cfg, report: TrainReport, num_pairs: int) -> dict:
    return {
        "stage": stage_cfg.stage,
        "learning_rate": stage_cfg.learning_rate,
        "epochs": stage_cfg.epochs,
        "batch_size": stage_cfg.batch_size,
        "optimizer": stage_cfg.optimizer,
        "seed": stage_cfg.seed,
        "normalize_inputs": stage_cfg.normalize_inputs,
        "normalize_targets": stage_cfg.normalize_targets,
        "num_pairs": num_pairs,
        "final_loss": report.final_loss,
    }


def finetune_pairs(ws: Workspace) -> EmbeddingPairSet:
    usable = [q for q in ws.train if q.embedding is not None and q.reasoned_embedding is not None]
    if not usable:
        raise DataError("no training-split query carries both embeddings for fine-tuning")
    return EmbeddingPairSet.from_records(usable)


def cmd_train(cfg: PipelineConfig, ws: Workspace | None = None) -> TrainOutcome:
    ws = ws or Workspace.load(cfg)
    pre_pairs = load_pairs(cfg.path("pairs"))
    ft_pairs = finetune_pairs(ws)
    if ft_pairs.dim != pre_pairs.dim:
        raise DataError(f"pretraining dim {pre_pairs.dim} != in-domain dim {ft_pairs.dim}")
    p0 = init_params(pre_pairs.dim, cfg.seed, cfg.output_tanh)
    pre_cfg, ft_cfg = cfg.pretrain_config(), cfg.finetune_config()
    p1, r1 = train_stage(p0, pre_pairs, pre_cfg)
    p2, r2 = train_stage(p1, ft_pairs, ft_cfg)
    save_checkpoint(p1, cfg.out(PRETRAIN_CKPT), _stage_metadata(pre_cfg, r1, len(pre_pairs)))
    save_checkpoint(p2, cfg.out(FINETUNE_CKPT), _stage_metadata(ft_cfg, r2, len(ft_pairs)))
    _write_json(cfg.out("train_report.json"), {"pretrain": r1.to_dict(), "finetune": r2.to_dict()})
    return TrainOutcome(p1, p2, r1, r2)


def load_mapper(cfg: PipelineConfig) -> MapperParams:
    path = cfg.out(FINETUNE_CKPT)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run `train` first")
    return load_checkpoint(path)


# -- retrieval under routing -------------------------------------------------


class Evaluator:
    """Retrieves each query along the dense, LLM and original paths on demand.

    Ranked lists are cached per (path, query), so sweeping many routing
    configurations costs one retrieval per query and path.
    """

    def __init__(self, ws: Workspace, mapper: MapperParams, anchor: Anchor | None = None,
                 llm_source=None):
        self.ws = ws
        self.mapper = mapper
        self.anchor = anchor
        self.llm_source = llm_source
        self._cache: dict[tuple[str, str], RankedList] = {}

    def embedding(self, q: QueryRecord, path: str) -> np.ndarray:
        if path == ORIGINAL:
            if q.embedding is None:
                raise DataError(f"query {q.id!r} has no original embedding")
            return q.embedding
        return resolve_embedding(RoutingDecision(q.id, path, float("nan")), q, self.mapper, self.llm_source)

    def ranked(self, q: QueryRecord, path: str) -> RankedList:
        key = (path, q.id)
        if key not in self._cache:
            cfg = self.ws.config
            self._cache[key] = retrieve_topk(
                self.embedding(q, path), self.ws.corpus, cfg.k, cfg.similarity, query_id=q.id
            )
        return self._cache[key]

    def decide(self, q: QueryRecord, router_cfg: RouterConfig) -> RoutingDecision:
        if self.anchor is None:
            if router_cfg.mode == ALWAYS_DENSE:
                return RoutingDecision(q.id, DENSE, float("nan"))
            if router_cfg.mode == ALWAYS_LLM:
                return RoutingDecision(q.id, LLM, float("nan"))
            raise DataError("threshold routing needs an anchor; run `build-anchor` first")
        return route(q.embedding, self.anchor, router_cfg, query_id=q.id)


@dataclass
class RunOutcome:
    mode: str
    ranked: list[RankedList]
    report: EvalReport
    ledger: CostLedger
    decisions: list[RoutingDecision] = field(default_factory=list)
    tau: str = ""

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "tau": self.tau,
            "k": self.report.k,
            "mean_ndcg": self.report.mean_ndcg,
            "num_queries": len(self.ranked),
            "llm_fraction": self.ledger.llm_fraction,
            "cost_unit": self.ledger.unit,
            "cost": self.ledger.total,
            "baseline_cost": self.ledger.baseline_total,
            "savings": self.ledger.savings,
        }


def _mode_router(cfg: PipelineConfig, mode: str, tau=None) -> RouterConfig | None:
    if mode == "adaqr":
        return cfg.router_config(tau)
    if mode == "no_rr":
        return RouterConfig.parse(ALWAYS_DENSE, cfg.similarity)
    if mode == "all_llm":
        return RouterConfig.parse(ALWAYS_LLM, cfg.similarity)
    if mode == "no_dr_rr":
        return None
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def evaluate_routing(ev: Evaluator, router_cfg: RouterConfig | None, rewrites, mode: str,
                     queries: Sequence[QueryRecord] | None = None) -> RunOutcome:
    cfg = ev.ws.config
    queries = ev.ws.test if queries is None else queries
    decisions, ranked = [], []
    for q in queries:
        if router_cfg is None:
            d = RoutingDecision(q.id, ORIGINAL, float("nan"))
            ranked.append(ev.ranked(q, ORIGINAL))
        else:
            d = ev.decide(q, router_cfg)
            ranked.append(ev.ranked(q, d.path))
        decisions.append(d)
    report = evaluate(ranked, ev.ws.qrels, cfg.k, ev.ws.tags)
    # online rewrites only exist once retrieval has run
    if callable(rewrites):
        rewrites = rewrites()
    ledger = accumulate_cost(decisions, rewrites, cfg.cost_unit)
    label = router_cfg.label() if router_cfg is not None else ORIGINAL
    return RunOutcome(mode, ranked, report, ledger, decisions, label)


class _OnlineSource:
    """Rewrite through the LLM (cached) and embed the rewrite on demand."""

    def __init__(self, cfg: PipelineConfig, dim: int):
        llm_cfg, emb_cfg = cfg.llm_config(), cfg.embed_config(dim)
        self.reasoner = LlmReasoner(llm_cfg, RewriteCache(cfg.path("cache_dir")))
        self.embedder = EmbeddingClient(emb_cfg)
        self.results: dict[str, RewriteResult] = {}

    def __call__(self, q: QueryRecord) -> np.ndarray:
        res = self.reasoner.rewrite(q)
        self.results[q.id] = res
        return self.embedder.embed(res.reasoned_text)

    def close(self):
        self.reasoner.close()
        self.embedder.close()


def _make_evaluator(cfg: PipelineConfig, ws: Workspace, need_anchor: bool):
    mapper = load_mapper(cfg)
    anchor = None
    if need_anchor:
        path = cfg.out(ANCHOR_FILE)
        if not path.exists():
            raise DataError(f"missing anchor {path}; run `build-anchor` first")
        anchor = load_anchor(path)
    source = None
    if cfg.llm_config() is not None and cfg.embed_config() is not None:
        source = _OnlineSource(cfg, mapper.dim)
    return Evaluator(ws, mapper, anchor, source)


def _rewrites_for(ws: Workspace, ev: Evaluator) -> dict[str, RewriteResult]:
    rewrites = ws.rewrites()
    if isinstance(ev.llm_source, _OnlineSource):
        rewrites = {**rewrites, **ev.llm_source.results}
    return rewrites


def _close(ev: Evaluator):
    if isinstance(ev.llm_source, _OnlineSource):
        ev.llm_source.close()


def _write_outcome(cfg: PipelineConfig, out: RunOutcome, prefix: str) -> None:
    write_run(out.ranked, cfg.out(f"{prefix}.trec"), run_tag=f"adaqr-{out.mode}")
    out.report.write(cfg.out(f"{prefix}_eval"))
    _write_json(cfg.out(f"{prefix}_ledger.json"), out.ledger.to_dict())
    _write_jsonl(cfg.out(f"{prefix}_routing.jsonl"), [d.to_dict() for d in out.decisions])
    _write_json(cfg.out(f"{prefix}_summary.json"), out.summary())


# -- anchor ------------------------------------------------------------------


@dataclass
class AnchorOutcome:
    anchor: Anchor
    dense_scores: dict[str, float]
    llm_scores: dict[str, float]


def cmd_build_anchor(cfg: PipelineConfig, ws: Workspace | None = None) -> AnchorOutcome:
    ws = ws or Workspace.load(cfg)
    ev = _make_evaluator(cfg, ws, need_anchor=False)
    try:
        dense = evaluate([ev.ranked(q, DENSE) for q in ws.train], ws.qrels, cfg.k).per_query
        llm = evaluate([ev.ranked(q, LLM) for q in ws.train], ws.qrels, cfg.k).per_query
    finally:
        _close(ev)
    members = build_oracle_set(dense, llm, cfg.epsilon)
    anchor = build_anchor(ws.train, members, cfg.epsilon)
    save_anchor(anchor, cfg.out(ANCHOR_FILE))
    _write_jsonl(cfg.out("oracle_scores.jsonl"), [
        {"id": q, "dense_ndcg": dense[q], "llm_ndcg": llm[q], "in_anchor_set": q in set(members)}
        for q in sorted(dense)
    ])
    return AnchorOutcome(load_anchor(cfg.out(ANCHOR_FILE)), dense, llm)


# -- run / ablation / sweep ---------------------------------------------------


def cmd_run(cfg: PipelineConfig, ws: Workspace | None = None) -> RunOutcome:
    return cmd_ablation(cfg, "adaqr", ws, prefix="run")


def cmd_ablation(cfg: PipelineConfig, mode: str, ws: Workspace | None = None,
                 prefix: str | None = None) -> RunOutcome:
    ws = ws or Workspace.load(cfg)
    router_cfg = _mode_router(cfg, mode)
    needs_anchor = router_cfg is not None and router_cfg.mode == "threshold"
    ev = _make_evaluator(cfg, ws, need_anchor=needs_anchor)
    try:
        out = evaluate_routing(ev, router_cfg, lambda: _rewrites_for(ws, ev), mode)
    finally:
        _close(ev)
    _write_outcome(cfg, out, prefix or f"ablation_{mode}")
    return out


def tau_grid(step: float = 0.05, lo: float = 0.0, hi: float = 1.0) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


@dataclass
class SweepRow:
    tau: str
    mean_ndcg: float
    llm_fraction: float
    cost: float
    savings: float | None

    def to_dict(self):
        return {"tau": self.tau, "mean_ndcg": self.mean_ndcg, "llm_fraction": self.llm_fraction,
                "cost": self.cost, "savings": self.savings}


def cmd_sweep_tau(cfg: PipelineConfig, ws: Workspace | None = None, step: float = 0.05,
                  include_sentinels: bool = True) -> list[SweepRow]:
    """Evaluate the pipeline across the threshold grid.

    With ``include_sentinels`` the table is bracketed by the always-dense and
    always-LLM modes.
    """
    ws = ws or Workspace.load(cfg)
    ev = _make_evaluator(cfg, ws, need_anchor=True)
    labels: list = [float(t) for t in tau_grid(step)]
    if include_sentinels:
        labels = [ALWAYS_DENSE, *labels, ALWAYS_LLM]
    rows = []
    try:
        for lab in labels:
            rc = RouterConfig.parse(lab, cfg.similarity)
            out = evaluate_routing(ev, rc, lambda: _rewrites_for(ws, ev), "adaqr")
            rows.append(SweepRow(rc.label(), out.report.mean_ndcg, out.ledger.llm_fraction,
                                 out.ledger.total, out.ledger.savings))
    finally:
        _close(ev)
    _write_jsonl(cfg.out("sweep_tau.jsonl"), [r.to_dict() for r in rows])
    with open(cfg.out("sweep_tau.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_sweep(rows))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'tau':>13} {'mean_ndcg':>10} {'llm_frac':>9} {'cost':>12} {'savings':>8}"]
    for r in rows:
        sv = "-" if r.savings is None else f"{r.savings:.4f}"
        lines.append(f"{r.tau:>13} {r.mean_ndcg:>10.4f} {r.llm_fraction:>9.3f} {r.cost:>12.1f} {sv:>8}")
    return "\n".join(lines) + "\n"


# -- diagnostics -------------------------------------------------------------


def cmd_mrl(pairs_path) -> dict:
    pairs = load_pairs(pairs_path)
    return {"mrl": mean_resultant_length(pairs), "shift_norm": shift_norm_stats(pairs)}


def cmd_pca(pairs_path, out_path) -> dict:
    proj = pca_shift_projection(load_pairs(pairs_path))
    _write_jsonl(out_path, [a.to_dict() for a in proj.arrows])
    return {
        "arrows": len(proj.arrows),
        "explained_variance": [float(v) for v in proj.explained_variance],
        "output": str(out_path),
    }


# -- batch rewriting ---------------------------------------------------------


def cmd_rewrite(cfg: PipelineConfig, out_queries, only_missing: bool = True) -> list[RewriteResult]:
    """Rewrite queries through the configured LLM and, if set, embed the rewrites.

    Writes the augmented query file and ``rewrites.jsonl`` (token usage) in
    ``out_dir``.
    """
    llm_cfg = cfg.llm_config()
    if llm_cfg is None:
        raise DataError("rewrite needs llm_base_url")
    queries = load_query_collection(cfg.path("queries"))
    todo = [q for q in queries if not (only_missing and q.reasoned_text)]
    dim = next((q.dim for q in queries if q.dim is not None), None)
    emb_cfg = cfg.embed_config(dim)
    with LlmReasoner(llm_cfg, RewriteCache(cfg.path("cache_dir"))) as r:
        results = r.rewrite_many(todo, cfg.max_in_flight)
    by_id = {res.query_id: res for res in results}
    embedder = EmbeddingClient(emb_cfg) if emb_cfg is not None else None
    updated = []
    try:
        for q in queries:
            res = by_id.get(q.id)
            if res is None:
                updated.append(q)
                continue
            emb = embedder.embed(res.reasoned_text) if embedder else q.reasoned_embedding
            updated.append(QueryRecord(q.id, q.text, q.embedding, res.reasoned_text, emb, q.dataset_tag))
    finally:
        if embedder:
            embedder.close()
    save_embeddings(updated, out_queries)
    _write_jsonl(cfg.out("rewrites.jsonl"), [res.to_dict() for res in results])
    return results
