import json
from dataclasses import replace

import numpy as np
import pytest

from adaqr import pipeline
from adaqr.errors import DataError, MissingRewriteError
from adaqr.mockserver import MockLlmServer
from adaqr.store import QueryRecord, load_query_collection, save_embeddings


def _trained(cfg):
    pipeline.cmd_train(cfg)
    pipeline.cmd_build_anchor(cfg)
    return cfg


def test_split_is_stratified_and_seeded():
    qs = [QueryRecord(f"q{i:02d}", "t", dataset_tag=f"g{i % 3}") for i in range(30)]
    train, test = pipeline.split_queries(qs, seed=1, train_fraction=0.7)
    assert len(train) == 21 and len(test) == 9
    assert {q.id for q in train}.isdisjoint(q.id for q in test)
    for g in ("g0", "g1", "g2"):
        assert sum(q.dataset_tag == g for q in train) == 7
    again, _ = pipeline.split_queries(qs, seed=1, train_fraction=0.7)
    assert [q.id for q in again] == [q.id for q in train]
    other, _ = pipeline.split_queries(qs, seed=2, train_fraction=0.7)
    assert [q.id for q in other] != [q.id for q in train]


def test_full_pipeline_outputs(small_data):
    cfg = _trained(small_data)
    out = pipeline.cmd_run(cfg)
    o = cfg.path("out_dir")
    for name in ("dr_pretrain.adqm", "dr_finetune.adqm", "anchor.adqa", "oracle_scores.jsonl",
                 "run.trec", "run_eval.txt", "run_eval.json", "run_ledger.json",
                 "run_routing.jsonl", "run_summary.json", "train_report.json"):
        assert (o / name).exists(), name
    s = out.summary()
    assert s["num_queries"] == 36 and 0 < s["mean_ndcg"] <= 1
    assert json.loads((o / "run_summary.json").read_text()) == s
    routing = [json.loads(line) for line in (o / "run_routing.jsonl").read_text().splitlines()]
    assert {r["path"] for r in routing} <= {"dense", "llm"}
    assert all((r["path"] == "dense") == (r["similarity"] >= r["tau"]) for r in routing)


def test_ablations_and_sweep(small_data):
    cfg = _trained(replace(small_data, cost_unit="fixed_per_call"))
    res = {m: pipeline.cmd_ablation(cfg, m) for m in pipeline.MODES}
    assert res["no_rr"].ledger.total == 0 and res["no_rr"].ledger.savings == 1.0
    assert res["all_llm"].ledger.savings == 0.0 and res["all_llm"].ledger.llm_fraction == 1.0
    assert res["no_dr_rr"].ledger.total == 0
    rows = pipeline.cmd_sweep_tau(cfg)
    assert rows[0].tau == "always-dense" and rows[-1].tau == "always-llm"
    grid = rows[1:-1]
    assert len(grid) == 21
    fr = [r.llm_fraction for r in grid]
    assert fr == sorted(fr)
    assert rows[0].mean_ndcg == pytest.approx(res["no_rr"].report.mean_ndcg)
    assert rows[-1].mean_ndcg == pytest.approx(res["all_llm"].report.mean_ndcg)
    assert (cfg.path("out_dir") / "sweep_tau.jsonl").exists()


def test_missing_prerequisites(small_data):
    with pytest.raises(DataError):
        pipeline.cmd_run(small_data)
    pipeline.cmd_train(small_data)
    with pytest.raises(DataError):
        pipeline.cmd_run(small_data)
    # sentinel modes need no anchor
    pipeline.cmd_ablation(small_data, "no_rr")


def test_llm_routed_query_without_rewrite_fails_offline(small_data):
    cfg = small_data
    pipeline.cmd_train(cfg)
    qs = load_query_collection(cfg.path("queries"))
    ws = pipeline.Workspace.load(cfg)
    test_ids = {q.id for q in ws.test}
    stripped = [QueryRecord(q.id, q.text, q.embedding, None, None, q.dataset_tag) if q.id in test_ids else q
                for q in qs]
    save_embeddings(stripped, cfg.path("queries"))
    with pytest.raises(MissingRewriteError):
        pipeline.cmd_ablation(cfg, "all_llm")


def test_online_llm_path_with_mock(small_data):
    cfg = small_data
    pipeline.cmd_train(cfg)
    qs = load_query_collection(cfg.path("queries"))
    test_ids = {q.id for q in pipeline.Workspace.load(cfg).test}
    stripped = [QueryRecord(q.id, q.text, q.embedding, None, None, q.dataset_tag) if q.id in test_ids else q
                for q in qs]
    save_embeddings(stripped, cfg.path("queries"))
    with MockLlmServer(embed_dim=16, usage=(3, 4)) as srv:
        online = replace(cfg, llm_base_url=srv.base_url, embed_base_url=srv.base_url,
                         cost_unit="completion_tokens")
        out = pipeline.cmd_ablation(online, "all_llm")
        calls = srv.request_count
        assert calls == 2 * len(test_ids)  # one chat + one embedding per query
        pipeline.cmd_ablation(online, "all_llm")
        # rewrites come from the disk cache; only embeddings are requested again
        assert srv.request_count == calls + len(test_ids)
    assert out.ledger.total == 4 * len(test_ids)


def test_rewrite_command(small_data, tmp_path):
    cfg = small_data
    qs = [QueryRecord(f"r{i}", f"question {i}", np.eye(16)[i], dataset_tag="t") for i in range(3)]
    save_embeddings(qs, cfg.path("queries"))
    with MockLlmServer(reply="because", embed_dim=16) as srv:
        c = replace(cfg, llm_base_url=srv.base_url, embed_base_url=srv.base_url)
        results = pipeline.cmd_rewrite(c, tmp_path / "aug.jsonl")
    assert len(results) == 3
    aug = load_query_collection(tmp_path / "aug.jsonl")
    assert all(q.reasoned_text == "because" and q.reasoned_embedding.shape == (16,) for q in aug)
    assert (cfg.path("out_dir") / "rewrites.jsonl").exists()
    with pytest.raises(DataError):
        pipeline.cmd_rewrite(cfg, tmp_path / "x.jsonl")


def test_mrl_and_pca_commands(small_data, tmp_path):
    pairs = small_data.path("pairs")
    res = pipeline.cmd_mrl(pairs)
    assert 0 < res["mrl"] <= 1 and res["shift_norm"]["count"] == 400
    out = pipeline.cmd_pca(pairs, tmp_path / "arrows.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "arrows.jsonl").read_text().splitlines()]
    assert out["arrows"] == len(rows) == 400
    assert set(rows[0]) == {"id", "start_x", "start_y", "end_x", "end_y"}
