import numpy as np
import pytest

from adaqr.errors import (
    AuthError,
    CacheMissError,
    DimensionMismatchError,
    EmptyCompletionError,
    MissingRewriteError,
    ServerError,
    ServiceError,
)
from adaqr.llm import (
    PROMPT_INSTRUCTIONS,
    EmbeddingClient,
    EmbeddingEndpointConfig,
    LlmEndpointConfig,
    LlmReasoner,
    OfflineEmbeddingStore,
    RewriteCache,
    RewriteResult,
    accumulate_cost,
    content_hash,
    render_prompt,
)
from adaqr.mockserver import MockLlmServer
from adaqr.router import RoutingDecision
from adaqr.store import QueryRecord


def _cfg(srv, **kw):
    return LlmEndpointConfig(base_url=srv.base_url, model_name="mock", backoff_seconds=0.0, **kw)


Q = QueryRecord("q1", "why is the sky blue")


def test_prompt_template():
    p = render_prompt("How do tides work?")
    assert p.startswith("How do tides work?\n\n")
    assert p.endswith(PROMPT_INSTRUCTIONS)
    assert "1. Identify the essential problem." in p
    assert "3. Draft an answer with as many thoughts as you have." in p
    with pytest.raises(ValueError):
        render_prompt("   ")


def test_rewrite_request_shape(monkeypatch):
    monkeypatch.setenv("ADAQR_TEST_KEY", "sekret")
    with MockLlmServer(reply="R", usage=(5, 7)) as srv:
        with LlmReasoner(_cfg(srv, api_key_env_var="ADAQR_TEST_KEY")) as r:
            res = r.rewrite(Q)
        req = srv.requests[0]
    assert res.reasoned_text == "R" and (res.prompt_tokens, res.completion_tokens) == (5, 7)
    assert res.retries == 0 and not res.from_cache
    assert req["path"] == "/chat/completions"
    assert req["body"]["model"] == "mock" and req["body"]["temperature"] == 0
    assert req["body"]["messages"] == [{"role": "user", "content": render_prompt(Q.text)}]
    assert req["headers"]["Authorization"] == "Bearer sekret"


def test_retries_on_rate_limit():
    with MockLlmServer(statuses=[429, 429]) as srv:
        with LlmReasoner(_cfg(srv)) as r:
            res = r.rewrite(Q)
        assert srv.request_count == 3
    assert res.retries == 2


@pytest.mark.parametrize("status", [401, 403])
def test_no_retry_on_auth_failure(status):
    with MockLlmServer(statuses=[status, 200]) as srv:
        with LlmReasoner(_cfg(srv)) as r, pytest.raises(AuthError):
            r.rewrite(Q)
        assert srv.request_count == 1


def test_server_errors_exhaust_retries():
    with MockLlmServer(statuses=[503] * 10) as srv:
        with LlmReasoner(_cfg(srv, max_retries=2)) as r, pytest.raises(ServerError):
            r.rewrite(Q)
        assert srv.request_count == 3


def test_client_error_is_not_retried():
    with MockLlmServer(statuses=[400]) as srv:
        with LlmReasoner(_cfg(srv)) as r, pytest.raises(ServiceError):
            r.rewrite(Q)
        assert srv.request_count == 1


def test_transport_failure_is_a_service_error():
    srv = MockLlmServer().start()
    url = srv.base_url
    srv.stop()
    cfg = LlmEndpointConfig(base_url=url, model_name="m", max_retries=1, backoff_seconds=0.0, timeout_seconds=2)
    with LlmReasoner(cfg) as r, pytest.raises(ServiceError):
        r.rewrite(Q)


def test_empty_completion_rejected():
    with MockLlmServer(reply="  ") as srv:
        with LlmReasoner(_cfg(srv)) as r, pytest.raises(EmptyCompletionError):
            r.rewrite(Q)


def test_cache_hit_makes_no_request(tmp_path):
    cache = RewriteCache(tmp_path / "cache")
    with MockLlmServer(reply="first") as srv:
        with LlmReasoner(_cfg(srv), cache) as r:
            a = r.rewrite(Q)
            assert srv.request_count == 1
            b = r.rewrite(Q)
        assert srv.request_count == 1
    assert b.from_cache and b.reasoned_text == a.reasoned_text == "first"
    assert (b.prompt_tokens, b.completion_tokens) == (a.prompt_tokens, a.completion_tokens)


def test_cache_key_covers_model_and_prompt(tmp_path):
    cache = RewriteCache(tmp_path)
    h = content_hash(render_prompt(Q.text))
    cache.put("q1", "m1", h, RewriteResult("q1", "x"))
    assert cache.get("q1", "m1", h).reasoned_text == "x"
    assert cache.get("q1", "m2", h) is None
    assert cache.get("q1", "m1", content_hash("other")) is None
    assert cache.get("q2", "m1", h) is None


def test_corrupt_cache_entry_is_a_miss(tmp_path):
    cache = RewriteCache(tmp_path)
    cache.put("q1", "m", "h", RewriteResult("q1", "x"))
    (tmp_path / cache.key("q1", "m", "h")).write_text("{not json")
    assert cache.get("q1", "m", "h") is None


def test_rewrite_many_keeps_order_and_caches_concurrently(tmp_path):
    qs = [QueryRecord(f"q{i}", f"question {i}") for i in range(12)]
    cache = RewriteCache(tmp_path)
    with MockLlmServer(reply=lambda prompt: prompt.split("\n")[0].upper()) as srv:
        with LlmReasoner(_cfg(srv), cache) as r:
            out = r.rewrite_many(qs, max_in_flight=4)
            again = r.rewrite_many(qs, max_in_flight=4)
        assert srv.request_count == 12
    assert [o.reasoned_text for o in out] == [f"QUESTION {i}" for i in range(12)]
    assert all(o.from_cache for o in again)


def test_embedding_client_online_and_offline(tmp_path):
    with MockLlmServer(embed_dim=5) as srv:
        cfg = EmbeddingEndpointConfig("emb", base_url=srv.base_url, dim=5, backoff_seconds=0.0)
        c = EmbeddingClient(cfg)
        v = c.embed("hello")
        c.close()
        assert srv.requests[0]["body"] == {"model": "emb", "input": "hello"}
        bad = EmbeddingClient(EmbeddingEndpointConfig("emb", base_url=srv.base_url, dim=4))
        with pytest.raises(DimensionMismatchError):
            bad.embed("hello")
        bad.close()
    assert v.shape == (5,) and np.linalg.norm(v) == pytest.approx(1.0)

    store = OfflineEmbeddingStore()
    store.add("hello", v)
    store.save(tmp_path / "store.jsonl")
    off = EmbeddingClient(EmbeddingEndpointConfig("emb", dim=5, offline_store=str(tmp_path / "store.jsonl")))
    assert np.array_equal(off.embed("hello"), v)
    with pytest.raises(CacheMissError):
        off.embed("never seen")


def _decisions(paths):
    return [RoutingDecision(f"q{i}", p, 0.0) for i, p in enumerate(paths)]


def test_cost_ledger_units():
    rw = {f"q{i}": RewriteResult(f"q{i}", "x", prompt_tokens=10, completion_tokens=i + 1) for i in range(4)}
    ds = _decisions(["dense", "llm", "dense", "llm"])
    comp = accumulate_cost(ds, rw, "completion_tokens")
    assert comp.total == 2 + 4 and comp.baseline_total == 1 + 2 + 3 + 4
    assert comp.savings == pytest.approx(1 - 6 / 10)
    assert comp.per_query == {"q0": 0.0, "q1": 2.0, "q2": 0.0, "q3": 4.0}
    tot = accumulate_cost(ds, rw, "total_tokens")
    assert tot.total == 26 and tot.baseline_total == 50
    fixed = accumulate_cost(ds, rw, "fixed_per_call")
    assert fixed.total == 2 and fixed.savings == 0.5 and fixed.llm_fraction == 0.5


def test_cost_ledger_missing_rewrites():
    with pytest.raises(MissingRewriteError):
        accumulate_cost(_decisions(["llm"]), {}, "fixed_per_call")
    led = accumulate_cost(_decisions(["dense"]), {}, "completion_tokens")
    assert led.total == 0 and led.savings is None
    assert accumulate_cost(_decisions(["dense"]), {}, "fixed_per_call").savings == 1.0
    with pytest.raises(ValueError):
        accumulate_cost([], {}, "dollars")
