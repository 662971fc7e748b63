import json

import numpy as np
import pytest

from adaqr.config import PipelineConfig, load_config, parse_config_text, render_config
from adaqr.errors import DataError
from adaqr.synth import SyntheticSpec, cmd_synth, generate

from conftest import small_spec


def test_synth_is_deterministic(tmp_path):
    a = cmd_synth(small_spec(), tmp_path / "a")
    b = cmd_synth(small_spec(), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes(), key
    c = cmd_synth(small_spec(seed=4), tmp_path / "c")
    assert a["queries"].read_bytes() != c["queries"].read_bytes()


def test_synth_structure():
    bench = generate(small_spec(structured_fraction=0.5, num_eval_queries=100, corpus_size=250))
    flags = [bench.structured[q.id] for q in bench.queries]
    assert sum(flags) == 50
    assert len(bench.corpus) == 250 and len(bench.pairs) == 400
    assert all(bench.structured[p.id] for p in bench.pairs)  # pretraining pool fully structured
    for q in bench.queries[:5]:
        assert np.linalg.norm(q.embedding) == pytest.approx(1.0)
        assert bench.qrels.grades(q.id) == {"d" + q.id[1:]: 1}
    assert {q.dataset_tag for q in bench.queries} == {f"task{i}" for i in range(4)}


def test_noise_floor_tracks_sigma():
    lo = generate(small_spec(noise_sigma=0.02))
    hi = generate(small_spec(noise_sigma=0.1))
    ids = [q.id for q in lo.queries]
    assert 0 < lo.noise_floor(ids) < hi.noise_floor(ids)
    exact = generate(small_spec(noise_sigma=0.0))
    assert exact.noise_floor(ids) == pytest.approx(0.0, abs=1e-20)


def test_domain_shift_only_moves_pretraining_pool():
    a = generate(small_spec(domain_shift=0.0))
    b = generate(small_spec(domain_shift=0.8))
    assert all(np.array_equal(x.reasoned_embedding, y.reasoned_embedding) for x, y in zip(a.queries, b.queries))
    assert not np.array_equal(a.pairs[0].reasoned_embedding, b.pairs[0].reasoned_embedding)


@pytest.mark.parametrize("kw", [{"dim": 1}, {"structured_fraction": 1.5}, {"noise_sigma": -1},
                                {"corpus_size": 10, "num_eval_queries": 20}])
def test_synth_spec_validation(kw):
    with pytest.raises(DataError):
        SyntheticSpec(**kw)


def test_synth_writes_metadata(tmp_path):
    paths = cmd_synth(small_spec(), tmp_path)
    assert json.loads(paths["spec"].read_text())["dim"] == 16
    truth = [json.loads(line) for line in paths["truth"].read_text().splitlines()]
    assert len(truth) == 120 + 400


def test_config_parsing_and_overrides(tmp_path):
    text = """
    # comment
    seed = 5
    tau = bge-large      # profile name
    normalize-inputs = yes
    pretrain_lr = 1e-3
    """
    vals = parse_config_text(text)
    assert vals == {"seed": 5, "tau": "bge-large", "normalize_inputs": True, "pretrain_lr": 1e-3}
    p = tmp_path / "c.conf"
    p.write_text(text)
    cfg = load_config(p, {"seed": 9, "k": None})
    assert cfg.seed == 9 and cfg.k == 10 and cfg.router_config().tau == 0.75
    assert cfg.pretrain_config().learning_rate == 1e-3
    assert cfg.finetune_config().seed == 10
    again = tmp_path / "again.conf"
    again.write_text(render_config(cfg))
    assert load_config(again) == cfg


@pytest.mark.parametrize("text", ["bogus = 1", "seed = x", "normalize_inputs = maybe", "no equals sign"])
def test_config_errors(text):
    with pytest.raises(DataError):
        parse_config_text(text)


def test_config_validation():
    with pytest.raises(DataError):
        PipelineConfig(k=0)
    with pytest.raises(DataError):
        PipelineConfig(cost_unit="dollars")
    with pytest.raises(ValueError):
        PipelineConfig(tau="sometimes")
