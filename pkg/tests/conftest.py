import numpy as np
import pytest

from adaqr.config import PipelineConfig
from adaqr.mockserver import MockLlmServer
from adaqr.synth import SyntheticSpec, cmd_synth


def small_spec(**kw) -> SyntheticSpec:
    base = dict(dim=16, num_train_pairs=400, num_eval_queries=120, corpus_size=300,
                noise_sigma=0.08, structured_fraction=0.7, pretrain_structured_fraction=1.0, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_data(tmp_path):
    """A written small synthetic benchmark and a config pointing at it."""
    data = tmp_path / "data"
    cmd_synth(small_spec(), data)
    cfg = PipelineConfig(data_dir=str(data), pretrain_epochs=20, tau="0.7")
    return cfg


@pytest.fixture
def mock_server():
    with MockLlmServer() as srv:
        yield srv


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
