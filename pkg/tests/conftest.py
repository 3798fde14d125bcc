import numpy as np
import pytest

from ggd.model import ModelConfig, ModelParams


def tiny_params(src_vocab=8, tgt_vocab=8, hidden=16, embed=8, attention=8, seed=0, scale=0.5):
    """A small randomly initialised network with non-trivial weights."""
    cfg = ModelConfig(src_vocab, tgt_vocab, embed_dim=embed, hidden_dim=hidden, attention_dim=attention, seed=seed, init_scale=scale)
    return ModelParams.initialize(cfg)


@pytest.fixture
def params():
    return tiny_params()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
