from pathlib import Path

import numpy as np
import pytest

from edgekit.toy import toy_treebank
from edgekit.training import TrainConfig, init_model

FIXTURES = Path(__file__).parent / "fixtures"

TINY = dict(word_dim=6, char_dim=4, char_filters=5, lstm_layers=1, lstm_hidden=5, dropout=0.0)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def toy_train():
    return toy_treebank(24, seed=3, prefix="tr")


@pytest.fixture(scope="session")
def toy_dev():
    return toy_treebank(8, seed=4, prefix="dv")


def tiny_model(tb, task="edge", scoring="instance", similarity="cos", seed=0, **kw):
    cfg = TrainConfig(task=task, scoring=scoring, similarity=similarity, seed=seed, **{**TINY, **kw})
    return init_model(tb, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
