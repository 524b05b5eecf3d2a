import numpy as np
import pytest

from clozefew.data import make_toy_vocab, toy_bundle
from clozefew.mlm import TabularBackend, TinyTransformer, TinyTransformerConfig


@pytest.fixture(scope="session")
def sent_vocab():
    return make_toy_vocab("sentiment")


@pytest.fixture(scope="session")
def sent_bundle():
    return toy_bundle("sentiment")


@pytest.fixture(scope="session")
def sent_pvps(sent_bundle, sent_vocab):
    return sent_bundle.pvps(sent_vocab)


@pytest.fixture()
def tabular(sent_vocab):
    return TabularBackend(sent_vocab, seed=13)


@pytest.fixture(scope="session")
def small_config():
    return TinyTransformerConfig(
        layers=2, model_dim=16, heads=2, ff_dim=24, max_positions=32, seed=5
    )


@pytest.fixture()
def small_model(small_config, sent_vocab):
    return TinyTransformer(small_config, sent_vocab)


class FixedBackend:
    """Backend returning caller-supplied logit rows for any input."""

    def __init__(self, vocab, rows_fn):
        self.vocab = vocab
        self.max_positions = None
        self.rows_fn = rows_fn

    def mask_logits(self, z):
        from clozefew.mlm import MaskLogits

        return MaskLogits(np.asarray(self.rows_fn(z), dtype=np.float64))


@pytest.fixture()
def fixed_backend_cls():
    return FixedBackend
