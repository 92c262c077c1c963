import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spae.core import Vocab
from spae.policy import OverCheckPrior, TabularPolicy
from spae.toy_env import TaskSpec

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def vocab():
    return Vocab.default()


@pytest.fixture(scope="session")
def spec():
    return TaskSpec()


@pytest.fixture(scope="session")
def prior_policy(spec):
    """Untrained over-checking policy; tests must copy before mutating."""
    return OverCheckPrior().build(spec)


@pytest.fixture
def small_vocab():
    # V=10: five digits plus the five structural tokens
    return Vocab(size=10, n_digits=5, delim=5, answer=6, think_end=7, eot=8, wait=9)


def random_policy(vocab, seed, scale=2.0):
    pol = TabularPolicy(vocab)
    pol.logits = np.random.default_rng(seed).normal(0, scale, pol.logits.shape)
    return pol
