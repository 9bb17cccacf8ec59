"""Shared fixtures. The trained probe is expensive, so it is session-scoped."""

import pytest

from unlearnlab.probe import build_probe_corpus, train_probe
from unlearnlab.world import build_grammar


@pytest.fixture(scope="session")
def grammar():
    return build_grammar()


@pytest.fixture(scope="session")
def probe_corpus(grammar):
    return build_probe_corpus(grammar, seed=0)


@pytest.fixture(scope="session")
def trained_probe(probe_corpus):
    return train_probe(probe_corpus, seed=0)
