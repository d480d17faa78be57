"""Shared fixtures: small deterministic corpora and trained models."""

from __future__ import annotations

import pytest

from gaitlock.corpus import synth_corpus
from gaitlock.experiment import corpus_schema, user_matrix_from
from gaitlock.features import extract_matrix
from gaitlock.forest import ForestParams, train


@pytest.fixture(scope="session")
def small_corpus():
    """3 users x 12 sessions; enough for quick end-to-end paths."""
    return synth_corpus(11, 3, 12)


@pytest.fixture(scope="session")
def small_matrix(small_corpus):
    schema = corpus_schema(small_corpus, "both")
    fm = extract_matrix(small_corpus, schema)
    return user_matrix_from(fm, "user01", 11)


@pytest.fixture(scope="session")
def small_model(small_matrix):
    return train(small_matrix, ForestParams(n_trees=15), 11,
                 trained_for_user="user01")


@pytest.fixture(scope="session")
def phone_model(small_corpus):
    schema = corpus_schema(small_corpus, "phone")
    fm = extract_matrix(small_corpus, schema)
    data = user_matrix_from(fm, "user01", 11)
    return train(data, ForestParams(n_trees=15), 11,
                 trained_for_user="user01")
