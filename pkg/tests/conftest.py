"""Test configuration and fixtures for speech-mrl tests."""

import os

import numpy as np
import pytest

from model_zoo import ModelConfig, init_params
from synth_data import CorpusConfig, gen_corpus, gen_intents, gen_keywords

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def project_root():
    """Repository root, used as cwd for CLI tests."""
    return PROJECT_ROOT


@pytest.fixture
def small_corpus_config():
    """A small world: 128-token vocabulary, 8-dim frames."""
    return CorpusConfig(vocab_size=128, z_dim=8, frame_dim=8)


@pytest.fixture
def small_model_config():
    """Toy model matching ``small_corpus_config``."""
    return ModelConfig(vocab_size=128, hidden=8, d_max=8, dims=(2, 4, 8), blocks=1, max_length=32, frame_dim=8)


@pytest.fixture
def small_corpus(small_corpus_config):
    """3 topics x 6 examples."""
    return gen_corpus(3, 6, seed=3, config=small_corpus_config)


@pytest.fixture
def small_intents(small_corpus_config):
    return gen_intents(3, 6, seed=3, config=small_corpus_config)


@pytest.fixture
def small_keywords(small_corpus_config):
    return gen_keywords(3, 2, seed=3, config=small_corpus_config)


@pytest.fixture
def text_params(small_model_config):
    return init_params("text-only", small_model_config, seed=0)


@pytest.fixture
def unit_rows():
    """Factory for random unit-norm row matrices."""
    def make(n, d, seed=0):
        rows = np.random.default_rng(seed).standard_normal((n, d))
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return make
