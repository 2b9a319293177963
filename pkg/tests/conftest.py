"""Shared helpers for building small corpora and policies in tests."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from bfpo.datagen import PopulationSpec, generate_population
from bfpo.policy import PolicyParams


def random_params(rng: np.random.Generator, vocab: int, context: int) -> PolicyParams:
    return PolicyParams(vocab, context, rng.normal(0.0, 1.0, (context, vocab)))


def all_sequences(vocab: int, length: int):
    return itertools.product(range(vocab), repeat=length)


def small_population(
    lam: float,
    seed: int,
    n_users: int = 6,
    vocab: int = 24,
    samples_per_user: int = 40,
    seq_len: int = 6,
):
    spec = PopulationSpec(
        n_users=n_users,
        vocab_size=vocab,
        overlap_lambda=lam,
        samples_per_user=samples_per_user,
        prompt_pool_size=10,
        seq_len=seq_len,
        seed=seed,
    )
    return spec, generate_population(spec)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
