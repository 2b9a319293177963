"""Tabular autoregressive policy with exact log-probabilities and closed-form gradients.

A completion ``y`` is scored as a product of per-position categorical
distributions.  Position ``t`` of a prompt ``x`` selects one row of a logits
table through a deterministic "context bucket", which keeps the model small
enough that every gradient used by the training objectives can be written down
by hand and verified against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError

__all__ = [
    "PolicyParams",
    "Sample",
    "bucket",
    "log_prob",
    "log_prob_grad",
    "sample_completion",
    "snapshot_reference",
    "step_log_probs",
    "uniform_params",
]

# Multiplicative mixing keeps the (prompt, position) -> row mapping deterministic
# across processes and platforms; Python's built-in hash of ints would work today
# but would tie reproducibility to interpreter internals.
_MIX_A = 2654435761
_MIX_B = 40503


@dataclass(frozen=True)
class Sample:
    """One (prompt, completion) interaction, tagged with its owner and split."""

    user_id: str
    x: tuple[int, ...]
    y: tuple[int, ...]
    split: str = "train"


@dataclass(eq=False)
class PolicyParams:
    """Unnormalized per-position token scores, shape (context_size, vocab_size)."""

    vocab_size: int
    context_size: int
    logits: np.ndarray

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise InputError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.context_size < 1:
            raise InputError(f"context_size must be >= 1, got {self.context_size}")
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (self.context_size, self.vocab_size):
            raise InputError(
                f"logits shape {self.logits.shape} does not match "
                f"(context_size, vocab_size)=({self.context_size}, {self.vocab_size})"
            )
        if not np.all(np.isfinite(self.logits)):
            raise InputError("logits must be finite")


def uniform_params(vocab_size: int, context_size: int) -> PolicyParams:
    """All-zero logits: the uniform policy."""
    return PolicyParams(vocab_size, context_size, np.zeros((context_size, vocab_size)))


def bucket(x: Sequence[int], t: int, context_size: int) -> int:
    """Deterministic, stateless context bucket for position ``t`` of prompt ``x``."""
    first = int(x[0]) if len(x) else 0
    return ((first + 1) * _MIX_A + t * _MIX_B) % context_size


def _check_tokens(params: PolicyParams, tokens: Sequence[int], name: str) -> None:
    for tok in tokens:
        if not 0 <= int(tok) < params.vocab_size:
            raise InputError(
                f"{name} token {tok} out of range [0, {params.vocab_size})"
            )


def _log_softmax(row: np.ndarray) -> np.ndarray:
    # Max-subtraction is mandatory for stability.
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def _softmax(row: np.ndarray) -> np.ndarray:
    shifted = np.exp(row - row.max())
    return shifted / shifted.sum()


def step_log_probs(
    params: PolicyParams, x: Sequence[int], y: Sequence[int]
) -> list[float]:
    """Per-position conditional log-probabilities log p(y_t | bucket(x, t))."""
    if len(y) == 0:
        raise InputError("empty completion: |y| = 0 is rejected at ingestion")
    _check_tokens(params, x, "prompt")
    _check_tokens(params, y, "completion")
    out: list[float] = []
    for t, tok in enumerate(y):
        row = params.logits[bucket(x, t, params.context_size)]
        out.append(float(_log_softmax(row)[int(tok)]))
    return out


def log_prob(params: PolicyParams, x: Sequence[int], y: Sequence[int]) -> float:
    """log p(y | x) = sum_t log p(y_t | bucket(x, t)).

    The sum runs left-to-right so that repeated evaluations are bit-identical.
    """
    total = 0.0
    for step in step_log_probs(params, x, y):
        total += step
    return total


def log_prob_grad(
    params: PolicyParams, x: Sequence[int], y: Sequence[int]
) -> np.ndarray:
    """d log p(y|x) / d logits: per used row, onehot(y_t) - softmax(row).

    Rows of buckets never visited by (x, y) are exactly zero.
    """
    if len(y) == 0:
        raise InputError("empty completion: |y| = 0 is rejected at ingestion")
    _check_tokens(params, x, "prompt")
    _check_tokens(params, y, "completion")
    grad = np.zeros_like(params.logits)
    for t, tok in enumerate(y):
        b = bucket(x, t, params.context_size)
        grad[b] -= _softmax(params.logits[b])
        grad[b, int(tok)] += 1.0
    return grad


def snapshot_reference(params: PolicyParams) -> PolicyParams:
    """Deep copy; later updates to the live policy never touch the snapshot."""
    return PolicyParams(params.vocab_size, params.context_size, params.logits.copy())


def sample_completion(
    params: PolicyParams,
    x: Sequence[int],
    length: int,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Draw a completion of the given length from the policy's conditionals."""
    if length < 1:
        raise InputError(f"completion length must be >= 1, got {length}")
    _check_tokens(params, x, "prompt")
    tokens: list[int] = []
    for t in range(length):
        probs = _softmax(params.logits[bucket(x, t, params.context_size)])
        tokens.append(int(rng.choice(params.vocab_size, p=probs)))
    return tuple(tokens)
