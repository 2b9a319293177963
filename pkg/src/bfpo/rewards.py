"""Implicit rewards and the three reference-point ("delta") estimators.

The reward of a completion is the beta-scaled log-ratio of the live policy to a
frozen reference policy.  All binary-feedback objectives anchor that reward to
a scalar reference point delta; this module provides the batch-mean anchor, the
leave-one-out clipped anchor, and the decoupled-EMA anchor that stays invariant
to batch-level imbalance between positive and auxiliary samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

from .errors import InputError, NumericError, StateError
from .policy import PolicyParams, log_prob

__all__ = [
    "ReferenceState",
    "RewardConfig",
    "delta_bco",
    "delta_ema",
    "delta_joint",
    "ema_update",
    "implicit_reward",
    "kto_zref",
]


@dataclass(frozen=True)
class RewardConfig:
    """Scaling of the policy/reference log-ratio."""

    beta: float = 1.0

    def __post_init__(self) -> None:
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise InputError(f"beta must be a positive finite real, got {self.beta}")


@dataclass(frozen=True)
class ReferenceState:
    """Decoupled EMA statistics of positive-set and auxiliary-set rewards.

    Before the first update the state is uninitialized and delta queries fail;
    the first update seeds both EMAs with the raw batch means so training does
    not start from an artificial zero anchor.
    """

    ema_pos: float = 0.0
    ema_aux: float = 0.0
    decay: float = 0.99
    initialized: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.decay < 1.0):
            raise InputError(f"decay must lie in (0, 1), got {self.decay}")


def implicit_reward(
    policy: PolicyParams,
    reference_policy: PolicyParams,
    config: RewardConfig,
    x: Sequence[int],
    y: Sequence[int],
) -> float:
    """beta * (log p_policy(y|x) - log p_reference(y|x))."""
    if (
        policy.vocab_size != reference_policy.vocab_size
        or policy.context_size != reference_policy.context_size
    ):
        raise InputError(
            "policy and reference shapes differ: "
            f"({policy.context_size}, {policy.vocab_size}) vs "
            f"({reference_policy.context_size}, {reference_policy.vocab_size})"
        )
    return config.beta * (log_prob(policy, x, y) - log_prob(reference_policy, x, y))


def _mean(values: Sequence[float], name: str) -> float:
    if len(values) == 0:
        raise InputError(f"{name} must be non-empty")
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


def delta_bco(pos_rewards: Sequence[float], aux_rewards: Sequence[float]) -> float:
    """Mean of the two per-set reward means."""
    return 0.5 * (_mean(pos_rewards, "pos_rewards") + _mean(aux_rewards, "aux_rewards"))


def delta_joint(pos_rewards: Sequence[float], aux_rewards: Sequence[float]) -> float:
    """Pooled mean over both sets jointly.

    Unlike :func:`delta_bco` this estimator shifts toward whichever set
    dominates the batch, which is exactly the imbalance sensitivity the
    decoupled EMA removes.
    """
    if len(pos_rewards) == 0 or len(aux_rewards) == 0:
        raise InputError("both reward sets must be non-empty")
    total = 0.0
    for v in list(pos_rewards) + list(aux_rewards):
        total += float(v)
    return total / (len(pos_rewards) + len(aux_rewards))


def kto_zref(batch_rewards: Sequence[float], index: int) -> float:
    """Leave-one-out batch mean, clipped at zero."""
    if len(batch_rewards) < 2:
        raise InputError("leave-one-out reference needs a batch of size >= 2")
    if not 0 <= index < len(batch_rewards):
        raise InputError(f"index {index} out of range for batch of {len(batch_rewards)}")
    total = 0.0
    for i, v in enumerate(batch_rewards):
        if i != index:
            total += float(v)
    return max(0.0, total / (len(batch_rewards) - 1))


def ema_update(
    state: ReferenceState, batch_pos_mean: float, batch_aux_mean: float
) -> ReferenceState:
    """Fold one batch's per-set reward means into the decoupled EMAs."""
    if not (math.isfinite(batch_pos_mean) and math.isfinite(batch_aux_mean)):
        raise NumericError(
            f"non-finite batch reward means ({batch_pos_mean}, {batch_aux_mean})"
        )
    if not state.initialized:
        return replace(
            state,
            ema_pos=float(batch_pos_mean),
            ema_aux=float(batch_aux_mean),
            initialized=True,
        )
    d = state.decay
    return replace(
        state,
        ema_pos=d * state.ema_pos + (1.0 - d) * batch_pos_mean,
        ema_aux=d * state.ema_aux + (1.0 - d) * batch_aux_mean,
    )


def delta_ema(state: ReferenceState) -> float:
    """Mean of the two decoupled EMA statistics."""
    if not state.initialized:
        raise StateError("reference state queried before the first EMA update")
    return 0.5 * (state.ema_pos + state.ema_aux)
