"""Training objectives: SFT, DPO, KTO, BCO and the calibrated binary objectives.

Every binary-feedback objective is built from two per-sample sigmoid losses on
the anchored reward g = reward - delta:

    positive-label loss  -log sigmoid(g)    (small when the sample is preferred)
    negative-label loss  -log sigmoid(-g)   (small when it is non-preferred)

The calibrated objective treats the auxiliary set as an unlabeled mixture and
subtracts the expected negative-label loss of the positive set, scaled by the
overlap coefficient alpha, from the auxiliary negative-label loss.  Clamping
that "purified" term at zero prevents the flexible policy from exploiting a
negative risk estimate.  Gradients are analytic; delta and the leave-one-out
KTO anchors are treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .policy import PolicyParams, Sample, log_prob, log_prob_grad
from .rewards import RewardConfig, implicit_reward, kto_zref

__all__ = [
    "Batch",
    "CalibrationConfig",
    "DpoPair",
    "LossBreakdown",
    "LossConfig",
    "Method",
    "bco_loss",
    "cbpo_loss",
    "cbpo_raw_loss",
    "dpo_loss",
    "kto_loss",
    "loss_gradients",
    "loss_negative",
    "loss_positive",
    "method_loss",
    "method_loss_and_grad",
    "sft_loss",
]


class Method(str, Enum):
    SFT = "sft"
    DPO = "dpo"
    KTO = "kto"
    BCO = "bco"
    CBPO_RAW = "cbpo_raw"
    CBPO = "cbpo"


@dataclass(frozen=True)
class CalibrationConfig:
    """Correction coefficient alpha and the class prior used by the raw form.

    alpha = 1 (total overlap) is representable for the unclamped objective; the
    clamped objective additionally rejects it because of its 1/(1 - alpha)
    rescaling.
    """

    alpha: float = 0.0
    pi_n: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (0.0 < self.pi_n <= 1.0):
            raise ConfigError(f"pi_n must lie in (0, 1], got {self.pi_n}")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch values of each objective component.

    Fields that do not apply to a method are reported as 0.0 so that every
    logged row stays finite.
    """

    method: Method
    l_pos: float = 0.0
    l_aux_neg: float = 0.0
    l_tar_neg: float = 0.0
    pure_neg_raw: float = 0.0
    pure_neg_clamped: float = 0.0
    total: float = 0.0


@dataclass(frozen=True)
class DpoPair:
    """A prompt with a preferred and a rejected completion."""

    x: tuple[int, ...]
    y_w: tuple[int, ...]
    y_l: tuple[int, ...]


@dataclass
class Batch:
    """One optimization step's worth of samples.

    ``pos``/``aux`` feed the binary-feedback objectives (and ``pos`` alone feeds
    SFT); ``pairs`` feeds DPO.
    """

    pos: list[Sample] = field(default_factory=list)
    aux: list[Sample] = field(default_factory=list)
    pairs: list[DpoPair] = field(default_factory=list)


@dataclass(frozen=True)
class LossConfig:
    """Everything the objectives need beyond the batch itself."""

    beta: float = 1.0
    alpha: float = 0.0
    pi_n: float = 1.0
    lambda_d: float = 1.0
    lambda_u: float = 1.0


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _neg_log_sigmoid(z: float) -> float:
    # -log sigmoid(z) = softplus(-z), stable on both tails.
    return float(np.logaddexp(0.0, -z))


def loss_positive(reward: float, delta: float) -> float:
    """-log sigmoid(reward - delta); strictly decreasing in the reward."""
    return _neg_log_sigmoid(reward - delta)


def loss_negative(reward: float, delta: float) -> float:
    """-log sigmoid(-(reward - delta)); the reflection of :func:`loss_positive`."""
    return _neg_log_sigmoid(-(reward - delta))


def dpo_loss(reward_w: float, reward_l: float) -> float:
    """-log sigmoid(reward_w - reward_l) for a paired comparison."""
    return _neg_log_sigmoid(reward_w - reward_l)


def _mean(values: Sequence[float], name: str) -> float:
    if len(values) == 0:
        raise InputError(f"{name} must be non-empty")
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


def kto_loss(
    rewards: Sequence[float],
    labels: Sequence[int],
    lambda_d: float = 1.0,
    lambda_u: float = 1.0,
    zrefs: Sequence[float] | None = None,
) -> float:
    """Mean of w(y) * (1 - v(y)) with per-sample leave-one-out anchors.

    ``zrefs`` overrides the internally computed leave-one-out anchors; the
    gradient code and its finite-difference checks use this to hold the anchors
    constant while the rewards vary.
    """
    if len(rewards) != len(labels):
        raise InputError("rewards and labels must have equal length")
    if len(rewards) < 2:
        raise InputError("the leave-one-out anchor needs a batch of size >= 2")
    if any(lab not in (1, -1) for lab in labels):
        raise InputError("labels must be +1 or -1")
    if zrefs is None:
        zrefs = [kto_zref(rewards, i) for i in range(len(rewards))]
    elif len(zrefs) != len(rewards):
        raise InputError("zrefs must match the batch length")
    total = 0.0
    for r, lab, z in zip(rewards, labels, zrefs):
        if lab == 1:
            total += lambda_d * (1.0 - _sigmoid(r - z))
        else:
            total += lambda_u * (1.0 - _sigmoid(z - r))
    return total / len(rewards)


def bco_loss(
    pos_rewards: Sequence[float],
    aux_rewards: Sequence[float],
    delta: float,
) -> LossBreakdown:
    """Positive-label mean over positives plus negative-label mean over auxiliaries."""
    l_pos = _mean([loss_positive(r, delta) for r in pos_rewards], "pos_rewards")
    l_aux_neg = _mean([loss_negative(r, delta) for r in aux_rewards], "aux_rewards")
    l_tar_neg = _mean([loss_negative(r, delta) for r in pos_rewards], "pos_rewards")
    return LossBreakdown(
        method=Method.BCO,
        l_pos=l_pos,
        l_aux_neg=l_aux_neg,
        l_tar_neg=l_tar_neg,
        pure_neg_raw=l_aux_neg,
        pure_neg_clamped=l_aux_neg,
        total=l_pos + l_aux_neg,
    )


def cbpo_raw_loss(
    pos_rewards: Sequence[float],
    aux_rewards: Sequence[float],
    delta: float,
    config: CalibrationConfig,
) -> LossBreakdown:
    """Unclamped risk-decomposition form with an explicit class prior pi_n."""
    l_pos = _mean([loss_positive(r, delta) for r in pos_rewards], "pos_rewards")
    l_aux_neg = _mean([loss_negative(r, delta) for r in aux_rewards], "aux_rewards")
    l_tar_neg = _mean([loss_negative(r, delta) for r in pos_rewards], "pos_rewards")
    raw = l_aux_neg - config.alpha * l_tar_neg
    return LossBreakdown(
        method=Method.CBPO_RAW,
        l_pos=l_pos,
        l_aux_neg=l_aux_neg,
        l_tar_neg=l_tar_neg,
        pure_neg_raw=raw,
        pure_neg_clamped=max(0.0, raw),
        total=l_pos + raw / config.pi_n,
    )


def cbpo_loss(
    pos_rewards: Sequence[float],
    aux_rewards: Sequence[float],
    delta: float,
    config: CalibrationConfig,
) -> LossBreakdown:
    """Calibrated objective: l_pos + max(0, l_aux_neg - alpha*l_tar_neg)/(1-alpha)."""
    if config.alpha >= 1.0:
        raise ConfigError(f"the clamped objective needs alpha < 1, got {config.alpha}")
    l_pos = _mean([loss_positive(r, delta) for r in pos_rewards], "pos_rewards")
    l_aux_neg = _mean([loss_negative(r, delta) for r in aux_rewards], "aux_rewards")
    l_tar_neg = _mean([loss_negative(r, delta) for r in pos_rewards], "pos_rewards")
    raw = l_aux_neg - config.alpha * l_tar_neg
    clamped = max(0.0, raw)
    return LossBreakdown(
        method=Method.CBPO,
        l_pos=l_pos,
        l_aux_neg=l_aux_neg,
        l_tar_neg=l_tar_neg,
        pure_neg_raw=raw,
        pure_neg_clamped=clamped,
        total=l_pos + clamped / (1.0 - config.alpha),
    )


def sft_loss(policy: PolicyParams, batch: Sequence[Sample]) -> float:
    """Per-token cross-entropy: total negative log-probability over total tokens."""
    if len(batch) == 0:
        raise InputError("SFT batch must be non-empty")
    total_lp = 0.0
    total_tokens = 0
    for sample in batch:
        total_lp += log_prob(policy, sample.x, sample.y)
        total_tokens += len(sample.y)
    return -total_lp / total_tokens


# ---------------------------------------------------------------------------
# Method dispatch: loss values and analytic gradients
# ---------------------------------------------------------------------------


def _rewards_and_grads(
    policy: PolicyParams,
    reference: PolicyParams,
    beta: float,
    samples: Sequence[Sample],
) -> tuple[list[float], list[np.ndarray]]:
    """Implicit rewards and their gradients d reward / d logits = beta * dlogp."""
    cfg = RewardConfig(beta=beta)
    rewards: list[float] = []
    grads: list[np.ndarray] = []
    for s in samples:
        rewards.append(implicit_reward(policy, reference, cfg, s.x, s.y))
        grads.append(beta * log_prob_grad(policy, s.x, s.y))
    return rewards, grads


def _weighted_sum(
    grads: Sequence[np.ndarray], weights: Sequence[float], shape: tuple[int, int]
) -> np.ndarray:
    # Fixed left-to-right accumulation so batch reductions are reproducible.
    out = np.zeros(shape)
    for w, g in zip(weights, grads):
        out += w * g
    return out


def method_loss(
    method: Method,
    batch: Batch,
    policy: PolicyParams,
    reference_policy: PolicyParams,
    config: LossConfig,
    delta: float,
    zrefs: Sequence[float] | None = None,
) -> LossBreakdown:
    """Evaluate one method's loss on a batch (no gradient)."""
    breakdown, _ = _dispatch(
        method, batch, policy, reference_policy, config, delta, zrefs, want_grad=False
    )
    return breakdown


def method_loss_and_grad(
    method: Method,
    batch: Batch,
    policy: PolicyParams,
    reference_policy: PolicyParams,
    config: LossConfig,
    delta: float,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss breakdown plus the analytic gradient of the total w.r.t. the logits."""
    breakdown, grad = _dispatch(
        method, batch, policy, reference_policy, config, delta, None, want_grad=True
    )
    assert grad is not None
    return breakdown, grad


def loss_gradients(
    method: Method,
    batch: Batch,
    policy: PolicyParams,
    reference_policy: PolicyParams,
    config: LossConfig,
    delta: float,
) -> np.ndarray:
    """Analytic gradient of the method's total loss w.r.t. the policy logits."""
    return method_loss_and_grad(
        method, batch, policy, reference_policy, config, delta
    )[1]


def _dispatch(
    method: Method,
    batch: Batch,
    policy: PolicyParams,
    reference: PolicyParams,
    config: LossConfig,
    delta: float,
    zrefs: Sequence[float] | None,
    want_grad: bool,
) -> tuple[LossBreakdown, np.ndarray | None]:
    shape = (policy.context_size, policy.vocab_size)

    if method is Method.SFT:
        value = sft_loss(policy, batch.pos)
        grad = None
        if want_grad:
            total_tokens = sum(len(s.y) for s in batch.pos)
            acc = np.zeros(shape)
            for s in batch.pos:
                acc += log_prob_grad(policy, s.x, s.y)
            grad = -acc / total_tokens
        return LossBreakdown(method=Method.SFT, total=value), grad

    if method is Method.DPO:
        if len(batch.pairs) == 0:
            raise InputError("DPO batch must contain pairs")
        rcfg = RewardConfig(beta=config.beta)
        total = 0.0
        grad = np.zeros(shape) if want_grad else None
        for pair in batch.pairs:
            r_w = implicit_reward(policy, reference, rcfg, pair.x, pair.y_w)
            r_l = implicit_reward(policy, reference, rcfg, pair.x, pair.y_l)
            total += dpo_loss(r_w, r_l)
            if want_grad:
                s = _sigmoid(r_w - r_l)
                grad += (s - 1.0) * config.beta * log_prob_grad(policy, pair.x, pair.y_w)
                grad += (1.0 - s) * config.beta * log_prob_grad(policy, pair.x, pair.y_l)
        n = len(batch.pairs)
        if want_grad:
            grad /= n
        return LossBreakdown(method=Method.DPO, total=total / n), grad

    # Binary-feedback methods below share the pos/aux reward computation.
    if len(batch.pos) == 0:
        raise InputError(f"{method.value} batch needs positive samples")
    if method is not Method.KTO and len(batch.aux) == 0:
        raise InputError(f"{method.value} batch needs auxiliary samples")

    pos_r, pos_g = _rewards_and_grads(policy, reference, config.beta, batch.pos)
    aux_r, aux_g = _rewards_and_grads(policy, reference, config.beta, batch.aux)

    if method is Method.KTO:
        rewards = pos_r + aux_r
        labels = [1] * len(pos_r) + [-1] * len(aux_r)
        if zrefs is None:
            if len(rewards) < 2:
                raise InputError("the leave-one-out anchor needs a batch of size >= 2")
            zrefs = [kto_zref(rewards, i) for i in range(len(rewards))]
        value = kto_loss(rewards, labels, config.lambda_d, config.lambda_u, zrefs=zrefs)
        grad = None
        if want_grad:
            grads = pos_g + aux_g
            weights = []
            for r, lab, z in zip(rewards, labels, zrefs):
                s = _sigmoid(r - z) if lab == 1 else _sigmoid(z - r)
                w = config.lambda_d if lab == 1 else config.lambda_u
                sign = -1.0 if lab == 1 else 1.0
                weights.append(sign * w * s * (1.0 - s) / len(rewards))
            grad = _weighted_sum(grads, weights, shape)
        return LossBreakdown(method=Method.KTO, total=value), grad

    calib = CalibrationConfig(alpha=config.alpha, pi_n=config.pi_n)
    if method is Method.BCO:
        breakdown = bco_loss(pos_r, aux_r, delta)
    elif method is Method.CBPO_RAW:
        breakdown = cbpo_raw_loss(pos_r, aux_r, delta, calib)
    elif method is Method.CBPO:
        breakdown = cbpo_loss(pos_r, aux_r, delta, calib)
    else:
        raise ConfigError(f"unknown method {method}")

    grad = None
    if want_grad:
        n_p, n_a = len(pos_r), len(aux_r)
        # d loss_positive / d reward = sigmoid(r - delta) - 1
        # d loss_negative / d reward = sigmoid(r - delta)
        pos_grad = _weighted_sum(
            pos_g, [(_sigmoid(r - delta) - 1.0) / n_p for r in pos_r], shape
        )
        aux_neg_grad = _weighted_sum(
            aux_g, [_sigmoid(r - delta) / n_a for r in aux_r], shape
        )
        if method is Method.BCO:
            grad = pos_grad + aux_neg_grad
        else:
            tar_neg_grad = _weighted_sum(
                pos_g, [_sigmoid(r - delta) / n_p for r in pos_r], shape
            )
            if method is Method.CBPO_RAW:
                grad = pos_grad + (aux_neg_grad - config.alpha * tar_neg_grad) / config.pi_n
            else:  # CBPO: subgradient 0 on the clamped branch
                if breakdown.pure_neg_raw > 0.0:
                    scale = 1.0 / (1.0 - config.alpha)
                    grad = pos_grad + scale * (aux_neg_grad - config.alpha * tar_neg_grad)
                else:
                    grad = pos_grad
    return breakdown, grad
