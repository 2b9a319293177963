"""Optimization loop: batching, method dispatch, EMA wiring and run state.

A run has three phases: a warm-start SFT pass over the pooled auxiliary data
(the stand-in for a general task model), a reference freeze, and the configured
method's optimization over the target/auxiliary split.  Everything is a pure
function of (dataset, config, seed): batch order, the optimizer trajectory and
the metrics log reproduce byte-identically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .alpha import DEFAULT_EPOCHS, DEFAULT_LR, AlphaEstimate, run_alpha_estimation
from .datagen import UserDataset
from .errors import ConfigError, InputError, NumericError
from .losses import (
    Batch,
    DpoPair,
    LossBreakdown,
    LossConfig,
    Method,
    method_loss_and_grad,
)
from .policy import PolicyParams, Sample, sample_completion, snapshot_reference, uniform_params
from .rewards import (
    ReferenceState,
    RewardConfig,
    delta_ema,
    delta_joint,
    ema_update,
    implicit_reward,
)

__all__ = [
    "AdamState",
    "METRICS_COLUMNS",
    "RunState",
    "TrainConfig",
    "TrainResult",
    "load_checkpoint",
    "make_batches",
    "run",
    "save_checkpoint",
    "synth_dpo_pairs",
    "train_step",
]

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "step",
    "epoch",
    "method",
    "l_pos",
    "l_aux_neg",
    "l_tar_neg",
    "pure_neg_raw",
    "pure_neg_clamped",
    "total",
    "delta",
    "ema_pos",
    "ema_aux",
)

_BINARY_METHODS = (Method.KTO, Method.BCO, Method.CBPO_RAW, Method.CBPO)


@dataclass
class TrainConfig:
    """Everything a run depends on besides the dataset itself."""

    method: Method = Method.CBPO
    epochs: int = 3
    batch_size_pos: int = 8
    batch_size_aux: int | None = None  # None: round(batch_size_pos * dataset ratio)
    learning_rate: float = 0.2
    beta: float = 0.1
    alpha: float | str = "estimate"
    ema_decay: float = 0.9
    seed: int = 0
    momentum_params: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    context_size: int = 8
    pi_n: float = 1.0
    lambda_d: float = 1.0
    lambda_u: float = 1.0
    delta_mode: str = "ema"  # "ema" or "batch" (joint per-batch mean)
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    warmstart_epochs: int = 2
    warmstart_lr: float | None = None
    dpo_rejection_budget: int = 16
    alpha_estimator_epochs: int = DEFAULT_EPOCHS
    alpha_estimator_lr: float = DEFAULT_LR

    def __post_init__(self) -> None:
        self.method = Method(self.method)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        # learning_rate 0 is allowed: a null step still logs losses.
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size_pos < 1:
            raise ConfigError("batch_size_pos must be >= 1")
        if self.batch_size_aux is not None and self.batch_size_aux < 1:
            raise ConfigError("batch_size_aux must be >= 1")
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.delta_mode not in ("ema", "batch"):
            raise ConfigError(f"delta_mode must be 'ema' or 'batch', got {self.delta_mode!r}")
        if isinstance(self.alpha, str):
            if self.alpha != "estimate":
                raise ConfigError(f"alpha must be a number or 'estimate', got {self.alpha!r}")
        elif not 0.0 <= float(self.alpha) < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0.0 < self.pi_n <= 1.0:
            raise ConfigError(f"pi_n must lie in (0, 1], got {self.pi_n}")
        if self.context_size < 1:
            raise ConfigError("context_size must be >= 1")
        if self.warmstart_epochs < 0:
            raise ConfigError("warmstart_epochs must be >= 0")
        if self.method is Method.KTO and self.batch_size_pos + (self.batch_size_aux or 1) < 2:
            raise ConfigError("KTO needs a combined batch size of >= 2")

    def resolved_aux_batch(self, ratio_x: float) -> int:
        if self.batch_size_aux is not None:
            return self.batch_size_aux
        return max(1, int(math.floor(self.batch_size_pos * ratio_x + 0.5)))


@dataclass
class AdamState:
    """First/second moment accumulators for the decoupled-weight-decay update."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0)


@dataclass
class RunState:
    """Mutable state threaded through train_step."""

    policy: PolicyParams
    reference: PolicyParams
    ema: ReferenceState
    opt: AdamState
    config: TrainConfig
    loss_config: LossConfig
    total_steps: int
    step: int = 0
    epoch: int = 0
    last_delta: float = 0.0


@dataclass
class TrainResult:
    policy: PolicyParams
    reference: PolicyParams
    ema: ReferenceState
    opt: "AdamState"
    metrics: list[dict]
    alpha_estimate: AlphaEstimate | None
    alpha_resolved: float
    aux_user_ids: list[str]
    dpo_pairs_skipped: int = 0


def _lr_at(step: int, total_steps: int, base: float, warmup_fraction: float) -> float:
    """Linear warm-up over the first fraction of steps, then linear decay to zero."""
    warmup = max(1, math.ceil(warmup_fraction * total_steps))
    if step <= warmup:
        return base * step / warmup
    if total_steps <= warmup:
        return base
    return base * max(0.0, (total_steps - step) / (total_steps - warmup))


def _adamw_apply(
    params: PolicyParams,
    grad: np.ndarray,
    opt: AdamState,
    lr: float,
    momentum: tuple[float, float, float],
    weight_decay: float,
) -> None:
    b1, b2, eps = momentum
    opt.t += 1
    opt.m = b1 * opt.m + (1.0 - b1) * grad
    opt.v = b2 * opt.v + (1.0 - b2) * grad * grad
    m_hat = opt.m / (1.0 - b1**opt.t)
    v_hat = opt.v / (1.0 - b2**opt.t)
    params.logits -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params.logits)


def make_batches(
    dataset: UserDataset,
    config: TrainConfig,
    epoch_seed: int,
    dpo_pairs: Sequence[DpoPair] | None = None,
) -> list[Batch]:
    """Seeded per-epoch batches: one epoch is one pass over the target side."""
    rng = np.random.default_rng(epoch_seed)
    if config.method is Method.DPO:
        if dpo_pairs is None:
            raise ConfigError("DPO requires synthesized pairs but none were supplied")
        if len(dpo_pairs) == 0:
            raise InputError("DPO pair set is empty")
        order = rng.permutation(len(dpo_pairs))
        bs = config.batch_size_pos
        return [
            Batch(pairs=[dpo_pairs[int(i)] for i in order[lo : lo + bs]])
            for lo in range(0, len(dpo_pairs), bs)
        ]

    pos = dataset.tar_train
    if len(pos) == 0:
        raise InputError("target training split is empty")
    pos_order = rng.permutation(len(pos))
    bs_pos = config.batch_size_pos
    n_steps = math.ceil(len(pos) / bs_pos)

    if config.method is Method.SFT:
        return [
            Batch(pos=[pos[int(i)] for i in pos_order[lo : lo + bs_pos]])
            for lo in range(0, len(pos), bs_pos)
        ]

    aux = dataset.aux_train
    if len(aux) == 0:
        raise InputError("auxiliary training split is empty")
    aux_order = rng.permutation(len(aux))
    bs_aux = config.resolved_aux_batch(dataset.ratio_x)
    batches = []
    cursor = 0
    for step in range(n_steps):
        lo = step * bs_pos
        pos_chunk = [pos[int(i)] for i in pos_order[lo : lo + bs_pos]]
        aux_chunk = []
        for _ in range(bs_aux):
            aux_chunk.append(aux[int(aux_order[cursor % len(aux)])])
            cursor += 1
        batches.append(Batch(pos=pos_chunk, aux=aux_chunk))
    return batches


def _diagnostic_dump(
    batch: Batch, breakdown: LossBreakdown | None, state: RunState
) -> dict:
    def _samples(samples: Sequence[Sample]) -> list[dict]:
        return [
            {"user_id": s.user_id, "x": list(s.x), "y": list(s.y), "split": s.split}
            for s in samples
        ]

    dump = {
        "step": state.step,
        "epoch": state.epoch,
        "method": state.config.method.value,
        "pos": _samples(batch.pos),
        "aux": _samples(batch.aux),
        "pairs": [
            {"x": list(p.x), "y_w": list(p.y_w), "y_l": list(p.y_l)} for p in batch.pairs
        ],
    }
    if breakdown is not None:
        dump["breakdown"] = {
            "l_pos": breakdown.l_pos,
            "l_aux_neg": breakdown.l_aux_neg,
            "l_tar_neg": breakdown.l_tar_neg,
            "pure_neg_raw": breakdown.pure_neg_raw,
            "pure_neg_clamped": breakdown.pure_neg_clamped,
            "total": breakdown.total,
        }
    return dump


def train_step(state: RunState, batch: Batch) -> tuple[RunState, LossBreakdown]:
    """One optimization step; updates the EMA before the anchor is read."""
    state.step += 1
    method = state.config.method
    delta = 0.0
    if method in _BINARY_METHODS:
        if len(batch.pos) == 0 or len(batch.aux) == 0:
            raise InputError(
                f"{method.value} step needs non-empty positive and auxiliary sides"
            )
        rcfg = RewardConfig(beta=state.config.beta)
        pos_r = [
            implicit_reward(state.policy, state.reference, rcfg, s.x, s.y)
            for s in batch.pos
        ]
        aux_r = [
            implicit_reward(state.policy, state.reference, rcfg, s.x, s.y)
            for s in batch.aux
        ]
        pos_mean = sum(pos_r) / len(pos_r)
        aux_mean = sum(aux_r) / len(aux_r)
        if not (math.isfinite(pos_mean) and math.isfinite(aux_mean)):
            raise NumericError(
                f"non-finite batch rewards at step {state.step}",
                details=_diagnostic_dump(batch, None, state),
            )
        state.ema = ema_update(state.ema, pos_mean, aux_mean)
        if state.config.delta_mode == "ema":
            delta = delta_ema(state.ema)
        else:
            delta = delta_joint(pos_r, aux_r)
    state.last_delta = delta

    breakdown, grad = method_loss_and_grad(
        method, batch, state.policy, state.reference, state.loss_config, delta
    )
    if not (math.isfinite(breakdown.total) and bool(np.all(np.isfinite(grad)))):
        raise NumericError(
            f"non-finite loss or gradient at step {state.step}",
            details=_diagnostic_dump(batch, breakdown, state),
        )
    lr = _lr_at(
        state.step, state.total_steps, state.config.learning_rate, state.config.warmup_fraction
    )
    _adamw_apply(
        state.policy, grad, state.opt, lr, state.config.momentum_params,
        state.config.weight_decay,
    )
    return state, breakdown


def synth_dpo_pairs(
    dataset: UserDataset,
    policy: PolicyParams,
    seed: int,
    budget: int = 16,
) -> tuple[list[DpoPair], int]:
    """Rejection-sample a distinct completion per target sample from the policy.

    Samples whose rejection budget is exhausted are skipped and counted.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    pairs: list[DpoPair] = []
    skipped = 0
    for s in dataset.tar_train:
        found = None
        for _ in range(budget):
            candidate = sample_completion(policy, s.x, len(s.y), rng)
            if candidate != s.y:
                found = candidate
                break
        if found is None:
            skipped += 1
        else:
            pairs.append(DpoPair(x=s.x, y_w=s.y, y_l=found))
    if skipped:
        logger.warning("DPO pair synthesis skipped %d samples (budget exhausted)", skipped)
    return pairs, skipped


def _metrics_row(step: int, epoch: int, breakdown: LossBreakdown, delta: float,
                 ema: ReferenceState) -> dict:
    return {
        "step": step,
        "epoch": epoch,
        "method": breakdown.method.value,
        "l_pos": breakdown.l_pos,
        "l_aux_neg": breakdown.l_aux_neg,
        "l_tar_neg": breakdown.l_tar_neg,
        "pure_neg_raw": breakdown.pure_neg_raw,
        "pure_neg_clamped": breakdown.pure_neg_clamped,
        "total": breakdown.total,
        "delta": delta,
        "ema_pos": ema.ema_pos if ema.initialized else 0.0,
        "ema_aux": ema.ema_aux if ema.initialized else 0.0,
    }


def _epoch_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def _sft_phase(
    policy: PolicyParams,
    samples: Sequence[Sample],
    epochs: int,
    lr: float,
    config: TrainConfig,
    seed_rng: np.random.Generator,
) -> None:
    """Plain cross-entropy passes over a sample list (used for the warm start)."""
    if epochs == 0:
        return
    if len(samples) == 0:
        raise InputError("warm-start sample pool is empty")
    bs = config.batch_size_pos
    steps_per_epoch = math.ceil(len(samples) / bs)
    total = epochs * steps_per_epoch
    opt = AdamState.zeros(policy.logits.shape)
    loss_cfg = LossConfig(beta=config.beta)
    step = 0
    for _ in range(epochs):
        rng = np.random.default_rng(_epoch_seed(seed_rng))
        order = rng.permutation(len(samples))
        for lo in range(0, len(samples), bs):
            step += 1
            batch = Batch(pos=[samples[int(i)] for i in order[lo : lo + bs]])
            breakdown, grad = method_loss_and_grad(
                Method.SFT, batch, policy, policy, loss_cfg, 0.0
            )
            if not math.isfinite(breakdown.total):
                raise NumericError(f"non-finite warm-start loss at step {step}")
            _adamw_apply(
                policy, grad, opt,
                _lr_at(step, total, lr, config.warmup_fraction),
                config.momentum_params, config.weight_decay,
            )


def run(dataset: UserDataset, config: TrainConfig, vocab_size: int) -> TrainResult:
    """Warm start on the auxiliary pool, freeze the reference, run the method."""
    if len(dataset.tar_train) == 0:
        raise InputError("dataset has no target training samples")
    root = np.random.SeedSequence(config.seed)
    ss_warm, ss_method, ss_pairs, ss_alpha = root.spawn(4)
    warm_rng = np.random.default_rng(ss_warm)
    method_rng = np.random.default_rng(ss_method)

    policy = uniform_params(vocab_size, config.context_size)
    warm_lr = config.warmstart_lr if config.warmstart_lr is not None else config.learning_rate
    _sft_phase(policy, dataset.aux_train, config.warmstart_epochs, warm_lr, config, warm_rng)
    reference = snapshot_reference(policy)

    alpha_estimate: AlphaEstimate | None = None
    alpha_resolved = 0.0
    if config.method in (Method.CBPO, Method.CBPO_RAW):
        if config.alpha == "estimate":
            alpha_estimate = run_alpha_estimation(
                dataset.tar_train,
                dataset.aux_train,
                vocab_size,
                epochs=config.alpha_estimator_epochs,
                lr=config.alpha_estimator_lr,
                seed=int(np.random.default_rng(ss_alpha).integers(0, 2**31)),
            )
            alpha_resolved = alpha_estimate.alpha_hat
        else:
            alpha_resolved = float(config.alpha)

    loss_config = LossConfig(
        beta=config.beta,
        alpha=alpha_resolved,
        pi_n=config.pi_n,
        lambda_d=config.lambda_d,
        lambda_u=config.lambda_u,
    )

    dpo_pairs: list[DpoPair] | None = None
    skipped = 0
    if config.method is Method.DPO:
        dpo_pairs, skipped = synth_dpo_pairs(
            dataset, policy, int(np.random.default_rng(ss_pairs).integers(0, 2**31)),
            budget=config.dpo_rejection_budget,
        )
        if len(dpo_pairs) == 0:
            raise InputError("DPO pair synthesis produced no usable pairs")
        steps_per_epoch = math.ceil(len(dpo_pairs) / config.batch_size_pos)
    else:
        steps_per_epoch = math.ceil(len(dataset.tar_train) / config.batch_size_pos)

    state = RunState(
        policy=policy,
        reference=reference,
        ema=ReferenceState(decay=config.ema_decay),
        opt=AdamState.zeros(policy.logits.shape),
        config=config,
        loss_config=loss_config,
        total_steps=config.epochs * steps_per_epoch,
    )
    metrics: list[dict] = []
    for epoch in range(config.epochs):
        state.epoch = epoch
        batches = make_batches(dataset, config, _epoch_seed(method_rng), dpo_pairs)
        for batch in batches:
            state, breakdown = train_step(state, batch)
            metrics.append(
                _metrics_row(state.step, epoch, breakdown, state.last_delta, state.ema)
            )
    return TrainResult(
        policy=state.policy,
        reference=state.reference,
        ema=state.ema,
        opt=state.opt,
        metrics=metrics,
        alpha_estimate=alpha_estimate,
        alpha_resolved=alpha_resolved,
        aux_user_ids=dataset.aux_user_ids,
        dpo_pairs_skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Run-state persistence
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    policy: PolicyParams
    reference: PolicyParams
    ema: ReferenceState
    opt: AdamState
    step: int
    vocab_size: int
    config: dict
    dataset_meta: dict


def _params_doc(params: PolicyParams) -> dict:
    return {
        "vocab_size": params.vocab_size,
        "context_size": params.context_size,
        "logits": [[float(v) for v in row] for row in params.logits],
    }


def _params_from_doc(doc: dict) -> PolicyParams:
    return PolicyParams(
        vocab_size=int(doc["vocab_size"]),
        context_size=int(doc["context_size"]),
        logits=np.asarray(doc["logits"], dtype=np.float64),
    )


def save_checkpoint(
    path: str | Path,
    result: TrainResult,
    config: TrainConfig,
    vocab_size: int,
    dataset_meta: dict,
) -> None:
    doc = {
        "schema_version": 1,
        "vocab_size": vocab_size,
        "step": len(result.metrics),
        "policy": _params_doc(result.policy),
        "reference": _params_doc(result.reference),
        "ema": {
            "ema_pos": result.ema.ema_pos,
            "ema_aux": result.ema.ema_aux,
            "decay": result.ema.decay,
            "initialized": result.ema.initialized,
        },
        "optimizer": {
            "m": [[float(v) for v in row] for row in result.opt.m],
            "v": [[float(v) for v in row] for row in result.opt.v],
            "t": result.opt.t,
        },
        "config": {
            "method": config.method.value,
            "epochs": config.epochs,
            "batch_size_pos": config.batch_size_pos,
            "batch_size_aux": config.batch_size_aux,
            "learning_rate": config.learning_rate,
            "beta": config.beta,
            "alpha": config.alpha if isinstance(config.alpha, str) else float(config.alpha),
            "alpha_resolved": result.alpha_resolved,
            "ema_decay": config.ema_decay,
            "seed": config.seed,
            "momentum_params": list(config.momentum_params),
            "context_size": config.context_size,
            "pi_n": config.pi_n,
            "lambda_d": config.lambda_d,
            "lambda_u": config.lambda_u,
            "delta_mode": config.delta_mode,
            "weight_decay": config.weight_decay,
            "warmup_fraction": config.warmup_fraction,
            "warmstart_epochs": config.warmstart_epochs,
            "warmstart_lr": config.warmstart_lr,
            "dpo_rejection_budget": config.dpo_rejection_budget,
            "alpha_estimator_epochs": config.alpha_estimator_epochs,
            "alpha_estimator_lr": config.alpha_estimator_lr,
        },
        "dataset_meta": dataset_meta,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != 1:
        raise InputError(f"unsupported checkpoint version {doc.get('schema_version')}")
    ema_doc = doc["ema"]
    opt_doc = doc["optimizer"]
    return Checkpoint(
        policy=_params_from_doc(doc["policy"]),
        reference=_params_from_doc(doc["reference"]),
        ema=ReferenceState(
            ema_pos=float(ema_doc["ema_pos"]),
            ema_aux=float(ema_doc["ema_aux"]),
            decay=float(ema_doc["decay"]),
            initialized=bool(ema_doc["initialized"]),
        ),
        opt=AdamState(
            m=np.asarray(opt_doc["m"], dtype=np.float64),
            v=np.asarray(opt_doc["v"], dtype=np.float64),
            t=int(opt_doc["t"]),
        ),
        step=int(doc["step"]),
        vocab_size=int(doc["vocab_size"]),
        config=doc["config"],
        dataset_meta=doc["dataset_meta"],
    )
