"""Held-out metrics for a personalized checkpoint.

Three numbers summarize a run: per-token negative log-likelihood on the target
user's held-out data, the fraction of held-out (target, auxiliary) pairs whose
implicit reward ranks the target sample higher, and the per-token
log-probability shift of the personalized policy over the frozen warm-start
policy on auxiliary held-out data (negative values mean shared preferences
were eroded).
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass

from .datagen import UserDataset
from .errors import InputError
from .losses import sft_loss
from .policy import PolicyParams, Sample, log_prob
from .rewards import RewardConfig, implicit_reward

__all__ = ["EvalReport", "evaluate_policy"]


@dataclass(frozen=True)
class EvalReport:
    heldout_nll: float
    pref_acc: float
    delta_logp_aux: float
    target_user: str
    method: str
    n_tar_heldout: int
    n_aux_heldout: int
    n_pairs: int
    config_hash: str
    checkpoint_step: int

    def to_dict(self) -> dict:
        return {
            "heldout_nll": self.heldout_nll,
            "pref_acc": self.pref_acc,
            "delta_logp_aux": self.delta_logp_aux,
            "target_user": self.target_user,
            "method": self.method,
            "n_tar_heldout": self.n_tar_heldout,
            "n_aux_heldout": self.n_aux_heldout,
            "n_pairs": self.n_pairs,
            "config_hash": self.config_hash,
            "checkpoint_step": self.checkpoint_step,
        }


def _heldout(population: dict[str, list[Sample]], user_ids: list[str]) -> list[Sample]:
    out: list[Sample] = []
    for uid in user_ids:
        if uid not in population:
            raise InputError(f"user {uid!r} missing from corpus")
        out.extend(s for s in population[uid] if s.split == "heldout")
    return out


def _pair_accuracy(tar_rewards: list[float], aux_rewards: list[float]) -> float:
    """Fraction of (target, aux) pairs won by the target sample; ties count half."""
    ordered = sorted(aux_rewards)
    score = 0.0
    for r in tar_rewards:
        lo = bisect_left(ordered, r)
        hi = bisect_right(ordered, r)
        score += lo + 0.5 * (hi - lo)
    return score / (len(tar_rewards) * len(aux_rewards))


def evaluate_policy(
    policy: PolicyParams,
    reference: PolicyParams,
    population: dict[str, list[Sample]],
    target_user: str,
    aux_user_ids: list[str],
    beta: float,
    method: str = "",
    config_hash: str = "",
    checkpoint_step: int = 0,
) -> EvalReport:
    """Deterministic held-out report for a (policy, reference) pair."""
    if target_user not in population:
        raise InputError(f"target user {target_user!r} missing from corpus")
    tar_held = [s for s in population[target_user] if s.split == "heldout"]
    aux_held = _heldout(population, aux_user_ids)
    if not tar_held:
        raise InputError(f"no held-out samples for target user {target_user!r}")
    if not aux_held:
        raise InputError("no held-out samples for the auxiliary users")

    nll = sft_loss(policy, tar_held)

    rcfg = RewardConfig(beta=beta)
    tar_rewards = [implicit_reward(policy, reference, rcfg, s.x, s.y) for s in tar_held]
    aux_rewards = [implicit_reward(policy, reference, rcfg, s.x, s.y) for s in aux_held]
    acc = _pair_accuracy(tar_rewards, aux_rewards)

    diff = 0.0
    tokens = 0
    for s in aux_held:
        diff += log_prob(policy, s.x, s.y) - log_prob(reference, s.x, s.y)
        tokens += len(s.y)
    delta_logp = diff / tokens

    return EvalReport(
        heldout_nll=nll,
        pref_acc=acc,
        delta_logp_aux=delta_logp,
        target_user=target_user,
        method=method,
        n_tar_heldout=len(tar_held),
        n_aux_heldout=len(aux_held),
        n_pairs=len(tar_held) * len(aux_held),
        config_hash=config_hash,
        checkpoint_step=checkpoint_step,
    )


def evaluate_dataset_policy(
    policy: PolicyParams,
    reference: PolicyParams,
    dataset: UserDataset,
    beta: float,
) -> EvalReport:
    """Report computed straight from an in-memory dataset (library convenience)."""
    population = {dataset.target_user: dataset.h_tar}
    for s in dataset.h_aux:
        population.setdefault(s.user_id, []).append(s)
    return evaluate_policy(
        policy,
        reference,
        population,
        dataset.target_user,
        dataset.aux_user_ids,
        beta,
    )
