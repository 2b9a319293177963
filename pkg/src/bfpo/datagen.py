"""Synthetic multi-user preference corpus with a controllable overlap knob.

Every user's completions mix one shared token distribution with a user-specific
distribution supported on tokens no other user emits.  The mixing weight is the
single ground-truth overlap parameter: at 1.0 all users are indistinguishable,
at 0.0 their supports are disjoint.  Prompts come from a shared pool, so user
identity lives entirely in completion style.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .alpha import embed
from .errors import InputError
from .policy import Sample

__all__ = [
    "PopulationSpec",
    "UserDataset",
    "build_user_dataset",
    "generate_population",
    "load_corpus",
    "load_population_spec",
    "save_corpus",
    "save_population_spec",
    "truncate_history",
    "user_mean_embedding",
]

PROMPT_LEN = 3
HELDOUT_FRACTION = 0.2
SHARED_FRACTION = 0.5
GROUPINGS = ("random", "unique", "non_unique")


@dataclass(frozen=True)
class PopulationSpec:
    """Knobs of the synthetic population; generation is a pure function of these."""

    n_users: int
    vocab_size: int
    overlap_lambda: float
    samples_per_user: int
    prompt_pool_size: int
    seq_len: int
    seed: int

    def __post_init__(self) -> None:
        for name in ("n_users", "vocab_size", "samples_per_user", "prompt_pool_size", "seq_len"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.overlap_lambda <= 1.0:
            raise InputError(
                f"overlap_lambda must lie in [0, 1], got {self.overlap_lambda}"
            )
        if self.vocab_size < 2:
            raise InputError("vocab_size must be >= 2")


def _user_id(index: int, n_users: int) -> str:
    width = max(3, len(str(n_users - 1)))
    return f"u{index:0{width}d}"


def _token_partition(spec: PopulationSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """Seed-derived disjoint supports: one shared block, one block per user."""
    shared_size = max(1, int(spec.vocab_size * SHARED_FRACTION))
    block = (spec.vocab_size - shared_size) // spec.n_users
    if block < 1:
        raise InputError(
            f"vocab_size {spec.vocab_size} too small for {spec.n_users} users "
            f"with a shared block of {shared_size}"
        )
    # Fold the leftover tokens into the shared block so nothing is wasted.
    shared_size = spec.vocab_size - block * spec.n_users
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    perm = rng.permutation(spec.vocab_size)
    shared = np.sort(perm[:shared_size])
    users = [
        np.sort(perm[shared_size + u * block : shared_size + (u + 1) * block])
        for u in range(spec.n_users)
    ]
    return shared, users


def generate_population(spec: PopulationSpec) -> dict[str, list[Sample]]:
    """Per-user sample lists, canonical order (user id, then sample index)."""
    shared, user_blocks = _token_partition(spec)
    prompt_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    prompts = [
        tuple(int(t) for t in prompt_rng.integers(0, spec.vocab_size, PROMPT_LEN))
        for _ in range(spec.prompt_pool_size)
    ]
    n_train = math.ceil((1.0 - HELDOUT_FRACTION) * spec.samples_per_user)
    population: dict[str, list[Sample]] = {}
    for u in range(spec.n_users):
        uid = _user_id(u, spec.n_users)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, u]))
        own = user_blocks[u]
        samples: list[Sample] = []
        for i in range(spec.samples_per_user):
            x = prompts[int(rng.integers(0, spec.prompt_pool_size))]
            y: list[int] = []
            for _ in range(spec.seq_len):
                if rng.random() < spec.overlap_lambda:
                    y.append(int(shared[int(rng.integers(0, len(shared)))]))
                else:
                    y.append(int(own[int(rng.integers(0, len(own)))]))
            split = "train" if i < n_train else "heldout"
            samples.append(Sample(user_id=uid, x=x, y=tuple(y), split=split))
        population[uid] = samples
    return population


@dataclass
class UserDataset:
    """A target user's positive history plus the selected auxiliary pool."""

    target_user: str
    h_tar: list[Sample]
    h_aux: list[Sample]
    ratio_x: float
    grouping: str = "random"

    @property
    def tar_train(self) -> list[Sample]:
        return [s for s in self.h_tar if s.split == "train"]

    @property
    def tar_heldout(self) -> list[Sample]:
        return [s for s in self.h_tar if s.split == "heldout"]

    @property
    def aux_train(self) -> list[Sample]:
        return [s for s in self.h_aux if s.split == "train"]

    @property
    def aux_heldout(self) -> list[Sample]:
        return [s for s in self.h_aux if s.split == "heldout"]

    @property
    def aux_user_ids(self) -> list[str]:
        return sorted({s.user_id for s in self.h_aux})


def user_mean_embedding(samples: Sequence[Sample], vocab_size: int) -> np.ndarray:
    """Mean bag-of-tokens embedding of a user's training history."""
    train = [s for s in samples if s.split == "train"]
    if not train:
        train = list(samples)
    acc = np.zeros(vocab_size)
    for s in train:
        acc += embed(s, vocab_size)
    return acc / len(train)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def build_user_dataset(
    population: dict[str, list[Sample]],
    target_user: str,
    ratio_x: float,
    grouping: str,
    seed: int,
    vocab_size: int,
) -> UserDataset:
    """Select the auxiliary pool for one target user.

    ``random`` draws uniformly over all other users' samples; ``unique`` and
    ``non_unique`` rank whole users by the Euclidean distance between mean
    history embeddings (farthest / nearest first) and take the minimal number
    of users needed to reach the requested volume.
    """
    if target_user not in population:
        raise InputError(f"unknown target user {target_user!r}")
    if grouping not in GROUPINGS:
        raise InputError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")
    if ratio_x <= 0:
        raise InputError(f"ratio_x must be positive, got {ratio_x}")
    h_tar = list(population[target_user])
    n_aux = _round_half_up(ratio_x * len(h_tar))
    others = sorted(uid for uid in population if uid != target_user)
    pool = [s for uid in others for s in population[uid]]
    if n_aux > len(pool):
        raise InputError(
            f"need {n_aux} auxiliary samples but only {len(pool)} available"
        )

    if grouping == "random":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        idx = np.sort(rng.choice(len(pool), size=n_aux, replace=False))
        h_aux = [pool[int(i)] for i in idx]
    else:
        target_emb = user_mean_embedding(h_tar, vocab_size)
        distances = []
        for uid in others:
            emb = user_mean_embedding(population[uid], vocab_size)
            distances.append((float(np.linalg.norm(emb - target_emb)), uid))
        reverse = grouping == "unique"
        distances.sort(key=lambda pair: (-pair[0], pair[1]) if reverse else pair)
        h_aux = []
        for _, uid in distances:
            if len(h_aux) >= n_aux:
                break
            take = min(n_aux - len(h_aux), len(population[uid]))
            h_aux.extend(population[uid][:take])
    return UserDataset(
        target_user=target_user,
        h_tar=h_tar,
        h_aux=h_aux,
        ratio_x=ratio_x,
        grouping=grouping,
    )


def truncate_history(dataset: UserDataset, fraction: float) -> UserDataset:
    """Keep the first ceil(fraction * |H_tar|) target samples, rescale the pool."""
    if not 0.0 < fraction <= 1.0:
        raise InputError(f"fraction must lie in (0, 1], got {fraction}")
    n_keep = math.ceil(fraction * len(dataset.h_tar))
    if n_keep == 0:
        raise InputError("truncation would leave no target samples")
    h_tar = dataset.h_tar[:n_keep]
    n_aux = min(_round_half_up(dataset.ratio_x * n_keep), len(dataset.h_aux))
    return UserDataset(
        target_user=dataset.target_user,
        h_tar=h_tar,
        h_aux=dataset.h_aux[:n_aux],
        ratio_x=dataset.ratio_x,
        grouping=dataset.grouping,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_corpus(population: dict[str, list[Sample]], path: str | Path) -> None:
    """One sample per line, canonical user order, byte-stable."""
    lines = []
    for uid in sorted(population):
        for s in population[uid]:
            lines.append(
                json.dumps(
                    {
                        "user_id": s.user_id,
                        "x": list(s.x),
                        "y": list(s.y),
                        "split": s.split,
                    },
                    separators=(",", ":"),
                )
            )
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus(path: str | Path) -> dict[str, list[Sample]]:
    population: dict[str, list[Sample]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"corpus line {lineno}: invalid JSON ({exc})") from exc
        try:
            sample = Sample(
                user_id=str(row["user_id"]),
                x=tuple(int(t) for t in row["x"]),
                y=tuple(int(t) for t in row["y"]),
                split=str(row["split"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"corpus line {lineno}: malformed sample ({exc})") from exc
        if len(sample.y) == 0:
            raise InputError(f"corpus line {lineno}: empty completion")
        if sample.split not in ("train", "heldout"):
            raise InputError(f"corpus line {lineno}: bad split {sample.split!r}")
        if any(t < 0 for t in sample.x) or any(t < 0 for t in sample.y):
            raise InputError(f"corpus line {lineno}: negative token id")
        population.setdefault(sample.user_id, []).append(sample)
    if not population:
        raise InputError(f"corpus {path} is empty")
    return population


def save_population_spec(spec: PopulationSpec, path: str | Path) -> None:
    doc = {
        "schema_version": 1,
        "n_users": spec.n_users,
        "vocab_size": spec.vocab_size,
        "overlap_lambda": spec.overlap_lambda,
        "samples_per_user": spec.samples_per_user,
        "prompt_pool_size": spec.prompt_pool_size,
        "seq_len": spec.seq_len,
        "seed": spec.seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_population_spec(path: str | Path) -> PopulationSpec:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != 1:
        raise InputError(f"unsupported population spec version {doc.get('schema_version')}")
    return PopulationSpec(
        n_users=int(doc["n_users"]),
        vocab_size=int(doc["vocab_size"]),
        overlap_lambda=float(doc["overlap_lambda"]),
        samples_per_user=int(doc["samples_per_user"]),
        prompt_pool_size=int(doc["prompt_pool_size"]),
        seq_len=int(doc["seq_len"]),
        seed=int(doc["seed"]),
    )
