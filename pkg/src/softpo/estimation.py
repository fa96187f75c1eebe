"""Monte-Carlo estimation of value anchors and sparse mid-trajectory targets.

Anchors come from complete reference-policy rollouts. Sparse targets come from
recursive bisection of a trajectory: probe the midpoint success probability
with K reference rollouts, and keep splitting intervals whose endpoint
estimates disagree by at least the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import SequenceEnv
from .losses import mc_success_to_logprob
from .oracle import soft_values
from .policies import DecodingConfig, sample_rollouts
from .qparam import QZeroStore
from .store import OfflineDataset, Trajectory

FULL_DECODE = DecodingConfig(temperature=1.0, top_p=1.0)


@dataclass(frozen=True)
class SuccessEstimate:
    """Empirical success frequency from rollouts continuing a prefix."""

    prompt: object
    prefix: tuple[int, ...]
    sample_count: int
    successes: int

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")
        if not 0 <= self.successes <= self.sample_count:
            raise ValueError("successes must lie in [0, sample_count]")

    @property
    def s_hat(self) -> float:
        return self.successes / self.sample_count


def q0_from_success(s_hat: float, beta: float) -> float:
    """Anchor value beta * log(s + (1 - s) exp(-1/beta)), clipped into [-1, 0]."""
    value = float(beta * mc_success_to_logprob(s_hat, beta))
    return min(0.0, max(-1.0, value))


def estimate_success(env: SequenceEnv, prompt, ref_policy, prefix, n: int,
                     rng: np.random.Generator,
                     rollout_sink: list | None = None) -> SuccessEstimate:
    """Success frequency of n reference rollouts continuing ``prefix``."""
    rollouts = sample_rollouts(ref_policy, env, prompt, n, FULL_DECODE, rng,
                               source="pts-rollout", prefix=prefix)
    if rollout_sink is not None:
        rollout_sink.extend(rollouts)
    successes = sum(1 for t in rollouts if t.success)
    return SuccessEstimate(prompt, tuple(int(t) for t in prefix), n, successes)


def estimate_q0(env: SequenceEnv, prompt, ref_policy, n_samples: int,
                beta: float, rng: np.random.Generator,
                allow_soft: bool = False) -> tuple[float, SuccessEstimate]:
    """Monte-Carlo anchor for one prompt from complete reference rollouts.

    Binary-reward environments convert the success frequency through the
    closed form; general rewards in [-1, 0] need ``allow_soft`` and use the
    sample mean of the exponentiated reward instead.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not env.binary_rewards and not allow_soft:
        raise ValueError(
            "environment rewards are not binary; pass allow_soft=True to use "
            "the exponentiated-reward mean"
        )
    rollouts = sample_rollouts(ref_policy, env, prompt, n_samples, FULL_DECODE,
                               rng, source="reference")
    successes = sum(1 for t in rollouts if t.success)
    estimate = SuccessEstimate(prompt, (), n_samples, successes)
    if env.binary_rewards:
        return q0_from_success(estimate.s_hat, beta), estimate
    rewards = np.array([t.reward for t in rollouts])
    m = rewards.max()
    q0 = m + beta * math.log(np.mean(np.exp((rewards - m) / beta)))
    return min(0.0, max(-1.0, float(q0))), estimate


def build_q0_store(env: SequenceEnv, ref_policy, n_samples: int, beta: float,
                   rng: np.random.Generator, allow_soft: bool = False) -> QZeroStore:
    """Monte-Carlo anchors for every prompt of the environment."""
    store = QZeroStore()
    for prompt in env.prompts:
        q0, est = estimate_q0(env, prompt, ref_policy, n_samples, beta, rng,
                              allow_soft=allow_soft)
        store.add(prompt, q0, "monte-carlo", sample_count=est.sample_count)
    return store


def exact_q0_store(env: SequenceEnv, ref_policy, beta: float) -> QZeroStore:
    """Exact anchors from the enumeration oracle (root soft value per prompt)."""
    store = QZeroStore()
    for prompt in env.prompts:
        table = soft_values(env, prompt, ref_policy, beta)
        store.add(prompt, table.root_value, "exact-oracle")
    return store


@dataclass(frozen=True)
class PivotalAnnotation:
    """All probed bisection points of one trajectory, with their estimates.

    Indices count consumed tokens: 0 is the empty prefix, horizon is the full
    sequence (whose estimate is the trajectory's own outcome).
    """

    trajectory: Trajectory
    estimates: tuple[tuple[int, SuccessEstimate], ...]
    k_rollouts: int
    threshold: float

    def __post_init__(self):
        steps = [t for t, _ in self.estimates]
        if steps != sorted(set(steps)):
            raise ValueError("annotation indices must be strictly increasing")

    def sparse_targets(self) -> tuple[tuple[int, float], ...]:
        """(step, success estimate) pairs usable as value-regression targets."""
        return tuple((t, est.s_hat) for t, est in self.estimates if t >= 1)

    def annotated_trajectory(self) -> Trajectory:
        return self.trajectory.with_annotations(self.sparse_targets())


def pivotal_token_search(env: SequenceEnv, traj: Trajectory, ref_policy,
                         k: int, threshold: float, rng: np.random.Generator,
                         rollout_sink: list | None = None) -> PivotalAnnotation:
    """Recursive bisection locating where success probability jumps.

    Endpoints are the empty-prefix estimate (k rollouts) and the trajectory's
    own terminal outcome. An interval is split only while its endpoints differ
    by at least ``threshold`` and it is longer than one step; the midpoint is
    probed with k reference rollouts continuing the trajectory's prefix.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if not env.binary_rewards:
        raise ValueError("pivotal token search needs binary rewards")
    T = env.horizon
    if len(traj.tokens) != T:
        raise ValueError("trajectory is incomplete")

    estimates: dict[int, SuccessEstimate] = {}
    estimates[0] = estimate_success(env, traj.prompt, ref_policy, (), k, rng,
                                    rollout_sink)
    estimates[T] = SuccessEstimate(traj.prompt, traj.tokens, 1,
                                   1 if traj.success else 0)

    def split(lo: int, hi: int) -> None:
        if hi - lo <= 1:
            return
        if abs(estimates[lo].s_hat - estimates[hi].s_hat) < threshold:
            return
        mid = (lo + hi) // 2
        estimates[mid] = estimate_success(env, traj.prompt, ref_policy,
                                          traj.tokens[:mid], k, rng, rollout_sink)
        split(lo, mid)
        split(mid, hi)

    split(0, T)
    ordered = tuple((t, estimates[t]) for t in sorted(estimates))
    return PivotalAnnotation(traj, ordered, k, threshold)


def annotate_dataset(env: SequenceEnv, dataset: OfflineDataset, ref_policy,
                     k: int, threshold: float, rng: np.random.Generator,
                     rollout_sink: list | None = None) -> OfflineDataset:
    """Run the bisection over every record, returning an annotated copy."""
    out = OfflineDataset(dataset.vocab_size, dataset.horizon, dedup=dataset.dedup)
    for traj in dataset:
        ann = pivotal_token_search(env, traj, ref_policy, k, threshold, rng,
                                   rollout_sink)
        out.append(ann.annotated_trajectory())
    return out
