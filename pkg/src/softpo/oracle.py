"""Exact soft-RL ground truth by backward recursion over the prefix trie.

Everything here is double-precision enumeration: soft values of every prefix,
the optimal next-token policy derived from them, and exact objective/KL
diagnostics for arbitrary policies. Tables are immutable once built.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import SequenceEnv, all_sequences, sequence_rank
from .errors import ConsistencyError


def softmax_operator(dist, values, beta: float) -> float:
    """Generalized softmax: beta * log sum_i dist[i] * exp(values[i] / beta).

    Interpolates between the expectation (beta -> inf) and the max
    (beta -> 0+) of ``values`` under ``dist``. Computed with max-subtraction,
    so constant value vectors are returned exactly.
    """
    dist = np.asarray(dist, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if dist.shape != values.shape or dist.ndim != 1:
        raise ValueError("dist and values must be 1-D vectors of equal length")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if abs(dist.sum() - 1.0) > 1e-9 or (dist < 0).any():
        raise ValueError("dist must be a probability vector (sum 1 within 1e-9)")
    m = values.max()
    return float(m + beta * np.log(np.sum(dist * np.exp((values - m) / beta))))


@dataclass(frozen=True)
class SoftValueTable:
    """Exact soft value of every prefix of one prompt, at a fixed beta.

    ``levels[t]`` holds the values of all length-t prefixes indexed by
    lexicographic rank; ``levels[horizon]`` equals the reward table.
    """

    prompt: object
    vocab_size: int
    horizon: int
    beta: float
    levels: tuple[np.ndarray, ...]

    @property
    def root_value(self) -> float:
        """Soft value of the prompt itself (empty prefix)."""
        return float(self.levels[0][0])

    @property
    def log_partition(self) -> float:
        """log Z = root value / beta."""
        return self.root_value / self.beta

    def value(self, prefix: Sequence[int]) -> float:
        t = len(prefix)
        if t > self.horizon:
            raise ValueError("prefix longer than horizon")
        return float(self.levels[t][sequence_rank(prefix, self.vocab_size)])

    def max_bellman_residual(self, ref_policy) -> float:
        """max over prefixes of |Q_t - softmax-operator over next tokens of Q_{t+1}|."""
        worst = 0.0
        for t in range(self.horizon):
            rows = ref_rows(ref_policy, self.prompt, self.vocab_size, t)
            child = self.levels[t + 1].reshape(-1, self.vocab_size)
            m = child.max(axis=1)
            s = m + self.beta * np.log(
                np.sum(np.exp(rows) * np.exp((child - m[:, None]) / self.beta), axis=1)
            )
            worst = max(worst, float(np.abs(self.levels[t] - s).max()))
        return worst


@dataclass(frozen=True)
class OptimalPolicyTable:
    """Per-prefix next-token rows of the optimal policy and of its reference.

    ``rows[t]`` has shape (V**t, V): probabilities of the next token after each
    length-t prefix. ``ref_rows[t]`` is the reference policy it was derived from.
    """

    prompt: object
    vocab_size: int
    horizon: int
    beta: float
    rows: tuple[np.ndarray, ...]
    ref_rows: tuple[np.ndarray, ...]

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray:
        t = len(prefix)
        if t >= self.horizon:
            raise ValueError("prefix already complete")
        return self.rows[t][sequence_rank(prefix, self.vocab_size)].copy()

    def sequence_logprobs(self) -> np.ndarray:
        """Log-probability of every full sequence under the optimal policy."""
        return accumulate_rows([np.log(r) for r in self.rows])

    def sequence_logprob(self, tokens: Sequence[int]) -> float:
        total = 0.0
        for t, tok in enumerate(tokens):
            total += float(np.log(self.rows[t][sequence_rank(tokens[:t], self.vocab_size), tok]))
        return total


def ref_rows(policy, prompt, vocab_size: int, t: int) -> np.ndarray:
    """Log-prob rows of a policy over all length-t prefixes, shape (V**t, V)."""
    return policy.next_logprobs(prompt, all_sequences(vocab_size, t))


def accumulate_rows(log_rows: list[np.ndarray]) -> np.ndarray:
    """Fold per-level next-token log rows into full-sequence log-probs (rank order)."""
    acc = np.zeros(1, dtype=np.float64)
    for rows in log_rows:
        acc = (acc[:, None] + rows).ravel()
    return acc


def sequence_logprobs(policy, env: SequenceEnv, prompt) -> np.ndarray:
    """Log-probability of every full sequence under ``policy``, by rank."""
    rows = [ref_rows(policy, prompt, env.vocab_size, t) for t in range(env.horizon)]
    return accumulate_rows(rows)


def soft_values(env: SequenceEnv, prompt, ref_policy, beta: float) -> SoftValueTable:
    """Backward dynamic program over the prefix trie.

    Base case: the value of a full sequence is its reward. Interior: the
    generalized softmax of child values under the reference next-token row.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    V, T = env.vocab_size, env.horizon
    levels: list[np.ndarray] = [None] * (T + 1)  # type: ignore[list-item]
    levels[T] = env.reward_table(prompt).astype(np.float64)
    for t in range(T - 1, -1, -1):
        child = levels[t + 1].reshape(-1, V)
        probs = np.exp(ref_rows(ref_policy, prompt, V, t))
        m = child.max(axis=1)
        levels[t] = m + beta * np.log(
            np.sum(probs * np.exp((child - m[:, None]) / beta), axis=1)
        )
    return SoftValueTable(prompt, V, T, float(beta), tuple(levels))


def optimal_policy(table: SoftValueTable, ref_policy) -> OptimalPolicyTable:
    """Tilt each reference row by exp(advantage / beta).

    The advantage of token a after prefix s is Q(s + a) - Q(s); rows come out
    normalized up to float residue, which is absorbed by renormalization.
    """
    V, T, beta = table.vocab_size, table.horizon, table.beta
    rows: list[np.ndarray] = []
    refs: list[np.ndarray] = []
    for t in range(T):
        ref = np.exp(ref_rows(ref_policy, table.prompt, V, t))
        if ref.shape[0] != table.levels[t].shape[0]:
            raise ConsistencyError("reference policy does not cover the table's prefixes")
        child = table.levels[t + 1].reshape(-1, V)
        row = ref * np.exp((child - table.levels[t][:, None]) / beta)
        sums = row.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ConsistencyError("optimal-policy row deviates from normalization")
        rows.append(row / sums[:, None])
        refs.append(ref)
    return OptimalPolicyTable(table.prompt, V, T, beta, tuple(rows), tuple(refs))


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Exact decomposition of the KL-regularized objective for one prompt."""

    objective: float        # E_pi[r] - beta * KL[pi, ref]
    expected_reward: float
    kl_ref: float           # KL[pi, ref]
    kl_opt: float           # KL[pi, optimal]
    soft_value: float       # root soft value of the reference policy
    entropy: float          # sequence-level entropy of pi


class ObjectiveEvaluator:
    """Repeated exact evaluation of policies against one (env, prompt, beta).

    Caches everything that does not depend on the evaluated policy: the value
    table, the optimal-policy rows, and the reference/optimal leaf log-probs.
    """

    def __init__(self, env: SequenceEnv, prompt, ref_policy, beta: float,
                 table: SoftValueTable | None = None,
                 opt_table: OptimalPolicyTable | None = None):
        self.env = env
        self.prompt = prompt
        self.beta = float(beta)
        self.table = table if table is not None else soft_values(env, prompt, ref_policy, beta)
        self.opt_table = opt_table if opt_table is not None \
            else optimal_policy(self.table, ref_policy)
        self.rewards = env.reward_table(prompt)
        self.lp_ref = sequence_logprobs(ref_policy, env, prompt)
        self.lp_opt = self.opt_table.sequence_logprobs()

    def of(self, policy) -> ObjectiveBreakdown:
        lp = sequence_logprobs(policy, self.env, self.prompt)
        p = np.exp(lp)
        expected_reward = float(p @ self.rewards)
        kl_ref = float(p @ (lp - self.lp_ref))
        kl_opt = float(p @ (lp - self.lp_opt))
        entropy = float(-(p @ lp))
        return ObjectiveBreakdown(
            objective=expected_reward - self.beta * kl_ref,
            expected_reward=expected_reward,
            kl_ref=kl_ref,
            kl_opt=kl_opt,
            soft_value=self.table.root_value,
            entropy=entropy,
        )


def objective_value(env: SequenceEnv, prompt, policy, ref_policy, beta: float,
                    table: SoftValueTable | None = None,
                    opt_table: OptimalPolicyTable | None = None) -> ObjectiveBreakdown:
    """Exact objective and KL diagnostics by full enumeration.

    The two sides of the identity
    ``E_pi[r] - beta KL[pi, ref] = root_value - beta KL[pi, opt]``
    are computed along independent paths (reward/reference enumeration on the
    left, value table plus optimal-policy rows on the right), so comparing them
    is a real consistency check rather than a tautology.
    """
    return ObjectiveEvaluator(env, prompt, ref_policy, beta, table, opt_table).of(policy)
