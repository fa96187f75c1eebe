"""Enumerable fixed-length token environments with deterministic terminal rewards.

Every environment maps (prompt, full token sequence of length ``horizon``) to a
reward in [-1, 0], deterministically. The sequence space per prompt is capped at
``ENUM_BUDGET`` so that exact enumeration stays affordable.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CapacityError

# Maximum number of sequences (vocab_size ** horizon) per prompt.
ENUM_BUDGET = 10**6


def all_sequences(vocab_size: int, length: int) -> np.ndarray:
    """All token sequences of the given length, lexicographic, shape (V**length, length)."""
    n = vocab_size**length
    if length == 0:
        return np.zeros((1, 0), dtype=np.int64)
    ranks = np.arange(n, dtype=np.int64)
    powers = vocab_size ** np.arange(length - 1, -1, -1, dtype=np.int64)
    return (ranks[:, None] // powers) % vocab_size


def sequence_rank(tokens: Sequence[int], vocab_size: int) -> int:
    """Lexicographic rank of a token sequence (base-V integer)."""
    rank = 0
    for tok in tokens:
        rank = rank * vocab_size + int(tok)
    return rank


def sequence_ranks(seqs: np.ndarray, vocab_size: int) -> np.ndarray:
    """Vectorized :func:`sequence_rank` over rows of an (N, L) array."""
    if seqs.shape[1] == 0:
        return np.zeros(seqs.shape[0], dtype=np.int64)
    powers = vocab_size ** np.arange(seqs.shape[1] - 1, -1, -1, dtype=np.int64)
    return seqs @ powers


class SequenceEnv:
    """Base environment: fixed horizon, enumerable, deterministic terminal reward.

    Subclasses implement :meth:`reward_many`; everything else (validation,
    enumeration, budget) lives here. Instances are immutable after construction
    and safe to share across threads.
    """

    kind = "custom"

    def __init__(self, prompts: Sequence, vocab_size: int, horizon: int):
        if vocab_size < 1 or horizon < 1:
            raise ValueError("vocab_size and horizon must be positive")
        if not prompts:
            raise ValueError("need at least one prompt")
        if len(set(prompts)) != len(prompts):
            raise ValueError("prompt identifiers must be unique")
        if vocab_size**horizon > ENUM_BUDGET:
            raise CapacityError(
                f"sequence space {vocab_size}**{horizon} exceeds the "
                f"enumerability budget of {ENUM_BUDGET} per prompt"
            )
        self.prompts = tuple(prompts)
        self.vocab_size = int(vocab_size)
        self.horizon = int(horizon)

    @property
    def n_sequences(self) -> int:
        return self.vocab_size**self.horizon

    @property
    def binary_rewards(self) -> bool:
        """True when all rewards are in {0, -1}."""
        return True

    def _check_prompt(self, prompt) -> None:
        if prompt not in self.prompts:
            raise ValueError(f"unknown prompt {prompt!r}")

    def _check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.ndim != 1 or arr.shape[0] != self.horizon:
            raise ValueError(
                f"expected a sequence of length {self.horizon}, got shape {arr.shape}"
            )
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise ValueError(f"token out of vocabulary range [0, {self.vocab_size})")
        return arr

    def reward(self, prompt, tokens: Sequence[int]) -> float:
        """Terminal reward in [-1, 0] for a complete sequence."""
        self._check_prompt(prompt)
        arr = self._check_tokens(tokens)
        return float(self.reward_many(prompt, arr[None, :])[0])

    def reward_many(self, prompt, seqs: np.ndarray) -> np.ndarray:
        """Rewards for an (N, horizon) batch of complete sequences."""
        raise NotImplementedError

    def enumerate(self, prompt) -> Iterator[tuple[tuple[int, ...], float]]:
        """Yield every (sequence, reward) pair once, in lexicographic order."""
        self._check_prompt(prompt)
        seqs = all_sequences(self.vocab_size, self.horizon)
        rewards = self.reward_many(prompt, seqs)
        for row, r in zip(seqs, rewards):
            yield tuple(int(t) for t in row), float(r)

    def reward_table(self, prompt) -> np.ndarray:
        """Rewards of all sequences, indexed by lexicographic rank."""
        self._check_prompt(prompt)
        return self.reward_many(prompt, all_sequences(self.vocab_size, self.horizon))


class TargetSetEnv(SequenceEnv):
    """Reward 0 on an explicit accepting set of sequences, -1 elsewhere."""

    kind = "target-set"

    def __init__(self, prompts, vocab_size, horizon, accepting):
        super().__init__(prompts, vocab_size, horizon)
        if not isinstance(accepting, dict):
            if len(self.prompts) != 1:
                raise ValueError("multi-prompt env needs a per-prompt accepting dict")
            accepting = {self.prompts[0]: accepting}
        self._accepting_ranks: dict = {}
        self._accepting: dict = {}
        for prompt in self.prompts:
            seqs = accepting.get(prompt)
            if not seqs:
                raise ValueError(f"accepting set for prompt {prompt!r} is empty")
            canon = {tuple(int(t) for t in self._check_tokens(s)) for s in seqs}
            self._accepting[prompt] = frozenset(canon)
            self._accepting_ranks[prompt] = np.sort(
                np.array([sequence_rank(s, self.vocab_size) for s in canon], dtype=np.int64)
            )

    def accepting(self, prompt) -> frozenset:
        self._check_prompt(prompt)
        return self._accepting[prompt]

    def reward_many(self, prompt, seqs: np.ndarray) -> np.ndarray:
        ranks = sequence_ranks(seqs, self.vocab_size)
        hit = np.isin(ranks, self._accepting_ranks[prompt])
        return np.where(hit, 0.0, -1.0)


class SuffixMatchEnv(SequenceEnv):
    """Reward 0 iff the sequence ends with the given pattern, -1 otherwise."""

    kind = "suffix-match"

    def __init__(self, prompts, vocab_size, horizon, pattern: Iterable[int]):
        super().__init__(prompts, vocab_size, horizon)
        pat = tuple(int(t) for t in pattern)
        if not 0 < len(pat) <= horizon:
            raise ValueError("pattern length must be in [1, horizon]")
        if any(t < 0 or t >= vocab_size for t in pat):
            raise ValueError("pattern token out of vocabulary range")
        self.pattern = pat

    def reward_many(self, prompt, seqs: np.ndarray) -> np.ndarray:
        self._check_prompt(prompt)
        tail = seqs[:, self.horizon - len(self.pattern):]
        hit = (tail == np.asarray(self.pattern, dtype=np.int64)).all(axis=1)
        return np.where(hit, 0.0, -1.0)


class SeededRandomEnv(SequenceEnv):
    """Reward table drawn reproducibly from (seed, vocab_size, horizon).

    Binary by default: each sequence succeeds (reward 0) independently with
    ``success_prob``. With ``continuous=True`` rewards are drawn uniformly from
    [-1, 0] instead, for exercising soft regression targets.
    """

    kind = "seeded-random"

    def __init__(self, prompts, vocab_size, horizon, seed: int,
                 success_prob: float = 0.25, continuous: bool = False):
        super().__init__(prompts, vocab_size, horizon)
        if not 0.0 <= success_prob <= 1.0:
            raise ValueError("success_prob must be in [0, 1]")
        self.seed = int(seed)
        self.success_prob = float(success_prob)
        self.continuous = bool(continuous)
        self._tables = {}
        for i, prompt in enumerate(self.prompts):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=self.seed, spawn_key=(i,))
            )
            if continuous:
                table = rng.uniform(-1.0, 0.0, size=self.n_sequences)
            else:
                table = np.where(rng.random(self.n_sequences) < success_prob, 0.0, -1.0)
            self._tables[prompt] = table

    @property
    def binary_rewards(self) -> bool:
        return not self.continuous

    def reward_many(self, prompt, seqs: np.ndarray) -> np.ndarray:
        self._check_prompt(prompt)
        return self._tables[prompt][sequence_ranks(seqs, self.vocab_size)]


def e1_env() -> TargetSetEnv:
    """Smallest canonical test environment: V=2, T=2, single accepting sequence (1, 1)."""
    return TargetSetEnv(prompts=(0,), vocab_size=2, horizon=2, accepting=[(1, 1)])
