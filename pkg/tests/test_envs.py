"""Environment construction, rewards, enumeration, and the capacity budget."""

import numpy as np
import pytest

from softpo import CapacityError, SeededRandomEnv, SuffixMatchEnv, TargetSetEnv
from softpo.envs import all_sequences, sequence_rank, sequence_ranks


class TestReward:
    def test_accepting_sequence(self, env_e1):
        assert env_e1.reward(0, (1, 1)) == 0.0

    def test_non_accepting_sequence(self, env_e1):
        assert env_e1.reward(0, (0, 1)) == -1.0

    def test_seeded_env_is_deterministic(self):
        env = SeededRandomEnv((0,), 3, 4, seed=17)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            toks = tuple(rng.integers(0, 3, size=4))
            assert env.reward(0, toks) == env.reward(0, toks)

    def test_same_seed_same_tables(self):
        a = SeededRandomEnv((0,), 3, 3, seed=5)
        b = SeededRandomEnv((0,), 3, 3, seed=5)
        assert np.array_equal(a.reward_table(0), b.reward_table(0))

    def test_wrong_length_rejected(self, env_e1):
        with pytest.raises(ValueError):
            env_e1.reward(0, (1, 1, 1))

    def test_out_of_vocab_rejected(self, env_e1):
        with pytest.raises(ValueError):
            env_e1.reward(0, (1, 2))

    def test_unknown_prompt_rejected(self, env_e1):
        with pytest.raises(ValueError):
            env_e1.reward(99, (1, 1))


class TestEnumerate:
    def test_e1_exhaustive_listing(self, env_e1):
        items = list(env_e1.enumerate(0))
        assert items == [
            ((0, 0), -1.0), ((0, 1), -1.0), ((1, 0), -1.0), ((1, 1), 0.0),
        ]

    def test_count_is_vocab_power_horizon(self):
        env = SeededRandomEnv((0,), 3, 2, seed=1)
        assert len(list(env.enumerate(0))) == 9

    def test_budget_enforced_at_construction(self):
        with pytest.raises(CapacityError):
            SeededRandomEnv((0,), 10, 7, seed=0)

    def test_budget_boundary_allowed(self):
        env = SuffixMatchEnv((0,), 10, 6, pattern=(1,))
        assert env.n_sequences == 10**6

    @pytest.mark.parametrize("vocab,horizon", [(2, 3), (3, 3), (4, 2)])
    def test_enumeration_count_property(self, vocab, horizon):
        env = SeededRandomEnv((0,), vocab, horizon, seed=3)
        assert sum(1 for _ in env.enumerate(0)) == vocab**horizon


class TestFamilies:
    def test_suffix_match(self):
        env = SuffixMatchEnv((0,), 2, 3, pattern=(1, 0))
        assert env.reward(0, (0, 1, 0)) == 0.0
        assert env.reward(0, (1, 1, 0)) == 0.0
        assert env.reward(0, (1, 0, 1)) == -1.0

    def test_empty_accepting_set_rejected(self):
        with pytest.raises(ValueError):
            TargetSetEnv((0,), 2, 2, accepting=[])

    def test_accepting_out_of_space_rejected(self):
        with pytest.raises(ValueError):
            TargetSetEnv((0,), 2, 2, accepting=[(2, 0)])

    def test_multi_prompt_target_set(self):
        env = TargetSetEnv((0, 1), 2, 2,
                           accepting={0: [(1, 1)], 1: [(0, 0)]})
        assert env.reward(0, (1, 1)) == 0.0
        assert env.reward(1, (1, 1)) == -1.0
        assert env.reward(1, (0, 0)) == 0.0

    def test_continuous_rewards_in_range(self):
        env = SeededRandomEnv((0,), 2, 4, seed=9, continuous=True)
        table = env.reward_table(0)
        assert not env.binary_rewards
        assert table.min() >= -1.0 and table.max() <= 0.0
        assert np.unique(table).size > 2

    def test_rewards_binary_by_default(self):
        env = SeededRandomEnv((0,), 2, 4, seed=9)
        assert env.binary_rewards
        assert set(np.unique(env.reward_table(0))) <= {0.0, -1.0}


class TestRankHelpers:
    def test_all_sequences_lexicographic(self):
        seqs = all_sequences(3, 2)
        assert seqs.shape == (9, 2)
        assert seqs[0].tolist() == [0, 0]
        assert seqs[-1].tolist() == [2, 2]
        ranks = sequence_ranks(seqs, 3)
        assert np.array_equal(ranks, np.arange(9))

    def test_scalar_rank_matches_vectorized(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            toks = rng.integers(0, 4, size=3)
            assert sequence_rank(toks, 4) == sequence_ranks(toks[None, :], 4)[0]
