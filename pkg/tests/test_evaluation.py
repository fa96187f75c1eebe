"""pass@k estimator and sampled/exact evaluation reports."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softpo import (
    DecodingConfig,
    EvalSpec,
    TabularPolicy,
    evaluate,
    optimal_policy,
    pass_at_k,
    soft_values,
)
from softpo.evaluation import decoded_success_prob
from tests.conftest import E1_PI1_AFTER_1, E1_PI1_EMPTY


def subset_counting_pass_at_k(n, c, k):
    """Exhaustive oracle: fraction of k-subsets containing a correct sample."""
    outcomes = [1] * c + [0] * (n - c)
    good = total = 0
    for subset in itertools.combinations(range(n), k):
        total += 1
        good += any(outcomes[i] for i in subset)
    return 1.0 - (total - good) / total


class TestPassAtK:
    def test_no_correct_samples(self):
        assert pass_at_k(20, 0, 10) == 0.0

    def test_all_correct_samples(self):
        assert pass_at_k(20, 20, 10) == 1.0

    def test_hand_value(self):
        assert pass_at_k(4, 1, 2) == 0.5

    def test_k_equal_n_one(self):
        assert pass_at_k(1, 1, 1) == 1.0
        assert pass_at_k(1, 0, 1) == 0.0

    def test_matches_subset_counting_small(self):
        for n in range(1, 8):
            for c in range(n + 1):
                for k in range(1, n + 1):
                    assert pass_at_k(n, c, k) == subset_counting_pass_at_k(n, c, k)

    def test_precondition_errors(self):
        with pytest.raises(ValueError):
            pass_at_k(10, 11, 5)
        with pytest.raises(ValueError):
            pass_at_k(10, -1, 5)
        with pytest.raises(ValueError):
            pass_at_k(10, 5, 0)
        with pytest.raises(ValueError):
            pass_at_k(10, 5, 11)

    def test_large_arguments_stay_stable(self):
        out = pass_at_k(10_000, 13, 100)
        assert 0.0 <= out <= 1.0
        approx = 1.0 - math.exp(13 * math.log1p(-100 / 10_000))
        assert out == pytest.approx(approx, rel=1e-2)

    @given(n=st.integers(1, 30), c=st.integers(0, 30), k=st.integers(1, 30))
    @settings(max_examples=300, deadline=None)
    def test_monotone_in_c_and_k(self, n, c, k):
        c = min(c, n)
        k = min(k, n)
        base = pass_at_k(n, c, k)
        if c + 1 <= n:
            assert pass_at_k(n, c + 1, k) >= base
        if k + 1 <= n:
            assert pass_at_k(n, c, k + 1) >= base


class TestEvaluate:
    def _opt_policy(self, env, ref, beta=1.0):
        table = soft_values(env, 0, ref, beta)
        opt = optimal_policy(table, ref)
        pol = TabularPolicy(env.prompts, env.vocab_size, env.horizon)
        pol.set_rows(0, opt.rows)
        return pol

    def test_optimal_policy_passes_at_10(self, env_e1, ref_e1):
        pol = self._opt_policy(env_e1, ref_e1)
        spec = EvalSpec(n_samples=20, k=10,
                        decoding=DecodingConfig(temperature=0.4, top_p=0.95))
        report = evaluate(pol, env_e1, spec, np.random.default_rng(0))
        entry = report["per_prompt"][0]
        assert entry["pass_at_k"] == pytest.approx(1.0, abs=1e-6)
        assert entry["exact_pass_at_k"] == pytest.approx(1.0, abs=1e-6)

    def test_always_failing_policy_scores_zero(self, env_e1):
        import torch

        pol = TabularPolicy(env_e1.prompts, 2, 2)
        with torch.no_grad():
            pol.table[0, :, 1] = -40.0  # all mass on token 0 everywhere
        spec = EvalSpec(n_samples=20, k=10, decoding=DecodingConfig())
        report = evaluate(pol, env_e1, spec, np.random.default_rng(0))
        assert report["per_prompt"][0]["pass_at_k"] == 0.0

    def test_exact_success_prob_matches_oracle_product(self, env_e1, ref_e1):
        pol = self._opt_policy(env_e1, ref_e1)
        q = decoded_success_prob(pol, env_e1, 0, DecodingConfig())
        assert q == pytest.approx(E1_PI1_EMPTY * E1_PI1_AFTER_1, abs=1e-12)

    def test_reference_policy_success_prob_is_uniform_mass(self, env_e1, ref_e1):
        q = decoded_success_prob(ref_e1, env_e1, 0, DecodingConfig())
        assert q == pytest.approx(0.25, abs=1e-12)

    def test_exact_path_requires_fixed_temperature(self, env_e1, ref_e1):
        with pytest.raises(ValueError):
            decoded_success_prob(ref_e1, env_e1, 0,
                                 DecodingConfig(temperature=(0.1, 0.8)))

    def test_sampled_estimate_tracks_exact_value(self, env_e1, ref_e1):
        spec = EvalSpec(n_samples=400, k=4, decoding=DecodingConfig())
        report = evaluate(ref_e1, env_e1, spec, np.random.default_rng(5))
        entry = report["per_prompt"][0]
        # estimator concentrates around the exact value at n=400
        assert entry["pass_at_k"] == pytest.approx(entry["exact_pass_at_k"], abs=0.08)
