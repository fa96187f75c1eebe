"""Success-rate evaluation: the unbiased pass@k estimator and exact references.

Enumerable environments admit an exact per-draw success probability of the
decoding distribution itself, so sampled pass@k estimates can always be checked
against 1 - (1 - q)^k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import SequenceEnv, all_sequences
from .oracle import accumulate_rows
from .policies import DecodingConfig, nucleus_probs, sample_rollouts


def pass_at_k(n: int, c: int, k: int) -> float:
    """Probability that at least one of k draws from n evaluated samples is correct.

    Unbiased combinatorial form 1 - C(n-c, k) / C(n, k), evaluated with exact
    integer binomials and a single correctly-rounded division.
    """
    if not (isinstance(n, int) and isinstance(c, int) and isinstance(k, int)):
        raise ValueError("n, c, k must be integers")
    if not 0 <= c <= n:
        raise ValueError(f"c must lie in [0, n]; got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, n]; got k={k}, n={n}")
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


@dataclass(frozen=True)
class EvalSpec:
    n_samples: int = 20
    k: int = 10
    decoding: DecodingConfig = field(
        default_factory=lambda: DecodingConfig(temperature=0.4, top_p=0.95)
    )

    def __post_init__(self):
        if not 1 <= self.k <= self.n_samples:
            raise ValueError("need 1 <= k <= n_samples")


def decoded_success_prob(policy, env: SequenceEnv, prompt,
                         decoding: DecodingConfig) -> float:
    """Exact success mass of the decoding distribution, by enumeration.

    Applies temperature scaling and nucleus truncation to every prefix row, so
    the result is the true per-draw success probability of the sampler.
    """
    if not decoding.fixed_temperature:
        raise ValueError("exact evaluation needs a fixed temperature")
    if not env.binary_rewards:
        raise ValueError("success probability needs binary rewards")
    log_rows = []
    for t in range(env.horizon):
        rows = policy.next_logprobs(prompt, all_sequences(env.vocab_size, t))
        temps = np.full(rows.shape[0], float(decoding.temperature))
        probs = nucleus_probs(rows, temps, decoding.top_p)
        with np.errstate(divide="ignore"):
            log_rows.append(np.log(probs))
    leaf_lp = accumulate_rows(log_rows)
    rewards = env.reward_table(prompt)
    mass = np.exp(leaf_lp[rewards == 0.0])
    return float(mass[np.isfinite(mass)].sum()) if mass.size else 0.0


def evaluate(policy, env: SequenceEnv, spec: EvalSpec,
             rng: np.random.Generator) -> dict:
    """Sampled pass@k per prompt, with the exact reference when computable."""
    per_prompt = {}
    for prompt in env.prompts:
        rollouts = sample_rollouts(policy, env, prompt, spec.n_samples,
                                   spec.decoding, rng, source="online")
        c = sum(1 for t in rollouts if t.success)
        entry = {
            "n": spec.n_samples,
            "correct": c,
            "pass_at_k": pass_at_k(spec.n_samples, c, spec.k),
        }
        if spec.decoding.fixed_temperature and env.binary_rewards:
            q = decoded_success_prob(policy, env, prompt, spec.decoding)
            entry["exact_success_prob"] = q
            entry["exact_pass_at_k"] = 1.0 - (1.0 - q) ** spec.k
        per_prompt[prompt] = entry
    aggregate = float(np.mean([e["pass_at_k"] for e in per_prompt.values()]))
    return {"k": spec.k, "per_prompt": per_prompt, "aggregate_pass_at_k": aggregate}
