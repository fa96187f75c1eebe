"""Regression losses on the cumulative Q-parameterization, plus a PPO baseline.

Predictions with a log-probability reading (anchored values divided by beta)
can be regressed with a clipped binary cross-entropy; raw values use squared
error. Terminal regression pulls the end-of-sequence value to the observed
reward; non-terminal regression additionally targets interior values with
detached reverse targets; advantage regression matches the summed advantages
to reward minus anchor through a sigmoid warp; Monte-Carlo regression targets
interior values with sampled success-probability estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .policies import PrefixIndex
from .qparam import QView, make_qview
from .store import Trajectory

LOSS_VARIANTS = ("terminal-q", "nonterminal-q", "advantage-sigmoid", "mc-target", "ppo")
BASE_LOSSES = ("squared", "cross-entropy")


@dataclass(frozen=True)
class LossSpec:
    """Which regression, which base loss, and its clipping / warping knobs.

    ``clip_threshold`` bounds log-probability-scale predictions strictly below
    zero; ``warp_scale`` divides the sigmoid argument in advantage regression
    (defaults to beta at the call site when None).
    """

    variant: str
    base_loss: str = "squared"
    clip_threshold: float = -1e-4
    warp_scale: float | None = None
    applies_to: str | None = None

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.base_loss not in BASE_LOSSES:
            raise ValueError(f"unknown base loss {self.base_loss!r}")
        if self.clip_threshold >= 0:
            raise ValueError("clip_threshold must be a negative scalar near 0")
        if self.warp_scale is not None and self.warp_scale <= 0:
            raise ValueError("warp_scale must be positive")
        if self.variant == "advantage-sigmoid" and self.base_loss != "cross-entropy":
            raise ValueError("advantage regression is only used with sigmoid "
                             "warping and a cross-entropy loss")
        if self.variant == "mc-target" and self.base_loss != "cross-entropy":
            raise ValueError("Monte-Carlo targets are regressed with the "
                             "cross-entropy loss")


@dataclass(frozen=True)
class PpoConfig:
    gae_gamma: float = 1.0
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    value_loss_weight: float = 0.5
    importance_weight_clamp: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.gae_gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_gamma and gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.importance_weight_clamp < 1.0:
            raise ValueError("importance_weight_clamp must be >= 1")


def straight_through_max_clip(x: torch.Tensor, threshold: float) -> torch.Tensor:
    """Forward: min(x, threshold). Backward: identity (clipping ignored)."""
    return x + (x.clamp(max=threshold) - x).detach()


def bce(pred_logprob: torch.Tensor, target_logprob: torch.Tensor,
        clip_threshold: float = -1e-4) -> torch.Tensor:
    """Binary cross-entropy between log-probability predictions and targets.

    Targets enter exponentiated (x = exp(target)); predictions stay in log
    space. The positive term is x * relu(-pred), flat in predictions above
    zero, so there is never an incentive to push a prediction past a valid
    log-probability. Inside the log term the prediction is clipped just below
    zero with a straight-through gradient, keeping the loss finite everywhere
    while still pulling overshooting predictions back down.
    """
    target = torch.as_tensor(target_logprob, dtype=torch.float64)
    x = torch.exp(target.clamp(max=0.0))
    yc = straight_through_max_clip(pred_logprob, clip_threshold)
    return x * torch.relu(-pred_logprob) - (1.0 - x) * torch.log(-torch.expm1(yc))


def _base_loss(pred: torch.Tensor, target: torch.Tensor, spec: LossSpec,
               beta: float) -> torch.Tensor:
    """Elementwise base loss; cross-entropy reads pred/target on the /beta scale."""
    if spec.base_loss == "squared":
        return (pred - target) ** 2
    return bce(pred / beta, target / beta, spec.clip_threshold)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def terminal_q_loss(view: QView, reward, spec: LossSpec) -> torch.Tensor:
    """Regress the terminal value towards the observed reward."""
    r = _as_tensor(reward)
    return _base_loss(view.terminal_values, r, spec, view.beta).mean()


def reverse_q_targets(view: QView, reward) -> torch.Tensor:
    """Targets R_t = reward - (sum of advantages after t), detached.

    R_T equals the reward; earlier targets adjust it for the quality of later
    steps. Gradients never flow through the targets.
    """
    r = _as_tensor(reward)
    vals = view.values if isinstance(view.values, torch.Tensor) else _as_tensor(view.values)
    targets = r[..., None] - (vals[..., -1:] - vals[..., 1:])
    return targets.detach()


def nonterminal_q_loss(view: QView, reward, spec: LossSpec,
                       targets: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over steps of the base loss between Q_t and its reverse target.

    Targets are detached, so gradients flow only into the predictions;
    passing precomputed ``targets`` regresses onto those constants instead
    (useful for caching and for probing the prediction-side gradient).
    """
    preds = view.values[..., 1:]
    if targets is None:
        targets = reverse_q_targets(view, reward)
    return _base_loss(preds, targets, spec, view.beta).mean()


def advantage_sigmoid_loss(view: QView, reward, q0, spec: LossSpec) -> torch.Tensor:
    """Cross-entropy between sigmoid-warped advantage sum and warped target."""
    scale = spec.warp_scale if spec.warp_scale is not None else view.beta
    z_hat = view.advantages.sum(dim=-1) / scale
    z = (_as_tensor(reward) - _as_tensor(q0)) / scale
    p = torch.sigmoid(z)
    loss = -p * torch.nn.functional.logsigmoid(z_hat) \
        - (1.0 - p) * torch.nn.functional.logsigmoid(-z_hat)
    return loss.mean()


def advantage_squared_loss(view: QView, reward, q0) -> torch.Tensor:
    """Unwarped squared advantage regression.

    Only used as a diagnostic: its gradient coincides exactly with terminal
    squared regression, since the anchor is a constant.
    """
    gap = view.advantages.sum(dim=-1) - (_as_tensor(reward) - _as_tensor(q0))
    return (gap**2).mean()


def mc_success_to_logprob(s_hat, beta: float):
    """Convert a success-probability estimate into a log-probability target.

    For binary rewards the exponentiated value is s + (1 - s) * exp(-1 / beta);
    the target is its logarithm (never positive). Endpoints are exact: s = 0
    maps to -1/beta and s = 1 to 0.
    """
    s = np.asarray(s_hat, dtype=np.float64)
    if (s < 0).any() or (s > 1).any():
        raise ValueError("success estimates must lie in [0, 1]")
    out = np.full(s.shape, -1.0 / beta)
    out[s == 1.0] = 0.0
    mid = (s > 0.0) & (s < 1.0)
    out[mid] = np.logaddexp(np.log(s[mid]), np.log1p(-s[mid]) - 1.0 / beta)
    return out


def mc_target_loss(view: QView, annotations, beta: float,
                   spec: LossSpec) -> torch.Tensor:
    """Mean clipped cross-entropy between annotated values and sampled targets.

    ``annotations`` is a list of (step, estimate) pairs for a single-trajectory
    view, or a sequence of such lists matching the batch dimension. Steps are
    1-indexed by tokens consumed.
    """
    vals = view.values
    batched = vals.dim() == 2 if isinstance(vals, torch.Tensor) else vals.ndim == 2
    if not batched:
        annotations = [annotations]
        vals = vals[None, :]
    rows, steps, s_hats = [], [], []
    for b, anns in enumerate(annotations):
        for t, s in anns or ():
            if not 1 <= t <= view.horizon:
                raise ValueError(f"annotation step {t} outside [1, {view.horizon}]")
            rows.append(b)
            steps.append(t)
            s_hats.append(s)
    if not rows:
        return torch.zeros((), dtype=torch.float64)
    preds = vals[torch.as_tensor(rows), torch.as_tensor(steps)]
    targets = torch.from_numpy(mc_success_to_logprob(s_hats, beta))
    return bce(preds / beta, targets, spec.clip_threshold).mean()


# --- PPO baseline ------------------------------------------------------------------


class TabularValueModel(torch.nn.Module):
    """One scalar per (prompt, prefix); parameters separate from any policy."""

    tag = "tabular"

    def __init__(self, prompts, vocab_size: int, horizon: int):
        super().__init__()
        self.prompts = tuple(prompts)
        self._prompt_index = {p: i for i, p in enumerate(self.prompts)}
        self.index = PrefixIndex(vocab_size, horizon)
        self.table = torch.nn.Parameter(
            torch.zeros(len(self.prompts), self.index.n_rows, dtype=torch.float64)
        )

    def values_for_steps(self, prompt, seqs: np.ndarray) -> torch.Tensor:
        """(B, T) sequences -> (B, T) value of the prefix before each step."""
        rows = self.index.rows_for_steps(np.asarray(seqs, dtype=np.int64))
        return self.table[self._prompt_index[prompt]][torch.from_numpy(rows)]


class TinyNetValueModel(torch.nn.Module):
    """Small tanh MLP from the shared prefix encoding to a scalar value."""

    tag = "tiny-net"

    def __init__(self, prompts, vocab_size: int, horizon: int,
                 hidden: Sequence[int] = (32, 32), seed: int = 1):
        super().__init__()
        from .policies import TinyNetPolicy

        self._net = TinyNetPolicy(prompts, vocab_size, horizon, hidden=hidden, seed=seed)
        self._head = torch.nn.Linear(vocab_size, 1, dtype=torch.float64)
        with torch.no_grad():
            self._head.weight.zero_()
            self._head.bias.zero_()

    def values_for_steps(self, prompt, seqs: np.ndarray) -> torch.Tensor:
        seqs = np.asarray(seqs, dtype=np.int64)
        B, T = seqs.shape
        cols = []
        for t in range(T):
            h = self._net.next_logits(prompt, seqs[:, :t])
            cols.append(self._head(h)[:, 0])
        return torch.stack(cols, dim=1)


def gae(rewards, values, gamma: float, lam: float):
    """Generalized advantage estimation with a zero bootstrap after the horizon.

    ``rewards`` and ``values`` have shape (..., T); terminal-only reward sits at
    the final step. Returns advantages of the same shape.
    """
    r = _as_tensor(rewards)
    v = _as_tensor(values)
    if r.shape != v.shape:
        raise ValueError(f"rewards shape {tuple(r.shape)} != values shape {tuple(v.shape)}")
    T = r.shape[-1]
    adv = torch.zeros_like(r)
    running = torch.zeros_like(r[..., 0])
    for t in range(T - 1, -1, -1):
        next_value = v[..., t + 1] if t + 1 < T else torch.zeros_like(running)
        delta = r[..., t] + gamma * next_value - v[..., t]
        running = delta + gamma * lam * running
        adv[..., t] = running
    return adv


def ppo_loss(policy_logprobs_new: torch.Tensor, behavior_logprobs,
             step_rewards, step_values: torch.Tensor,
             config: PpoConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Clipped surrogate with a staleness importance weight, plus value loss.

    The ratio compares the trainer's current policy to the recorded behavior
    distribution; the same (detached, clamped) ratio multiplies the surrogate
    to correct for stale rollouts. The value loss regresses each prefix value
    towards the empirical return from that step.
    """
    behavior = _as_tensor(behavior_logprobs)
    rewards = _as_tensor(step_rewards)
    ratio = torch.exp(policy_logprobs_new - behavior)
    adv = gae(rewards, step_values.detach(), config.gae_gamma, config.gae_lambda)
    clipped = ratio.clamp(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
    surrogate = torch.minimum(ratio * adv, clipped * adv)
    c = config.importance_weight_clamp
    # The weight is the clamped ratio itself; gradients flow through its
    # unclamped region, keeping the loss an ordinary differentiable function.
    weight = ratio.clamp(1.0 / c, c)
    policy_loss = -(weight * surrogate).mean()
    returns = torch.flip(torch.cumsum(torch.flip(rewards, [-1]), dim=-1), [-1])
    value_loss = ((step_values - returns) ** 2).mean()
    return policy_loss, value_loss


def shaped_step_rewards(trajs: Sequence[Trajectory], ref_logprobs: np.ndarray,
                        beta: float) -> np.ndarray:
    """Terminal task reward plus per-step KL penalty against the reference.

    The penalty uses the unmodified rollout-policy log-probs recorded at sample
    time, keeping the shaped reward a constant for differentiation.
    """
    rollout_lp = np.array([t.policy_logprobs_unmodified for t in trajs])
    rewards = -beta * (rollout_lp - ref_logprobs)
    rewards[:, -1] += np.array([t.reward for t in trajs])
    return rewards


def ppo_batch_loss(policy, value_model, ref_policy, prompt,
                   trajs: Sequence[Trajectory], config: PpoConfig,
                   beta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Assemble PPO inputs for one prompt's trajectories and compute the losses."""
    for t in trajs:
        if t.behavior_logprobs is None or t.policy_logprobs_unmodified is None:
            raise ValueError("PPO requires behavior log-probs recorded at sample time")
    seqs = np.array([t.tokens for t in trajs], dtype=np.int64)
    new_lp = policy.step_logprobs(prompt, seqs)
    with torch.no_grad():
        ref_lp = ref_policy.step_logprobs(prompt, seqs).numpy()
    behavior = np.array([t.behavior_logprobs for t in trajs])
    step_rewards = shaped_step_rewards(trajs, ref_lp, beta)
    step_values = value_model.values_for_steps(prompt, seqs)
    return ppo_loss(new_lp, behavior, step_rewards, step_values, config)


# --- Dispatch ----------------------------------------------------------------------


def spo_batch_loss(policy, ref_policy, prompt, trajs: Sequence[Trajectory],
                   q0, beta: float, spec: LossSpec) -> torch.Tensor:
    """Value-regression loss for one prompt's trajectory batch."""
    seqs = np.array([t.tokens for t in trajs], dtype=np.int64)
    rewards = np.array([t.reward for t in trajs])
    view = make_qview(policy, ref_policy, prompt, seqs, q0, beta, tuple(trajs))
    if spec.variant == "terminal-q":
        return terminal_q_loss(view, rewards, spec)
    if spec.variant == "nonterminal-q":
        return nonterminal_q_loss(view, rewards, spec)
    if spec.variant == "advantage-sigmoid":
        return advantage_sigmoid_loss(view, rewards, q0, spec)
    if spec.variant == "mc-target":
        return mc_target_loss(view, [t.annotations for t in trajs], beta, spec)
    raise ValueError(f"not a value-regression variant: {spec.variant!r}")
