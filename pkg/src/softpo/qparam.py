"""Cumulative Q-parameterization: per-step advantages and anchored value paths.

A policy's advantage at step t is beta times its log-prob edge over the
reference; summing those advantages from a per-prompt anchor produces the
value path. Path consistency (interval sums equal endpoint differences) holds
by construction, and Bellman consistency under the reference next-token
distribution holds for every parameter setting; both are probed here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .oracle import softmax_operator
from .store import Trajectory

Q0_PROVENANCES = ("exact-oracle", "monte-carlo")


def advantages(policy_logprobs, ref_logprobs, beta: float):
    """beta * (policy log-prob - reference log-prob), elementwise.

    Accepts torch tensors (differentiable) or numpy arrays of equal shape.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    shape_p = getattr(policy_logprobs, "shape", None)
    shape_r = getattr(ref_logprobs, "shape", None)
    if shape_p != shape_r:
        raise ValueError(f"length mismatch: {shape_p} vs {shape_r}")
    return beta * (policy_logprobs - ref_logprobs)


def cumulative_q(advantage_path, q0):
    """Prefix-sum of advantages anchored at q0; output has one more entry.

    Built by sequential accumulation so that values[..., t+1] is exactly the
    float sum values[..., t] + advantages[..., t].
    """
    if isinstance(advantage_path, torch.Tensor):
        lead = advantage_path.shape[:-1]
        if isinstance(q0, torch.Tensor):
            acc = q0.to(advantage_path.dtype).expand(lead).clone()
        else:
            acc = torch.full(lead, float(q0), dtype=advantage_path.dtype)
        cols = [acc]
        for t in range(advantage_path.shape[-1]):
            acc = acc + advantage_path[..., t]
            cols.append(acc)
        return torch.stack(cols, dim=-1)
    advantage_path = np.asarray(advantage_path, dtype=np.float64)
    lead = advantage_path.shape[:-1]
    acc = np.broadcast_to(np.asarray(q0, dtype=np.float64), lead).copy()
    cols = [acc]
    for t in range(advantage_path.shape[-1]):
        acc = acc + advantage_path[..., t]
        cols.append(acc)
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class QView:
    """Advantages and anchored values for one trajectory or a batch.

    ``advantages`` has shape (..., T); ``values`` has shape (..., T + 1) with
    index 0 holding the anchor. Values are redundant given the advantages; the
    construction invariant ties them together and is checkable after the fact.
    """

    advantages: torch.Tensor | np.ndarray
    values: torch.Tensor | np.ndarray
    beta: float
    trajectories: tuple[Trajectory, ...] | None = None

    def __post_init__(self):
        if self.values.shape[-1] != self.advantages.shape[-1] + 1:
            raise ValueError("values must have exactly one more entry than advantages")

    @property
    def horizon(self) -> int:
        return self.advantages.shape[-1]

    @property
    def terminal_values(self):
        return self.values[..., -1]

    @property
    def anchors(self):
        return self.values[..., 0]

    def detached(self) -> "QView":
        adv = self.advantages
        vals = self.values
        if isinstance(adv, torch.Tensor):
            adv, vals = adv.detach().numpy(), vals.detach().numpy()
        return QView(adv, vals, self.beta, self.trajectories)

    def max_path_residual(self) -> float:
        """max over all intervals of |sum of advantages - value difference|."""
        view = self.detached()
        adv = np.atleast_2d(view.advantages)
        vals = np.atleast_2d(view.values)
        worst = 0.0
        T = adv.shape[-1]
        for t1 in range(1, T + 1):
            run = np.zeros(adv.shape[0])
            for tk in range(t1, T + 1):
                run = run + adv[:, tk - 1]
                gap = vals[:, tk] - vals[:, t1 - 1]
                worst = max(worst, float(np.abs(run - gap).max()))
        return worst


def make_qview(policy, ref_policy, prompt, seqs: np.ndarray, q0,
               beta: float, trajectories=None) -> QView:
    """Differentiable QView for a (B, T) batch of sequences of one prompt."""
    seqs = np.asarray(seqs, dtype=np.int64)
    lp = policy.step_logprobs(prompt, seqs)
    with torch.no_grad():
        ref_lp = ref_policy.step_logprobs(prompt, seqs)
    adv = advantages(lp, ref_lp, beta)
    if isinstance(q0, (list, tuple, np.ndarray)):
        q0 = torch.as_tensor(np.asarray(q0, dtype=np.float64))
    vals = cumulative_q(adv, q0)
    return QView(adv, vals, beta, trajectories)


def qview_from_logprobs(policy_logprobs, ref_logprobs, q0, beta: float,
                        trajectories=None) -> QView:
    adv = advantages(policy_logprobs, ref_logprobs, beta)
    return QView(adv, cumulative_q(adv, q0), beta, trajectories)


def qvalues_to_inputs(values, ref_logprobs, beta: float):
    """Invert the parameterization: recover (q0, policy log-probs) from values."""
    if isinstance(values, torch.Tensor):
        adv = values[..., 1:] - values[..., :-1]
        return values[..., 0], ref_logprobs + adv / beta
    values = np.asarray(values, dtype=np.float64)
    adv = np.diff(values, axis=-1)
    return values[..., 0], np.asarray(ref_logprobs) + adv / beta


def bellman_residual(policy, ref_policy, prompt, prefix: Sequence[int],
                     beta: float) -> float:
    """Q_t minus the softmax-operator backup of Q_{t+1} over all next tokens.

    Zero up to float error for every parameter setting; kept as a verification
    probe. The anchor cancels, so it is taken as 0.
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    t = prefix.shape[0]
    if t >= policy.horizon:
        raise ValueError("prefix must be shorter than the horizon")
    if t:
        steps = prefix[None, :]
        with torch.no_grad():
            pol = policy.step_logprobs(prompt, steps).numpy()[0]
            ref = ref_policy.step_logprobs(prompt, steps).numpy()[0]
        q_t = float(np.sum(beta * (pol - ref)))
    else:
        q_t = 0.0
    pol_row = policy.next_logprobs(prompt, prefix[None, :])[0]
    ref_row = ref_policy.next_logprobs(prompt, prefix[None, :])[0]
    next_adv = beta * (pol_row - ref_row)
    backup = softmax_operator(np.exp(ref_row), q_t + next_adv, beta)
    return q_t - backup


# --- Per-prompt anchors -----------------------------------------------------------


@dataclass(frozen=True)
class QZeroEntry:
    q0: float
    provenance: str
    sample_count: int | None = None

    def __post_init__(self):
        if self.provenance not in Q0_PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not -1.0 <= self.q0 <= 0.0:
            raise ValueError(f"anchor {self.q0} outside [-1, 0]")


class QZeroStore:
    """Per-prompt value anchors, frozen before training starts."""

    def __init__(self):
        self._entries: dict = {}

    def add(self, prompt, q0: float, provenance: str,
            sample_count: int | None = None) -> None:
        self._entries[prompt] = QZeroEntry(float(q0), provenance, sample_count)

    def __contains__(self, prompt) -> bool:
        return prompt in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, prompt) -> QZeroEntry:
        return self._entries[prompt]

    def q0(self, prompt) -> float:
        try:
            return self._entries[prompt].q0
        except KeyError:
            raise KeyError(
                f"no value anchor for prompt {prompt!r}; precompute it first "
                f"(q0 subcommand) or configure the exact-oracle mode"
            ) from None

    def require(self, prompts) -> None:
        missing = [p for p in prompts if p not in self._entries]
        if missing:
            raise ValueError(
                f"value anchors missing for prompts {missing}; run the q0 "
                f"subcommand before training"
            )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for prompt, e in self._entries.items():
                record = {"prompt": prompt, "q0": e.q0, "provenance": e.provenance}
                if e.sample_count is not None:
                    record["sample_count"] = e.sample_count
                fh.write(json.dumps(record))
                fh.write("\n")

    @classmethod
    def load(cls, path) -> "QZeroStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                store.add(record["prompt"], record["q0"], record["provenance"],
                          record.get("sample_count"))
        return store
