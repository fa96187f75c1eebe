"""Autoregressive token policies with sampling, log-prob evaluation and updates.

Two implementations share one contract: a tabular softmax with one logit row
per (prompt, prefix), which can represent any policy exactly, and a tiny
feed-forward network over prefix encodings, which exercises function
approximation. All arithmetic is double precision; all distributions are
strictly positive softmaxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .envs import SequenceEnv, sequence_ranks
from .errors import NumericalError
from .store import Trajectory

PARAM_FILE_FORMAT = "softpo-params-v1"


@dataclass(frozen=True)
class DecodingConfig:
    """Temperature / nucleus sampling settings for rollouts.

    ``temperature`` is either a positive scalar or a (low, high) range sampled
    uniformly once per rollout. ``top_p`` in (0, 1] keeps the smallest prefix of
    tokens (by descending probability) whose total mass reaches it.
    """

    temperature: float | tuple[float, float] = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if isinstance(self.temperature, (tuple, list)):
            lo, hi = self.temperature
            if not 0 < lo <= hi:
                raise ValueError("temperature range must satisfy 0 < low <= high")
            object.__setattr__(self, "temperature", (float(lo), float(hi)))
        elif self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")

    @property
    def fixed_temperature(self) -> bool:
        return not isinstance(self.temperature, tuple)

    def draw_temperatures(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if isinstance(self.temperature, tuple):
            lo, hi = self.temperature
            return rng.uniform(lo, hi, size=n)
        return np.full(n, float(self.temperature))


class PrefixIndex:
    """Lexicographic indexing of all prefixes of length < horizon.

    Row of a length-t prefix is ``offsets[t] + base-V rank``; rows enumerate
    level 0 first, then level 1, and so on.
    """

    def __init__(self, vocab_size: int, horizon: int):
        self.vocab_size = vocab_size
        self.horizon = horizon
        self.offsets = np.concatenate(
            [[0], np.cumsum(vocab_size ** np.arange(horizon, dtype=np.int64))]
        )
        self.n_rows = int(self.offsets[horizon])

    def rows_for_prefixes(self, prefixes: np.ndarray) -> np.ndarray:
        """(N, t) prefix batch -> (N,) row indices."""
        t = prefixes.shape[1]
        return self.offsets[t] + sequence_ranks(prefixes, self.vocab_size)

    def rows_for_steps(self, seqs: np.ndarray) -> np.ndarray:
        """(B, T) sequences -> (B, T) row of the prefix before each step."""
        B, T = seqs.shape
        rows = np.empty((B, T), dtype=np.int64)
        rank = np.zeros(B, dtype=np.int64)
        for t in range(T):
            rows[:, t] = self.offsets[t] + rank
            rank = rank * self.vocab_size + seqs[:, t]
        return rows


class Policy(torch.nn.Module):
    """Shared contract: versioned parameters, per-prefix next-token logits."""

    tag = "abstract"

    def __init__(self, prompts: Sequence, vocab_size: int, horizon: int):
        super().__init__()
        self.prompts = tuple(prompts)
        self.vocab_size = int(vocab_size)
        self.horizon = int(horizon)
        self._prompt_index = {p: i for i, p in enumerate(self.prompts)}
        self._version = 0

    @property
    def version(self) -> int:
        return self._version

    def bump_version(self) -> None:
        self._version += 1

    def prompt_index(self, prompt) -> int:
        try:
            return self._prompt_index[prompt]
        except KeyError:
            raise ValueError(f"unknown prompt {prompt!r}") from None

    def next_logits(self, prompt, prefixes: np.ndarray) -> torch.Tensor:
        """(N, t) prefixes -> (N, V) logits, differentiable."""
        raise NotImplementedError

    def meta(self) -> dict:
        raise NotImplementedError

    # Derived evaluation surface ------------------------------------------------

    def next_logprobs(self, prompt, prefixes: np.ndarray) -> np.ndarray:
        """(N, t) prefixes -> (N, V) next-token log-probs, detached."""
        with torch.no_grad():
            return torch.log_softmax(self.next_logits(prompt, prefixes), dim=1).numpy()

    def step_logprobs(self, prompt, seqs: np.ndarray) -> torch.Tensor:
        """(B, T) sequences -> (B, T) log-prob of each chosen token, differentiable."""
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.vocab_size):
            raise ValueError("token out of vocabulary range")
        B, T = seqs.shape
        cols = []
        for t in range(T):
            logits = self.next_logits(prompt, seqs[:, :t])
            lp = torch.log_softmax(logits, dim=1)
            cols.append(lp[torch.arange(B), torch.from_numpy(seqs[:, t])])
        return torch.stack(cols, dim=1)

    def logprob(self, prompt, tokens: Sequence[int]) -> np.ndarray:
        """Per-step log-probs of one complete sequence, detached (length T)."""
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.shape != (self.horizon,):
            raise ValueError(f"expected a length-{self.horizon} sequence")
        with torch.no_grad():
            return self.step_logprobs(prompt, arr[None, :])[0].numpy()

    def init_from(self, other: "Policy") -> None:
        """Copy parameters exactly; log-probs of both policies then agree bit-for-bit."""
        if type(other) is not type(self):
            raise ValueError("can only initialize from a policy of the same implementation")
        with torch.no_grad():
            for p, q in zip(self.parameters(), other.parameters()):
                p.copy_(q)
        self.bump_version()

    def snapshot(self) -> "Snapshot":
        vec = torch.nn.utils.parameters_to_vector(self.parameters())
        return Snapshot(self.tag, self.version, self.meta(), vec.detach().numpy().copy())

    def load_snapshot(self, snap: "Snapshot") -> None:
        if snap.tag != self.tag or snap.meta != self.meta():
            raise ValueError("snapshot does not match this policy's architecture")
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(
                torch.from_numpy(snap.params.copy()), self.parameters()
            )
        self.bump_version()


class TabularPolicy(Policy):
    """One logit per (prompt, prefix, token); can represent any policy exactly."""

    tag = "tabular"

    def __init__(self, prompts, vocab_size, horizon, init_scale: float = 0.0,
                 seed: int | None = None):
        super().__init__(prompts, vocab_size, horizon)
        self.index = PrefixIndex(vocab_size, horizon)
        shape = (len(self.prompts), self.index.n_rows, vocab_size)
        if init_scale == 0.0:
            init = np.zeros(shape)
        else:
            rng = np.random.default_rng(seed)
            init = rng.normal(0.0, init_scale, size=shape)
        self.table = torch.nn.Parameter(torch.from_numpy(init.astype(np.float64)))

    def meta(self) -> dict:
        return {"prompts": list(self.prompts), "vocab_size": self.vocab_size,
                "horizon": self.horizon}

    def next_logits(self, prompt, prefixes: np.ndarray) -> torch.Tensor:
        prefixes = np.asarray(prefixes, dtype=np.int64)
        rows = self.index.rows_for_prefixes(prefixes)
        return self.table[self.prompt_index(prompt)][torch.from_numpy(rows)]

    def step_logprobs(self, prompt, seqs: np.ndarray) -> torch.Tensor:
        # Single gather over all (step, prefix) rows; avoids T separate lookups.
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.vocab_size):
            raise ValueError("token out of vocabulary range")
        rows = self.index.rows_for_steps(seqs)
        logits = self.table[self.prompt_index(prompt)][torch.from_numpy(rows.ravel())]
        lp = torch.log_softmax(logits, dim=1)
        chosen = lp[torch.arange(seqs.size), torch.from_numpy(seqs.ravel())]
        return chosen.reshape(seqs.shape)

    def set_rows(self, prompt, rows_per_level: Sequence[np.ndarray]) -> None:
        """Overwrite logits so the next-token rows equal the given probabilities."""
        pidx = self.prompt_index(prompt)
        with torch.no_grad():
            for t, rows in enumerate(rows_per_level):
                lo = self.index.offsets[t]
                hi = self.index.offsets[t + 1]
                self.table[pidx, lo:hi, :] = torch.from_numpy(np.log(rows))
        self.bump_version()


class TinyNetPolicy(Policy):
    """Small tanh MLP from a one-hot prefix encoding to next-token logits.

    The encoding reserves one channel per position for "not filled yet", so all
    prefix lengths share the same input width. A zero output layer makes the
    initial policy exactly uniform.
    """

    tag = "tiny-net"

    def __init__(self, prompts, vocab_size, horizon, hidden: Sequence[int] = (32, 32),
                 seed: int = 0):
        super().__init__(prompts, vocab_size, horizon)
        self.hidden = tuple(int(h) for h in hidden)
        self.in_dim = len(self.prompts) + horizon * (vocab_size + 1)
        gen = torch.Generator().manual_seed(seed)
        dims = [self.in_dim, *self.hidden, vocab_size]
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            lin = torch.nn.Linear(d_in, d_out, dtype=torch.float64)
            with torch.no_grad():
                if i == len(dims) - 2:
                    lin.weight.zero_()
                    lin.bias.zero_()
                else:
                    lin.weight.copy_(
                        torch.randn(d_out, d_in, generator=gen, dtype=torch.float64)
                        / np.sqrt(d_in)
                    )
                    lin.bias.zero_()
            layers.append(lin)
        self.layers = torch.nn.ModuleList(layers)

    def meta(self) -> dict:
        return {"prompts": list(self.prompts), "vocab_size": self.vocab_size,
                "horizon": self.horizon, "hidden": list(self.hidden)}

    def _encode(self, prompt, prefixes: np.ndarray) -> torch.Tensor:
        n, t = prefixes.shape
        x = np.zeros((n, self.in_dim), dtype=np.float64)
        x[:, self.prompt_index(prompt)] = 1.0
        base = len(self.prompts)
        width = self.vocab_size + 1
        for s in range(self.horizon):
            col = base + s * width
            if s < t:
                x[np.arange(n), col + prefixes[:, s]] = 1.0
            else:
                x[:, col + self.vocab_size] = 1.0
        return torch.from_numpy(x)

    def next_logits(self, prompt, prefixes: np.ndarray) -> torch.Tensor:
        h = self._encode(prompt, np.asarray(prefixes, dtype=np.int64))
        for lin in self.layers[:-1]:
            h = torch.tanh(lin(h))
        return self.layers[-1](h)


POLICY_KINDS = {cls.tag: cls for cls in (TabularPolicy, TinyNetPolicy)}


@dataclass(frozen=True)
class Snapshot:
    """Immutable copy of policy parameters at a version.

    Log-prob evaluation through a snapshot is reproducible bit-exactly no
    matter what happens to the live policy afterwards.
    """

    tag: str
    version: int
    meta: dict
    params: np.ndarray

    def policy(self) -> Policy:
        """Rebuild a frozen policy carrying this snapshot's parameters."""
        cls = POLICY_KINDS[self.tag]
        pol = cls(**self.meta)
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(
                torch.from_numpy(self.params.copy()), pol.parameters()
            )
        pol._version = self.version
        for p in pol.parameters():
            p.requires_grad_(False)
        return pol

    def save(self, path) -> None:
        record = {
            "format": PARAM_FILE_FORMAT,
            "tag": self.tag,
            "version": self.version,
            "meta": self.meta,
            "params": [float(v) for v in self.params],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Snapshot":
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
        if record.get("format") != PARAM_FILE_FORMAT:
            raise ValueError(f"unrecognized parameter file format in {path}")
        meta = record["meta"]
        if "prompts" in meta:
            meta["prompts"] = [tuple(p) if isinstance(p, list) else p
                               for p in meta["prompts"]]
        if "hidden" in meta:
            meta["hidden"] = tuple(meta["hidden"])
        return cls(record["tag"], int(record["version"]), meta,
                   np.asarray(record["params"], dtype=np.float64))


def uniform_tabular(env: SequenceEnv) -> TabularPolicy:
    """Uniform reference policy over the environment's token space."""
    return TabularPolicy(env.prompts, env.vocab_size, env.horizon)


def seeded_tabular(env: SequenceEnv, scale: float, seed: int) -> TabularPolicy:
    """Reference policy with reproducible non-uniform rows (logits ~ N(0, scale))."""
    return TabularPolicy(env.prompts, env.vocab_size, env.horizon,
                         init_scale=scale, seed=seed)


# --- Sampling ------------------------------------------------------------------


def nucleus_probs(logprob_rows: np.ndarray, temperatures: np.ndarray,
                  top_p: float) -> np.ndarray:
    """Temperature-scale then nucleus-truncate next-token rows.

    Keeps, per row, the smallest descending-probability prefix with total mass
    >= top_p, and renormalizes. Ties keep the lower token id (stable sort).
    """
    z = logprob_rows - logprob_rows.max(axis=1, keepdims=True)
    z = z / temperatures[:, None]
    probs = np.exp(z - z.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    if top_p < 1.0:
        order = np.argsort(-probs, axis=1, kind="stable")
        sorted_probs = np.take_along_axis(probs, order, axis=1)
        cum = np.cumsum(sorted_probs, axis=1)
        keep = (cum - sorted_probs) < top_p
        sorted_probs = np.where(keep, sorted_probs, 0.0)
        sorted_probs /= sorted_probs.sum(axis=1, keepdims=True)
        probs = np.zeros_like(probs)
        np.put_along_axis(probs, order, sorted_probs, axis=1)
    return probs


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = np.maximum(cum[:, -1], 1.0)
    u = rng.random(probs.shape[0])
    return (cum > u[:, None]).argmax(axis=1)


def sample_rollouts(policy: Policy, env: SequenceEnv, prompt, n: int,
                    decoding: DecodingConfig, rng: np.random.Generator,
                    source: str = "online", prefix: Sequence[int] = (),
                    version: int | None = None) -> list[Trajectory]:
    """Draw ``n`` complete trajectories autoregressively.

    Records, per step, the log-prob under the actual sampling distribution
    (after temperature and nucleus truncation) and under the unmodified policy.
    Steps fixed by ``prefix`` were not sampled; both records fall back to the
    unmodified policy there.
    """
    T, start = env.horizon, len(prefix)
    toks = np.empty((n, T), dtype=np.int64)
    toks[:, :start] = np.asarray(prefix, dtype=np.int64)
    behavior_lp = np.empty((n, T))
    policy_lp = np.empty((n, T))
    temps = decoding.draw_temperatures(n, rng)
    for t in range(start, T):
        rows = policy.next_logprobs(prompt, toks[:, :t])
        probs = nucleus_probs(rows, temps, decoding.top_p)
        chosen = _categorical_rows(probs, rng)
        toks[:, t] = chosen
        behavior_lp[:, t] = np.log(probs[np.arange(n), chosen])
        policy_lp[:, t] = rows[np.arange(n), chosen]
    # Forced prefix steps were not sampled; record unmodified log-probs for both.
    for t in range(start):
        rows = policy.next_logprobs(prompt, toks[:, :t])
        policy_lp[:, t] = rows[np.arange(n), toks[:, t]]
        behavior_lp[:, t] = policy_lp[:, t]
    rewards = env.reward_many(prompt, toks)
    ver = policy.version if version is None else version
    return [
        Trajectory(
            prompt=prompt,
            tokens=tuple(int(v) for v in toks[i]),
            reward=float(rewards[i]),
            source=source,
            behavior_logprobs=tuple(float(v) for v in behavior_lp[i]),
            policy_logprobs_unmodified=tuple(float(v) for v in policy_lp[i]),
            policy_version=ver,
        )
        for i in range(n)
    ]


def sample_trajectory(policy: Policy, env: SequenceEnv, prompt,
                      decoding: DecodingConfig, rng: np.random.Generator,
                      source: str = "online", version: int | None = None) -> Trajectory:
    return sample_rollouts(policy, env, prompt, 1, decoding, rng,
                           source=source, version=version)[0]


# --- Updates ---------------------------------------------------------------------


class PolicyOptimizer:
    """Adaptive-moment updates with linear warm-up, then a constant rate.

    Rejects any step whose loss or gradient is non-finite, leaving parameters
    untouched. Every accepted step bumps the version of each trained module.
    """

    def __init__(self, modules: Policy | Sequence[torch.nn.Module],
                 learning_rate: float, warmup_steps: int = 0,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        if isinstance(modules, torch.nn.Module):
            modules = [modules]
        self.modules = list(modules)
        params = [p for m in self.modules for p in m.parameters()]
        self.learning_rate = float(learning_rate)
        self.warmup_steps = int(warmup_steps)
        self.steps_taken = 0
        self.opt = torch.optim.AdamW(params, lr=self.learning_rate, betas=betas,
                                     eps=eps, weight_decay=weight_decay)

    def step(self, loss: torch.Tensor) -> float:
        loss_value = float(loss.detach())
        if not np.isfinite(loss_value):
            raise NumericalError(f"non-finite loss {loss_value!r}; step rejected")
        self.opt.zero_grad()
        loss.backward()
        for group in self.opt.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    self.opt.zero_grad()
                    raise NumericalError("non-finite gradient; step rejected")
        if self.warmup_steps > 0:
            scale = min(1.0, (self.steps_taken + 1) / self.warmup_steps)
        else:
            scale = 1.0
        for group in self.opt.param_groups:
            group["lr"] = self.learning_rate * scale
        self.opt.step()
        self.steps_taken += 1
        for m in self.modules:
            if hasattr(m, "bump_version"):
                m.bump_version()
        return loss_value
