"""Trajectory records and offline dataset files.

Datasets persist as line-delimited JSON, one trajectory per line, with
self-describing field names. Floats serialize through Python's shortest
round-trip repr, so parse(serialize(x)) is bit-exact for doubles. One writer
per file; reads are unrestricted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

SOURCES = (
    "online",
    "reference",
    "offline-human",
    "offline-expert",
    "offline-prev-run",
    "pts-rollout",
)


@dataclass(frozen=True)
class Trajectory:
    """One complete rollout: tokens, terminal reward, and sampling metadata.

    ``behavior_logprobs`` is the per-step log-prob under the distribution the
    tokens were actually drawn from (after temperature / nucleus modification);
    ``policy_logprobs_unmodified`` is the same policy without those
    modifications. ``annotations`` holds
    sparse (step, success-probability estimate) pairs, 1-indexed by the number
    of tokens consumed.
    """

    prompt: object
    tokens: tuple[int, ...]
    reward: float
    source: str = "online"
    behavior_logprobs: tuple[float, ...] | None = None
    policy_logprobs_unmodified: tuple[float, ...] | None = None
    policy_version: int | None = None
    annotations: tuple[tuple[int, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.source not in SOURCES:
            raise ValueError(f"unknown source tag {self.source!r}")
        if not -1.0 <= self.reward <= 0.0:
            raise ValueError(f"reward {self.reward} outside [-1, 0]")
        for name in ("behavior_logprobs", "policy_logprobs_unmodified"):
            vec = getattr(self, name)
            if vec is not None:
                vec = tuple(float(v) for v in vec)
                if len(vec) != len(self.tokens):
                    raise ValueError(f"{name} length does not match tokens")
                object.__setattr__(self, name, vec)
        if self.annotations is not None:
            ann = tuple((int(t), float(s)) for t, s in self.annotations)
            for t, s in ann:
                if not 1 <= t <= len(self.tokens):
                    raise ValueError(f"annotation step {t} outside [1, {len(self.tokens)}]")
                if not 0.0 <= s <= 1.0:
                    raise ValueError(f"annotation estimate {s} outside [0, 1]")
            object.__setattr__(self, "annotations", ann)

    @property
    def success(self) -> bool:
        return self.reward == 0.0

    def with_annotations(self, annotations) -> "Trajectory":
        return replace(self, annotations=tuple(annotations))

    def to_json(self) -> str:
        record = {"prompt": self.prompt, "tokens": list(self.tokens),
                  "reward": self.reward, "source": self.source}
        if self.behavior_logprobs is not None:
            record["behavior_logprobs"] = list(self.behavior_logprobs)
        if self.policy_logprobs_unmodified is not None:
            record["policy_logprobs_unmodified"] = \
                list(self.policy_logprobs_unmodified)
        if self.policy_version is not None:
            record["policy_version"] = self.policy_version
        if self.annotations is not None:
            record["annotations"] = [[t, s] for t, s in self.annotations]
        return json.dumps(record)

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        record = json.loads(line)
        known = {"prompt", "tokens", "reward", "source", "behavior_logprobs",
                 "policy_logprobs_unmodified", "policy_version", "annotations"}
        unknown = set(record) - known
        if unknown:
            raise ValueError(f"unknown trajectory fields {sorted(unknown)}")
        return cls(
            prompt=record["prompt"],
            tokens=tuple(record["tokens"]),
            reward=float(record["reward"]),
            source=record.get("source", "online"),
            behavior_logprobs=(tuple(record["behavior_logprobs"])
                               if "behavior_logprobs" in record else None),
            policy_logprobs_unmodified=(
                tuple(record["policy_logprobs_unmodified"])
                if "policy_logprobs_unmodified" in record else None),
            policy_version=record.get("policy_version"),
            annotations=(tuple((int(t), float(s)) for t, s in record["annotations"])
                         if "annotations" in record else None),
        )


class OfflineDataset:
    """Ordered trajectory collection with dedup and source/prompt indexing."""

    def __init__(self, vocab_size: int, horizon: int, dedup: bool = True,
                 path=None):
        self.vocab_size = int(vocab_size)
        self.horizon = int(horizon)
        self.dedup = bool(dedup)
        self.path = path
        self._records: list[Trajectory] = []
        self._seen: set[tuple] = set()
        self._by_prompt: dict = {}
        if path is not None:
            open(path, "a", encoding="utf-8").close()

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self._records)

    def __getitem__(self, i: int) -> Trajectory:
        return self._records[i]

    @property
    def prompts(self) -> tuple:
        return tuple(self._by_prompt)

    def by_prompt(self, prompt) -> list[Trajectory]:
        return [self._records[i] for i in self._by_prompt.get(prompt, ())]

    def _validate(self, traj: Trajectory) -> None:
        if len(traj.tokens) != self.horizon:
            raise ValueError(
                f"trajectory length {len(traj.tokens)} != horizon {self.horizon}"
            )
        if any(t < 0 or t >= self.vocab_size for t in traj.tokens):
            raise ValueError("trajectory token out of vocabulary range")

    def append(self, traj: Trajectory) -> bool:
        """Persist one record. Returns False (a reported no-op) for duplicates."""
        self._validate(traj)
        key = (traj.prompt, traj.tokens)
        if self.dedup and key in self._seen:
            return False
        self._seen.add(key)
        self._by_prompt.setdefault(traj.prompt, []).append(len(self._records))
        self._records.append(traj)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(traj.to_json())
                fh.write("\n")
        return True

    def extend(self, trajs: Sequence[Trajectory]) -> int:
        return sum(self.append(t) for t in trajs)

    def filter_correct(self) -> "OfflineDataset":
        """View containing only reward-0 records; source tags preserved."""
        view = OfflineDataset(self.vocab_size, self.horizon, dedup=self.dedup)
        for traj in self._records:
            if traj.success:
                view.append(traj)
        return view

    def sample_batch(self, k: int, rng: np.random.Generator) -> list[Trajectory]:
        """k records uniformly with replacement; seeded-reproducible."""
        if not self._records:
            raise ValueError("cannot sample from an empty dataset")
        if k == 0:
            return []
        idx = rng.integers(0, len(self._records), size=k)
        return [self._records[i] for i in idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for traj in self._records:
                fh.write(traj.to_json())
                fh.write("\n")

    @classmethod
    def load(cls, path, vocab_size: int, horizon: int,
             dedup: bool = True) -> "OfflineDataset":
        ds = cls(vocab_size, horizon, dedup=dedup)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    ds.append(Trajectory.from_json(line))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        return ds
