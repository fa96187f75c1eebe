"""Trainer/worker orchestration with mixed online/offline batches.

One trainer role owns the parameters; workers roll out trajectories from
immutable snapshots and ship them to the trainer through a queue. Snapshots
travel the other way every ``model_update_interval`` trainer steps; a rollout
always uses exactly one snapshot version end to end.

Deterministic mode collapses all roles into one logical thread with
round-robin scheduling and per-role seeded RNG streams, making the whole run a
pure function of (config, seed). Threaded mode exists to exercise the real
message-passing path and is not byte-reproducible.
"""

from __future__ import annotations

import csv
import json
import queue
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .envs import SequenceEnv
from .errors import ConfigError
from .losses import PpoConfig, TabularValueModel, TinyNetValueModel, \
    ppo_batch_loss, spo_batch_loss
from .oracle import ObjectiveEvaluator
from .policies import DecodingConfig, Policy, PolicyOptimizer, Snapshot, \
    sample_rollouts, sample_trajectory
from .qparam import QZeroStore
from .store import Trajectory

ONLINE = "online"


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs besides the live objects.

    ``mix`` maps data-source names to batch proportions; "online" draws from
    workers, every other name draws from the offline dataset registered under
    it. ``model_update_interval`` of None means the behavior snapshot is never
    refreshed after the initial broadcast.
    """

    total_steps: int
    batch_size: int = 128
    model_update_interval: int | None = 1
    mix: dict = field(default_factory=lambda: {ONLINE: 1.0})
    loss_specs: dict = field(default_factory=dict)
    worker_count: int = 1
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    rollout_policy: str = "latest"
    learning_rate: float = 1e-2
    warmup_steps: int = 200
    seed: int = 0
    deterministic: bool = False
    metrics_every: int = 1
    ppo: PpoConfig = field(default_factory=PpoConfig)
    value_model: str = "tabular"
    max_worker_failures: int = 3

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.model_update_interval is not None and self.model_update_interval < 1:
            raise ConfigError("model_update_interval must be a positive integer or None")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError("mix proportions must sum to 1")
        for source, prop in self.mix.items():
            n = prop * self.batch_size
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(
                    f"batch_size * proportion for source {source!r} is not an "
                    f"integer ({n})"
                )
            if source not in self.loss_specs:
                raise ConfigError(f"no loss spec configured for source {source!r}")
        if ONLINE in self.mix and self.worker_count < 1:
            raise ConfigError("online data requires at least one worker")
        if self.rollout_policy not in ("latest", "reference"):
            raise ConfigError("rollout_policy must be 'latest' or 'reference'")

    def sub_batch_sizes(self) -> dict:
        return {source: round(prop * self.batch_size)
                for source, prop in self.mix.items()}


class MetricsLog:
    """Ordered per-step rows with stable columns, written as CSV and JSON lines."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        self.rows.append({c: row.get(c) for c in self.columns})

    def last(self) -> dict:
        return self.rows[-1]

    def column(self, name) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([repr(row[c]) if isinstance(row[c], float)
                                 else row[c] for c in self.columns])

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row))
                fh.write("\n")


@dataclass
class RunResult:
    final_snapshot: Snapshot
    metrics: MetricsLog
    staleness_records: list
    consumed: dict
    aborted: bool = False


class RunAborted(RuntimeError):
    """A worker failed persistently; partial results are attached."""

    def __init__(self, message, result: RunResult):
        super().__init__(message)
        self.result = result


class _WorkerFailure:
    def __init__(self, worker_id: int, error: Exception):
        self.worker_id = worker_id
        self.error = error


class _DeterministicWorkers:
    """Round-robin in-process rollouts; a pure function of the seed stream."""

    def __init__(self, env, config: RunConfig, ref_policy, seed_seq):
        self.env = env
        self.config = config
        self.ref_policy = ref_policy
        self.rngs = [np.random.default_rng(s)
                     for s in seed_seq.spawn(config.worker_count)]
        self.snapshots: list[Snapshot | None] = [None] * config.worker_count
        self.policies: list[Policy | None] = [None] * config.worker_count
        self._next_worker = 0
        self._prompt_cursor = [i % len(env.prompts)
                               for i in range(config.worker_count)]

    def broadcast(self, snapshot: Snapshot) -> None:
        for w in range(self.config.worker_count):
            self.snapshots[w] = snapshot
            self.policies[w] = None  # rebuilt lazily from the new snapshot

    def take(self, n: int) -> list[Trajectory]:
        # Fixed round-robin split across workers and each worker's prompt
        # cycle, with one batched rollout call per (worker, prompt) group, so
        # the RNG consumption order is a pure function of the request sizes.
        W = self.config.worker_count
        shares = [n // W + (1 if i < n % W else 0)
                  for i in ((self._next_worker + j) % W for j in range(W))]
        out: list[Trajectory] = []
        for j in range(W):
            w = (self._next_worker + j) % W
            share = shares[j]
            if share == 0:
                continue
            snap = self.snapshots[w]
            if self.policies[w] is None:
                self.policies[w] = snap.policy()
            rollout_policy = (self.ref_policy if self.config.rollout_policy == "reference"
                              else self.policies[w])
            prompts = self.env.prompts
            cursor = self._prompt_cursor[w]
            counts = [share // len(prompts)] * len(prompts)
            for i in range(share % len(prompts)):
                counts[(cursor + i) % len(prompts)] += 1
            for i in range(len(prompts)):
                p = (cursor + i) % len(prompts)
                if counts[p]:
                    out.extend(sample_rollouts(
                        rollout_policy, self.env, prompts[p], counts[p],
                        self.config.decoding, self.rngs[w], source=ONLINE,
                        version=snap.version))
            self._prompt_cursor[w] = (cursor + share) % len(prompts)
        self._next_worker = (self._next_worker + n) % W
        return out

    def stop(self) -> None:
        pass


class _ThreadedWorkers:
    """Real worker threads feeding a bounded queue; snapshots via a shared cell."""

    def __init__(self, env, config: RunConfig, ref_policy, seed_seq):
        self.env = env
        self.config = config
        self.ref_policy = ref_policy
        self.queue: queue.Queue = queue.Queue(maxsize=max(64, 2 * config.batch_size))
        self._stop = threading.Event()
        self._cell_lock = threading.Lock()
        self._cell: Snapshot | None = None
        self._threads: list[threading.Thread] = []
        self._seeds = seed_seq.spawn(config.worker_count)
        self._started = False

    def broadcast(self, snapshot: Snapshot) -> None:
        with self._cell_lock:
            self._cell = snapshot
        if not self._started:
            self._started = True
            for w in range(self.config.worker_count):
                t = threading.Thread(target=self._work, args=(w,), daemon=True)
                t.start()
                self._threads.append(t)

    def _current_snapshot(self) -> Snapshot:
        with self._cell_lock:
            return self._cell

    def _work(self, worker_id: int) -> None:
        rng = np.random.default_rng(self._seeds[worker_id])
        prompts = self.env.prompts
        cursor = worker_id % len(prompts)
        snap = self._current_snapshot()
        policy = snap.policy()
        failures = 0
        while not self._stop.is_set():
            latest = self._current_snapshot()
            if latest.version != snap.version:
                snap = latest
                policy = snap.policy()
            prompt = prompts[cursor]
            cursor = (cursor + 1) % len(prompts)
            try:
                rollout_policy = (self.ref_policy
                                  if self.config.rollout_policy == "reference"
                                  else policy)
                traj = sample_trajectory(rollout_policy, self.env, prompt,
                                         self.config.decoding, rng,
                                         source=ONLINE, version=snap.version)
                failures = 0
            except Exception as exc:  # worker retries, then reports and exits
                failures += 1
                if failures > self.config.max_worker_failures:
                    self.queue.put(_WorkerFailure(worker_id, exc))
                    return
                continue
            while not self._stop.is_set():
                try:
                    self.queue.put(traj, timeout=0.05)
                    break
                except queue.Full:
                    continue

    def take(self, n: int) -> list[Trajectory]:
        out = []
        while len(out) < n:
            item = self.queue.get()
            if isinstance(item, _WorkerFailure):
                raise RunAbortedSignal(item)
            out.append(item)
        return out

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            while t.is_alive():
                try:
                    self.queue.get_nowait()
                except queue.Empty:
                    pass
                t.join(timeout=0.05)


class RunAbortedSignal(Exception):
    def __init__(self, failure: _WorkerFailure):
        super().__init__("worker failed persistently")
        self.failure = failure


def mix_batch(online_workers, offline_datasets: dict, mix: dict,
              batch_size: int, rng: np.random.Generator | dict) -> list[tuple[Trajectory, str]]:
    """Assemble one batch with exact per-source counts.

    Returns (trajectory, source) pairs in source order: online first if
    present, then the offline sources in mix order.
    """
    batch: list[tuple[Trajectory, str]] = []
    for source, prop in mix.items():
        n = round(prop * batch_size)
        if n == 0:
            continue
        if source == ONLINE:
            for traj in online_workers.take(n):
                batch.append((traj, ONLINE))
        else:
            dataset = offline_datasets.get(source)
            if dataset is None:
                raise ValueError(f"no offline dataset registered for source {source!r}")
            if len(dataset) == 0:
                raise ValueError(f"offline source {source!r} is exhausted (empty dataset)")
            source_rng = rng[source] if isinstance(rng, dict) else rng
            for traj in dataset.sample_batch(n, source_rng):
                batch.append((traj, source))
    return batch


def batch_loss(policy, ref_policy, batch, q0_store: QZeroStore, loss_specs: dict,
               beta: float, value_model=None, ppo_config: PpoConfig | None = None):
    """Mean per-trajectory loss over the batch, plus per-source means."""
    groups: dict = defaultdict(list)
    for traj, source in batch:
        groups[(source, traj.prompt)].append(traj)
    total = torch.zeros((), dtype=torch.float64)
    source_sums: dict = defaultdict(float)
    source_counts: dict = defaultdict(int)
    for (source, prompt), trajs in groups.items():
        spec = loss_specs[source]
        if spec.variant == "ppo":
            if value_model is None:
                raise ValueError("PPO loss requires a value model")
            pol_loss, val_loss = ppo_batch_loss(policy, value_model, ref_policy,
                                                prompt, trajs, ppo_config, beta)
            loss = pol_loss + ppo_config.value_loss_weight * val_loss
        else:
            loss = spo_batch_loss(policy, ref_policy, prompt, trajs,
                                  q0_store.q0(prompt), beta, spec)
        total = total + loss * len(trajs)
        source_sums[source] += float(loss.detach()) * len(trajs)
        source_counts[source] += len(trajs)
    per_source = {s: source_sums[s] / source_counts[s] for s in source_counts}
    return total / len(batch), per_source


def _make_value_model(kind: str, env: SequenceEnv):
    if kind == "tabular":
        return TabularValueModel(env.prompts, env.vocab_size, env.horizon)
    if kind == "tiny-net":
        return TinyNetValueModel(env.prompts, env.vocab_size, env.horizon)
    raise ConfigError(f"unknown value model kind {kind!r}")


def run(env: SequenceEnv, ref_policy, policy: Policy, config: RunConfig,
        q0_store: QZeroStore, beta: float,
        offline_datasets: dict | None = None, deterministic: bool | None = None,
        out_dir=None) -> RunResult:
    """Execute ``total_steps`` trainer updates and return the artifacts.

    ``deterministic`` overrides the config flag when given. Raises
    :class:`RunAborted` (with partial metrics attached and written) if a worker
    fails persistently.
    """
    if deterministic is None:
        deterministic = config.deterministic
    offline_datasets = offline_datasets or {}
    q0_store.require(env.prompts)
    needs_online = ONLINE in config.mix and config.mix[ONLINE] > 0
    seed_seq = np.random.SeedSequence(config.seed)
    worker_seeds, offline_seed = seed_seq.spawn(2)
    offline_rngs = {source: np.random.default_rng(s)
                    for source, s in zip(sorted(config.mix), offline_seed.spawn(len(config.mix)))}

    workers = (_DeterministicWorkers if deterministic else _ThreadedWorkers)(
        env, config, ref_policy, worker_seeds
    )
    uses_ppo = any(spec.variant == "ppo" for spec in config.loss_specs.values())
    value_model = _make_value_model(config.value_model, env) if uses_ppo else None
    modules = [policy] + ([value_model] if value_model is not None else [])
    optimizer = PolicyOptimizer(modules, config.learning_rate, config.warmup_steps)

    evaluators = {prompt: ObjectiveEvaluator(env, prompt, ref_policy, beta)
                  for prompt in env.prompts}

    loss_columns = [f"loss_{source}" for source in config.mix]
    columns = ["step", *loss_columns, "expected_reward", "kl_ref", "kl_opt",
               "entropy", "objective", "max_staleness"]
    metrics = MetricsLog(columns)
    staleness_records: list[dict] = []
    consumed: dict = defaultdict(int)

    if needs_online or config.rollout_policy == "reference":
        workers.broadcast(policy.snapshot())

    def finalize(aborted: bool) -> RunResult:
        workers.stop()
        result = RunResult(policy.snapshot(), metrics, staleness_records,
                           dict(consumed), aborted=aborted)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            metrics.write_csv(out / "metrics.csv")
            metrics.write_jsonl(out / "metrics.jsonl")
            result.final_snapshot.save(out / "final_params.json")
            with open(out / "staleness.jsonl", "w", encoding="utf-8") as fh:
                for rec in staleness_records:
                    fh.write(json.dumps(rec))
                    fh.write("\n")
        return result

    try:
        for step in range(1, config.total_steps + 1):
            batch = mix_batch(workers, offline_datasets, config.mix,
                              config.batch_size, offline_rngs)
            max_staleness = 0
            trainer_version = policy.version
            for traj, source in batch:
                consumed[source] += 1
                if source == ONLINE:
                    staleness = trainer_version - (traj.policy_version or 0)
                    max_staleness = max(max_staleness, staleness)
                    staleness_records.append({
                        "step": step,
                        "sampled_version": traj.policy_version,
                        "trainer_version": trainer_version,
                        "staleness": staleness,
                    })
            loss, per_source = batch_loss(policy, ref_policy, batch, q0_store,
                                          config.loss_specs, beta, value_model,
                                          config.ppo)
            optimizer.step(loss)
            if (config.model_update_interval is not None
                    and step % config.model_update_interval == 0
                    and (needs_online or config.rollout_policy == "reference")):
                workers.broadcast(policy.snapshot())
            if step % config.metrics_every == 0 or step == config.total_steps:
                breakdown = [evaluators[prompt].of(policy) for prompt in env.prompts]
                row = {"step": step, "max_staleness": max_staleness}
                for source in config.mix:
                    row[f"loss_{source}"] = per_source.get(source)
                row["expected_reward"] = float(np.mean([b.expected_reward for b in breakdown]))
                row["kl_ref"] = float(np.mean([b.kl_ref for b in breakdown]))
                row["kl_opt"] = float(np.mean([b.kl_opt for b in breakdown]))
                row["entropy"] = float(np.mean([b.entropy for b in breakdown]))
                row["objective"] = float(np.mean([b.objective for b in breakdown]))
                metrics.append(row)
    except RunAbortedSignal as sig:
        result = finalize(aborted=True)
        raise RunAborted(
            f"worker {sig.failure.worker_id} failed persistently: {sig.failure.error}",
            result,
        ) from sig.failure.error
    return finalize(aborted=False)
