"""Command-line entry point.

Subcommands: ``train`` runs an experiment from a config file, ``oracle`` dumps
the exact value and optimal-policy tables, ``q0`` precomputes the per-prompt
value anchors, ``pts`` annotates a trajectory dataset with bisection probes,
``eval`` reports pass@k, and ``plot`` renders a metrics CSV to a vector chart.
All randomness hangs off ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import estimation, evaluation, runtime
from .config import ExperimentConfig, build_env, build_policy, build_reference, \
    echo_config, load_config
from .errors import ConfigError
from .oracle import optimal_policy, soft_values
from .policies import Snapshot
from .qparam import QZeroStore
from .store import OfflineDataset, Trajectory


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _seed_of(cfg: ExperimentConfig, args) -> int:
    return args.seed if getattr(args, "seed", None) is not None else cfg.run.seed


def _q0_store(cfg: ExperimentConfig, env, reference) -> QZeroStore:
    if cfg.q0.mode == "exact":
        return estimation.exact_q0_store(env, reference, cfg.beta)
    path = Path(cfg.q0.path)
    if not path.exists():
        raise ConfigError(
            f"value-anchor store {path} not found; run "
            f"`softpo q0 --config <same config>` before training"
        )
    store = QZeroStore.load(path)
    store.require(env.prompts)
    return store


def cmd_train(args) -> int:
    cfg = _load(args)
    env = build_env(cfg.env)
    reference = build_reference(cfg.reference, cfg.policy, env)
    policy = build_policy(cfg.policy, env, reference)
    q0_store = _q0_store(cfg, env, reference)
    datasets = {
        source: OfflineDataset.load(path, env.vocab_size, env.horizon)
        for source, path in cfg.datasets.items()
    }
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.yaml").write_text(echo_config(cfg), encoding="utf-8")
    result = runtime.run(env, reference, policy, cfg.run, q0_store, cfg.beta,
                         offline_datasets=datasets,
                         deterministic=True if args.deterministic else None,
                         out_dir=out)
    last = result.metrics.last()
    print(f"finished {cfg.run.total_steps} steps; "
          f"E[reward]={last['expected_reward']:.6f} "
          f"KL[policy, optimal]={last['kl_opt']:.6g}; outputs in {out}")
    return 0


def cmd_oracle(args) -> int:
    cfg = _load(args)
    env = build_env(cfg.env)
    reference = build_reference(cfg.reference, cfg.policy, env)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values_path = out / "oracle_values.jsonl"
    policy_path = out / "oracle_policy.jsonl"
    from .envs import all_sequences

    with open(values_path, "w", encoding="utf-8") as vfh, \
            open(policy_path, "w", encoding="utf-8") as pfh:
        for prompt in env.prompts:
            table = soft_values(env, prompt, reference, cfg.beta)
            opt = optimal_policy(table, reference)
            for t in range(env.horizon + 1):
                prefixes = all_sequences(env.vocab_size, t)
                for i, prefix in enumerate(prefixes):
                    vfh.write(json.dumps({
                        "prompt": prompt,
                        "prefix": [int(v) for v in prefix],
                        "q": float(table.levels[t][i]),
                    }))
                    vfh.write("\n")
                    if t < env.horizon:
                        pfh.write(json.dumps({
                            "prompt": prompt,
                            "prefix": [int(v) for v in prefix],
                            "pi_star": [float(v) for v in opt.rows[t][i]],
                            "pi_ref": [float(v) for v in opt.ref_rows[t][i]],
                        }))
                        pfh.write("\n")
    print(f"wrote {values_path} and {policy_path}")
    return 0


def cmd_q0(args) -> int:
    cfg = _load(args)
    env = build_env(cfg.env)
    reference = build_reference(cfg.reference, cfg.policy, env)
    rng = np.random.default_rng(_seed_of(cfg, args))
    store = estimation.build_q0_store(env, reference, cfg.q0.n_samples, cfg.beta,
                                      rng, allow_soft=cfg.q0.allow_soft)
    path = Path(args.out) if args.out else Path(cfg.q0.path or "q0.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    store.save(path)
    print(f"wrote anchors for {len(store)} prompt(s) to {path}")
    return 0


def cmd_pts(args) -> int:
    cfg = _load(args)
    env = build_env(cfg.env)
    reference = build_reference(cfg.reference, cfg.policy, env)
    dataset = OfflineDataset.load(args.data, env.vocab_size, env.horizon)
    rng = np.random.default_rng(_seed_of(cfg, args))
    sink: list | None = [] if args.rollouts_out else None
    annotated = estimation.annotate_dataset(env, dataset, reference,
                                            cfg.pts.k, cfg.pts.threshold, rng,
                                            rollout_sink=sink)
    annotated.save(args.out)
    print(f"annotated {len(annotated)} trajectories -> {args.out}")
    if args.rollouts_out:
        rollouts = OfflineDataset(env.vocab_size, env.horizon, dedup=True)
        rollouts.extend(sink)
        rollouts.save(args.rollouts_out)
        print(f"kept {len(rollouts)} probe rollouts -> {args.rollouts_out}")
    return 0


def cmd_import(args) -> int:
    """Convert an external trajectory record file into the native format."""
    cfg = _load(args)
    env = build_env(cfg.env)
    dataset = OfflineDataset(env.vocab_size, env.horizon)
    rejected = 0
    with open(args.data, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                if args.source is not None:
                    record["source"] = args.source
                dataset.append(Trajectory.from_json(json.dumps(record)))
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                if args.skip_invalid:
                    rejected += 1
                    continue
                raise ValueError(f"{args.data}:{lineno}: {exc}") from exc
    dataset.save(args.out)
    msg = f"imported {len(dataset)} trajectories -> {args.out}"
    if rejected:
        msg += f" ({rejected} invalid records skipped)"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    env = build_env(cfg.env)
    reference = build_reference(cfg.reference, cfg.policy, env)
    if args.params:
        policy = Snapshot.load(args.params).policy()
    else:
        policy = reference
    rng = np.random.default_rng(_seed_of(cfg, args))
    report = evaluation.evaluate(policy, env, cfg.eval, rng)
    text = json.dumps(report, indent=2, default=str)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.metrics, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        print("error: metrics file has no rows", file=sys.stderr)
        return 1
    steps = [int(r["step"]) for r in rows]
    columns = args.columns or [c for c in rows[0] if c != "step"]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for col in columns:
        ys = [float(r[col]) if r[col] not in ("", "None") else np.nan for r in rows]
        ax.plot(steps, ys, label=col)
    ax.set_xlabel("trainer step")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softpo")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured RNG seed")

    p = sub.add_parser("train", help="run a training experiment")
    common(p)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded scheduling; runs are byte-reproducible")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("oracle", help="dump exact value and optimal-policy tables")
    common(p)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("q0", help="precompute per-prompt value anchors")
    common(p)
    p.add_argument("--out", default=None, help="anchor store path")
    p.set_defaults(fn=cmd_q0)

    p = sub.add_parser("pts", help="annotate a dataset with bisection probes")
    common(p)
    p.add_argument("--data", required=True, help="input trajectory file")
    p.add_argument("--out", required=True, help="annotated output file")
    p.add_argument("--rollouts-out", default=None,
                   help="also keep probe rollouts as a dataset")
    p.set_defaults(fn=cmd_pts)

    p = sub.add_parser("import", help="convert external records to native format")
    common(p)
    p.add_argument("--data", required=True, help="external record file")
    p.add_argument("--out", required=True, help="native output file")
    p.add_argument("--source", default=None,
                   help="assign this source tag to every record")
    p.add_argument("--skip-invalid", action="store_true",
                   help="drop invalid records instead of failing")
    p.set_defaults(fn=cmd_import)

    p = sub.add_parser("eval", help="pass@k report")
    common(p)
    p.add_argument("--params", default=None, help="parameter snapshot to evaluate")
    p.add_argument("--out", default=None, help="write the report here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="render a metrics CSV to a vector chart")
    p.add_argument("--metrics", required=True, help="metrics.csv from a run")
    p.add_argument("--out", required=True, help="chart file (svg/pdf/png)")
    p.add_argument("--columns", nargs="*", default=None)
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, runtime.RunAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
