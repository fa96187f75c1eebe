"""Experiment configuration: strict YAML in, validated dataclasses out.

Unknown keys are rejected with their full path. ``echo`` re-serializes a parsed
configuration such that parsing the echo reproduces the same objects.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import yaml

from .envs import SeededRandomEnv, SequenceEnv, SuffixMatchEnv, TargetSetEnv
from .errors import ConfigError
from .evaluation import EvalSpec
from .losses import LossSpec, PpoConfig
from .policies import DecodingConfig, Policy, TabularPolicy, TinyNetPolicy
from .runtime import RunConfig

# Default regularization strength used at paper scale; desk-scale configs
# usually override it with something larger.
DEFAULT_BETA = 1.0 / math.log(100_000)


@dataclass(frozen=True)
class EnvConfig:
    kind: str
    vocab_size: int
    horizon: int
    prompts: tuple = (0,)
    accepting: tuple | None = None      # target-set
    pattern: tuple | None = None        # suffix-match
    seed: int | None = None             # seeded-random
    success_prob: float = 0.25
    continuous: bool = False


@dataclass(frozen=True)
class ReferenceConfig:
    kind: str = "uniform"   # uniform | seeded
    scale: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "tabular"   # tabular | tiny-net
    hidden: tuple = (32, 32)
    seed: int = 0


@dataclass(frozen=True)
class Q0Config:
    mode: str = "exact"     # exact | file
    path: str | None = None
    n_samples: int = 800
    allow_soft: bool = False


@dataclass(frozen=True)
class PtsConfig:
    k: int = 10
    threshold: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig
    beta: float
    reference: ReferenceConfig
    policy: PolicyConfig
    q0: Q0Config
    run: RunConfig
    datasets: dict
    eval: EvalSpec
    pts: PtsConfig
    out_dir: str = "out"


def _strict(mapping: dict, allowed, path: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")


def _seq(value):
    if isinstance(value, dict):
        return {k: _seq(v) for k, v in value.items()}
    if isinstance(value, list):
        return tuple(_seq(v) for v in value)
    return value


def _parse_env(d: dict) -> EnvConfig:
    _strict(d, {"kind", "vocab_size", "horizon", "prompts", "accepting",
                "pattern", "seed", "success_prob", "continuous"}, "env")
    for key in ("kind", "vocab_size", "horizon"):
        if key not in d:
            raise ConfigError(f"env.{key}: required")
    return EnvConfig(
        kind=d["kind"],
        vocab_size=int(d["vocab_size"]),
        horizon=int(d["horizon"]),
        prompts=_seq(d.get("prompts", [0])),
        accepting=_seq(d["accepting"]) if "accepting" in d else None,
        pattern=_seq(d["pattern"]) if "pattern" in d else None,
        seed=d.get("seed"),
        success_prob=float(d.get("success_prob", 0.25)),
        continuous=bool(d.get("continuous", False)),
    )


def _parse_decoding(d: dict, path: str) -> DecodingConfig:
    _strict(d, {"temperature", "top_p"}, path)
    temp = d.get("temperature", 1.0)
    if isinstance(temp, list):
        temp = tuple(float(v) for v in temp)
    try:
        return DecodingConfig(temperature=temp, top_p=float(d.get("top_p", 1.0)))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_loss_spec(d: dict, path: str) -> LossSpec:
    _strict(d, {"variant", "base_loss", "clip_threshold", "warp_scale",
                "applies_to"}, path)
    if "variant" not in d:
        raise ConfigError(f"{path}.variant: required")
    try:
        return LossSpec(
            variant=d["variant"],
            base_loss=d.get("base_loss", "squared"),
            clip_threshold=float(d.get("clip_threshold", -1e-4)),
            warp_scale=(float(d["warp_scale"])
                        if d.get("warp_scale") is not None else None),
            applies_to=d.get("applies_to"),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_ppo(d: dict) -> PpoConfig:
    _strict(d, {"gae_gamma", "gae_lambda", "clip_epsilon", "value_loss_weight",
                "importance_weight_clamp"}, "run.ppo")
    try:
        return PpoConfig(
            gae_gamma=float(d.get("gae_gamma", 1.0)),
            gae_lambda=float(d.get("gae_lambda", 0.95)),
            clip_epsilon=float(d.get("clip_epsilon", 0.2)),
            value_loss_weight=float(d.get("value_loss_weight", 0.5)),
            importance_weight_clamp=float(d.get("importance_weight_clamp", 10.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"run.ppo: {exc}") from exc


def _parse_run(d: dict, losses: dict) -> RunConfig:
    _strict(d, {"total_steps", "batch_size", "model_update_interval", "mix",
                "worker_count", "decoding", "rollout_policy", "learning_rate",
                "warmup_steps", "seed", "deterministic", "metrics_every", "ppo",
                "value_model", "max_worker_failures"}, "run")
    if "total_steps" not in d:
        raise ConfigError("run.total_steps: required")
    mix = d.get("mix", {"online": 1.0})
    _strict({k: None for k in losses}, set(mix), "losses (must match run.mix sources)")
    # Online rollout default: random temperature in [0.1, 0.8] with nucleus
    # 0.95. PPO configs should override to temperature 1 / top_p 1.
    decoding_default = {"temperature": [0.1, 0.8], "top_p": 0.95}
    try:
        return RunConfig(
            total_steps=int(d["total_steps"]),
            batch_size=int(d.get("batch_size", 128)),
            model_update_interval=(int(d["model_update_interval"])
                                   if d.get("model_update_interval") is not None
                                   else None),
            mix={k: float(v) for k, v in mix.items()},
            loss_specs=losses,
            worker_count=int(d.get("worker_count", 1)),
            decoding=_parse_decoding(d.get("decoding", decoding_default),
                                     "run.decoding"),
            rollout_policy=d.get("rollout_policy", "latest"),
            learning_rate=float(d.get("learning_rate", 1e-2)),
            warmup_steps=int(d.get("warmup_steps", 200)),
            seed=int(d.get("seed", 0)),
            deterministic=bool(d.get("deterministic", False)),
            metrics_every=int(d.get("metrics_every", 1)),
            ppo=_parse_ppo(d.get("ppo", {})),
            value_model=d.get("value_model", "tabular"),
            max_worker_failures=int(d.get("max_worker_failures", 3)),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"run: {exc}") from exc


def parse_config(data: dict) -> ExperimentConfig:
    _strict(data, {"env", "beta", "reference", "policy", "q0", "run", "losses",
                   "datasets", "eval", "pts", "out_dir"}, "<root>")
    for key in ("env", "run"):
        if key not in data:
            raise ConfigError(f"{key}: required section")
    env = _parse_env(data["env"])

    ref_d = data.get("reference", {})
    _strict(ref_d, {"kind", "scale", "seed"}, "reference")
    reference = ReferenceConfig(kind=ref_d.get("kind", "uniform"),
                                scale=float(ref_d.get("scale", 1.0)),
                                seed=int(ref_d.get("seed", 0)))
    if reference.kind not in ("uniform", "seeded"):
        raise ConfigError(f"reference.kind: unknown kind {reference.kind!r}")

    pol_d = data.get("policy", {})
    _strict(pol_d, {"kind", "hidden", "seed"}, "policy")
    policy = PolicyConfig(kind=pol_d.get("kind", "tabular"),
                          hidden=_seq(pol_d.get("hidden", [32, 32])),
                          seed=int(pol_d.get("seed", 0)))
    if policy.kind not in ("tabular", "tiny-net"):
        raise ConfigError(f"policy.kind: unknown kind {policy.kind!r}")
    if policy.kind == "tiny-net" and reference.kind == "seeded":
        raise ConfigError("seeded reference rows require a tabular policy")

    q0_d = data.get("q0", {})
    _strict(q0_d, {"mode", "path", "n_samples", "allow_soft"}, "q0")
    q0 = Q0Config(mode=q0_d.get("mode", "exact"), path=q0_d.get("path"),
                  n_samples=int(q0_d.get("n_samples", 800)),
                  allow_soft=bool(q0_d.get("allow_soft", False)))
    if q0.mode not in ("exact", "file"):
        raise ConfigError(f"q0.mode: unknown mode {q0.mode!r}")
    if q0.mode == "file" and not q0.path:
        raise ConfigError("q0.path: required when q0.mode is 'file'")

    losses_d = data.get("losses", {"online": {"variant": "terminal-q"}})
    losses = {source: _parse_loss_spec(spec, f"losses.{source}")
              for source, spec in losses_d.items()}

    run_cfg = _parse_run(data["run"], losses)

    datasets = data.get("datasets", {})
    _strict(datasets, set(run_cfg.mix) - {"online"}, "datasets")
    for source in run_cfg.mix:
        if source != "online" and source not in datasets:
            raise ConfigError(f"datasets.{source}: required by run.mix")

    eval_d = data.get("eval", {})
    _strict(eval_d, {"n_samples", "k", "decoding"}, "eval")
    try:
        eval_spec = EvalSpec(
            n_samples=int(eval_d.get("n_samples", 20)),
            k=int(eval_d.get("k", 10)),
            decoding=_parse_decoding(
                eval_d.get("decoding", {"temperature": 0.4, "top_p": 0.95}),
                "eval.decoding"),
        )
    except ValueError as exc:
        raise ConfigError(f"eval: {exc}") from exc

    pts_d = data.get("pts", {})
    _strict(pts_d, {"k", "threshold"}, "pts")
    pts = PtsConfig(k=int(pts_d.get("k", 10)),
                    threshold=float(pts_d.get("threshold", 0.2)))

    return ExperimentConfig(
        env=env,
        beta=float(data.get("beta", DEFAULT_BETA)),
        reference=reference,
        policy=policy,
        q0=q0,
        run=run_cfg,
        datasets=dict(datasets),
        eval=eval_spec,
        pts=pts,
        out_dir=data.get("out_dir", "out"),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return parse_config(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def echo_config(cfg: ExperimentConfig) -> str:
    """Serialize back to YAML such that parsing the result reproduces ``cfg``."""

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items() if v is not None}
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        return obj

    data = {
        "env": clean(asdict(cfg.env)),
        "beta": cfg.beta,
        "reference": clean(asdict(cfg.reference)),
        "policy": clean(asdict(cfg.policy)),
        "q0": clean(asdict(cfg.q0)),
        "run": {
            "total_steps": cfg.run.total_steps,
            "batch_size": cfg.run.batch_size,
            "model_update_interval": cfg.run.model_update_interval,
            "mix": dict(cfg.run.mix),
            "worker_count": cfg.run.worker_count,
            "decoding": clean(asdict(cfg.run.decoding)),
            "rollout_policy": cfg.run.rollout_policy,
            "learning_rate": cfg.run.learning_rate,
            "warmup_steps": cfg.run.warmup_steps,
            "seed": cfg.run.seed,
            "deterministic": cfg.run.deterministic,
            "metrics_every": cfg.run.metrics_every,
            "ppo": clean(asdict(cfg.run.ppo)),
            "value_model": cfg.run.value_model,
            "max_worker_failures": cfg.run.max_worker_failures,
        },
        "losses": {source: clean(asdict(spec))
                   for source, spec in cfg.run.loss_specs.items()},
        "datasets": dict(cfg.datasets),
        "eval": clean(asdict(cfg.eval)),
        "pts": clean(asdict(cfg.pts)),
        "out_dir": cfg.out_dir,
    }
    return yaml.safe_dump(data, sort_keys=False)


# --- Builders --------------------------------------------------------------------


def build_env(cfg: EnvConfig) -> SequenceEnv:
    if cfg.kind == "target-set":
        if cfg.accepting is None:
            raise ConfigError("env.accepting: required for target-set")
        accepting = cfg.accepting
        if isinstance(accepting, tuple):
            accepting = list(accepting)
        return TargetSetEnv(cfg.prompts, cfg.vocab_size, cfg.horizon, accepting)
    if cfg.kind == "suffix-match":
        if cfg.pattern is None:
            raise ConfigError("env.pattern: required for suffix-match")
        return SuffixMatchEnv(cfg.prompts, cfg.vocab_size, cfg.horizon, cfg.pattern)
    if cfg.kind == "seeded-random":
        if cfg.seed is None:
            raise ConfigError("env.seed: required for seeded-random")
        return SeededRandomEnv(cfg.prompts, cfg.vocab_size, cfg.horizon,
                               seed=cfg.seed, success_prob=cfg.success_prob,
                               continuous=cfg.continuous)
    raise ConfigError(f"env.kind: unknown kind {cfg.kind!r}")


def build_reference(cfg: ReferenceConfig, pol_cfg: PolicyConfig,
                    env: SequenceEnv) -> Policy:
    if pol_cfg.kind == "tiny-net":
        ref = TinyNetPolicy(env.prompts, env.vocab_size, env.horizon,
                            hidden=pol_cfg.hidden, seed=pol_cfg.seed)
        for p in ref.parameters():
            p.requires_grad_(False)
        return ref
    scale = cfg.scale if cfg.kind == "seeded" else 0.0
    ref = TabularPolicy(env.prompts, env.vocab_size, env.horizon,
                        init_scale=scale, seed=cfg.seed)
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


def build_policy(pol_cfg: PolicyConfig, env: SequenceEnv, reference: Policy) -> Policy:
    if pol_cfg.kind == "tabular":
        policy = TabularPolicy(env.prompts, env.vocab_size, env.horizon)
    else:
        policy = TinyNetPolicy(env.prompts, env.vocab_size, env.horizon,
                               hidden=pol_cfg.hidden, seed=pol_cfg.seed)
    policy.init_from(reference)
    return policy
