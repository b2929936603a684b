"""Run configuration: strict `section.key = value` files with typed defaults.

Every key has a declared type and default; unknown keys, bad types, and
malformed lines are rejected with the offending key and line number. A few
keys default to "auto" and resolve per env family (splits, task counts, the
adaptation protocol, and whether the model predicts state).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import envs
from .dynmodel import ModelConfig
from .errors import ConfigError
from .orchestrate import AdaptConfig, EnvConfig, MetaTrainConfig, family_adapt_defaults, family_task_counts
from .policy import SacConfig

MODES = ("meta_train", "adapt", "eval", "check_grads")


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected true or false")


def _parse_dims(text: str) -> tuple[int, ...]:
    dims = tuple(int(p.strip()) for p in text.split(",") if p.strip())
    if not dims or any(d <= 0 for d in dims):
        raise ValueError("expected comma-separated positive integers")
    return dims


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "dims": _parse_dims,
}


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (type name, default, choices or None)
KEY_SPECS: dict[str, tuple[str, Any, tuple | None]] = {
    "run.seed": ("int", 0, None),
    "run.out_dir": ("str", "runs/out", None),
    "run.id": ("str", "", None),
    "run.checkpoint": ("str", "", None),
    "run.deterministic_timestamps": ("bool", True, None),
    "env.family": ("str", "vel1d", envs.FAMILIES),
    "env.split": ("str", "auto", None),
    "env.n_train_tasks": ("int", 0, None),  # 0 = per-family default
    "env.n_test_tasks": ("int", 0, None),
    "env.horizon": ("int", envs.DEFAULT_HORIZON, None),
    "model.d_ctx": ("int", 5, None),
    "model.predict_state": ("str", "auto", ("auto", "true", "false")),
    "model.predict_delta": ("bool", True, None),
    "model.inner_lr": ("float", 0.01, None),
    "model.inner_steps": ("int", 2, None),
    "model.meta_batch_size": ("int", 10, None),
    "model.hidden_dims": ("dims", (64, 64), None),
    "model.log_std_min": ("float", -10.0, None),
    "model.log_std_max": ("float", 2.0, None),
    "sac.discount": ("float", 0.99, None),
    "sac.lr": ("float", 3e-4, None),
    "sac.target_update_rate": ("float", 0.005, None),
    "sac.target_update_interval": ("int", 1, None),
    "sac.temperature": ("float", 1.0, None),
    "sac.reward_scale": ("float", 1.0, None),
    "sac.batch_size": ("int", 256, None),
    "sac.hidden_dims": ("dims", (64, 64, 64), None),
    "meta.outer_iterations": ("int", 100, None),
    "meta.policy_steps_per_iter": ("int", 1000, None),
    "meta.model_meta_steps_per_iter": ("int", 50, None),
    "meta.episodes_per_task": ("int", 1, None),
    "meta.gradient_norm_clip": ("float", 10.0, None),
    "meta.outer_lr": ("float", 3e-4, None),
    "meta.model_batch_size": ("int", 128, None),
    "meta.eval_interval": ("int", 10, None),
    "meta.eval_episodes": ("int", 1, None),
    "meta.eval_tasks": ("int", 5, None),
    "meta.checkpoint_interval": ("int", 50, None),
    "adapt.points": ("int", 0, None),  # 0 = per-family default
    "adapt.n_fast": ("int", -1, None),  # -1 = per-family default
    "adapt.m_steps": ("int", -1, None),
    "adapt.policy_steps_per_round": ("int", 250, None),
    "adapt.total_policy_steps": ("int", 2500, None),
    "adapt.gate_threshold": ("float", -3.0, None),
    "adapt.relabel_mode": ("str", "auto", ("auto", "reward_only", "full")),
    "adapt.real_fraction": ("float", 0.05, None),
    "adapt.synthetic_batch_size": ("int", 2048, None),
    "adapt.resample_actions": ("bool", True, None),
    "adapt.stochastic_relabel": ("bool", True, None),
    "adapt.val_frac": ("float", 0.8, None),
    "adapt.full_step_lr": ("float", 3e-4, None),
    "adapt.context_grad_clip": ("float", 10.0, None),
    "adapt.eval_episodes": ("int", 3, None),
    "adapt.max_tasks": ("int", 0, None),  # 0 = all test tasks
    "replay.capacity_per_task": ("int", 100_000, None),
    "replay.cross_task_count": ("int", 20, None),
    "replay.cross_task_pool": ("int", 100_000, None),
    "eval.partition": ("str", "test", ("train", "test")),
    "eval.tasks": ("int", 0, None),
    "eval.episodes": ("int", 1, None),
    "eval.adapt_points": ("int", 0, None),  # 0 = one full episode
    "gradcheck.trials": ("int", 100, None),
    "gradcheck.tolerance": ("float", 1e-4, None),
}


@dataclass
class RunConfig:
    """Raw key-value view plus the mode selected on the command line."""

    values: dict[str, Any] = field(default_factory=dict)
    mode: str = "meta_train"

    def __post_init__(self):
        full = {key: default for key, (_, default, _) in KEY_SPECS.items()}
        full.update(self.values)
        self.values = full

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, raw: str):
        self.values[key] = parse_value(key, raw)


def parse_value(key: str, raw: str, line_no: int | None = None) -> Any:
    where = f" (line {line_no})" if line_no is not None else ""
    spec = KEY_SPECS.get(key)
    if spec is None:
        raise ConfigError(f"unknown config key {key!r}{where}")
    type_name, _, choices = spec
    try:
        value = _PARSERS[type_name](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}{where}: {exc}") from None
    if choices is not None and value not in choices:
        raise ConfigError(f"{key!r}{where} must be one of {choices}, got {value!r}")
    return value


def load_config(path: str | Path, mode: str = "meta_train") -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, Any] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"malformed line {line_no} in {path}: {line!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        values[key] = parse_value(key, raw, line_no)
    return RunConfig(values=values, mode=mode)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{key} = {_fmt(cfg.values[key])}" for key in sorted(KEY_SPECS)]
    return "\n".join(lines) + "\n"


@dataclass
class Resolved:
    """Concrete module configs with every "auto" replaced."""

    env: EnvConfig
    model: ModelConfig
    sac: SacConfig
    meta: MetaTrainConfig
    adapt: AdaptConfig
    seed: int
    out_dir: Path
    run_id: str
    checkpoint: str
    deterministic_timestamps: bool
    replay_capacity: int
    cross_task_count: int
    cross_task_pool: int
    eval_partition: str
    eval_tasks: int
    eval_episodes: int
    eval_adapt_points: int
    gradcheck_trials: int
    gradcheck_tolerance: float


def resolve(cfg: RunConfig) -> Resolved:
    v = cfg.values
    family = v["env.family"]
    split = v["env.split"]
    if split == "auto":
        split = "hard" if family == "vel1d" else "default"
    envs.get_split(family, split)  # validate the pair early
    n_train, n_test = family_task_counts(family)
    env_cfg = EnvConfig(
        family=family,
        split=split,
        n_train_tasks=v["env.n_train_tasks"] or n_train,
        n_test_tasks=v["env.n_test_tasks"] or n_test,
        horizon=v["env.horizon"],
    )

    state_dim, action_dim = envs.family_dims(family)
    predict_state = v["model.predict_state"]
    if predict_state == "auto":
        predict_state = not envs.reward_only(family)
    else:
        predict_state = predict_state == "true"
    model_cfg = ModelConfig(
        state_dim=state_dim,
        action_dim=action_dim,
        d_ctx=v["model.d_ctx"],
        predict_state=predict_state,
        predict_delta=v["model.predict_delta"],
        inner_lr=v["model.inner_lr"],
        inner_steps=v["model.inner_steps"],
        meta_batch_size=v["model.meta_batch_size"],
        hidden_dims=v["model.hidden_dims"],
        log_std_bounds=(v["model.log_std_min"], v["model.log_std_max"]),
    )

    sac_cfg = SacConfig(
        discount=v["sac.discount"],
        lr=v["sac.lr"],
        target_update_rate=v["sac.target_update_rate"],
        target_update_interval=v["sac.target_update_interval"],
        temperature=v["sac.temperature"],
        reward_scale=v["sac.reward_scale"],
        batch_size=v["sac.batch_size"],
        hidden_dims=v["sac.hidden_dims"],
        log_std_bounds=(v["model.log_std_min"], v["model.log_std_max"]),
    )

    meta_cfg = MetaTrainConfig(
        outer_iterations=v["meta.outer_iterations"],
        policy_steps_per_iter=v["meta.policy_steps_per_iter"],
        model_meta_steps_per_iter=v["meta.model_meta_steps_per_iter"],
        episodes_per_task=v["meta.episodes_per_task"],
        gradient_norm_clip=v["meta.gradient_norm_clip"],
        outer_lr=v["meta.outer_lr"],
        model_batch_size=v["meta.model_batch_size"],
        eval_interval=v["meta.eval_interval"],
        eval_episodes=v["meta.eval_episodes"],
        eval_tasks=v["meta.eval_tasks"],
        checkpoint_interval=v["meta.checkpoint_interval"],
    )

    fam = family_adapt_defaults(family)
    relabel_mode = v["adapt.relabel_mode"]
    if relabel_mode == "auto":
        relabel_mode = fam["relabel_mode"]
    adapt_cfg = AdaptConfig(
        adapt_points=v["adapt.points"] or fam["adapt_points"],
        n_fast=fam["n_fast"] if v["adapt.n_fast"] < 0 else v["adapt.n_fast"],
        m_steps=fam["m_steps"] if v["adapt.m_steps"] < 0 else v["adapt.m_steps"],
        policy_steps_per_round=v["adapt.policy_steps_per_round"],
        total_policy_steps=v["adapt.total_policy_steps"],
        gate_threshold=v["adapt.gate_threshold"],
        relabel_mode=relabel_mode,
        real_fraction=v["adapt.real_fraction"],
        synthetic_batch_size=v["adapt.synthetic_batch_size"],
        resample_actions=v["adapt.resample_actions"],
        stochastic_relabel=v["adapt.stochastic_relabel"],
        val_frac=v["adapt.val_frac"],
        full_step_lr=v["adapt.full_step_lr"],
        context_grad_clip=v["adapt.context_grad_clip"],
        eval_episodes=v["adapt.eval_episodes"],
    )

    run_id = v["run.id"] or f"seed{v['run.seed']}"
    return Resolved(
        env=env_cfg,
        model=model_cfg,
        sac=sac_cfg,
        meta=meta_cfg,
        adapt=adapt_cfg,
        seed=v["run.seed"],
        out_dir=Path(v["run.out_dir"]),
        run_id=run_id,
        checkpoint=v["run.checkpoint"],
        deterministic_timestamps=v["run.deterministic_timestamps"],
        replay_capacity=v["replay.capacity_per_task"],
        cross_task_count=v["replay.cross_task_count"],
        cross_task_pool=v["replay.cross_task_pool"],
        eval_partition=v["eval.partition"],
        eval_tasks=v["eval.tasks"],
        eval_episodes=v["eval.episodes"],
        eval_adapt_points=v["eval.adapt_points"],
        gradcheck_trials=v["gradcheck.trials"],
        gradcheck_tolerance=v["gradcheck.tolerance"],
    )


def echo_resolved(cfg: RunConfig, resolved: Resolved) -> str:
    """Config text that reproduces this run exactly (autos materialized)."""
    out = RunConfig(values=dict(cfg.values), mode=cfg.mode)
    out.values["env.split"] = resolved.env.split
    out.values["env.n_train_tasks"] = resolved.env.n_train_tasks
    out.values["env.n_test_tasks"] = resolved.env.n_test_tasks
    out.values["model.predict_state"] = "true" if resolved.model.predict_state else "false"
    out.values["adapt.points"] = resolved.adapt.adapt_points
    out.values["adapt.n_fast"] = resolved.adapt.n_fast
    out.values["adapt.m_steps"] = resolved.adapt.m_steps
    out.values["adapt.relabel_mode"] = resolved.adapt.relabel_mode
    out.values["run.id"] = resolved.run_id
    return dump_config(out)
