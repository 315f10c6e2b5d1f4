"""INI-style run configuration with strict key checking.

Unknown sections or keys are hard errors: a misspelled hyperparameter
must never silently fall back to a default. The resolved configuration
(every default filled in) is written next to each run's outputs.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import fields

from sable.attention import AttentionConfig
from sable.envs import make_env
from sable.net import ActionSpace, SableConfig
from sable.trainer import TrainConfig


class ConfigError(ValueError):
    """Configuration file is missing, malformed, or has unknown keys."""


MODEL_KEYS = {
    "model": str,
    "d_model": int,
    "n_heads": int,
    "n_blocks": int,
    "kappa_scale": float,
    "memory_mode": str,
    "chunk_agents": int,
    "norm": str,
    "ff": str,
}

TRAIN_KEYS = {
    "rollout_length": int,
    "updates": int,
    "epochs": int,
    "minibatches": int,
    "gamma": float,
    "gae_lambda": float,
    "clip_eps": float,
    "entropy_coef": float,
    "value_coef": float,
    "max_grad_norm": float,
    "learning_rate": float,
    "normalize_advantage": bool,
    "n_envs": int,
    "seed": int,
    "time_chunk_steps": int,
    "eval_every": int,
    "eval_episodes": int,
    "checkpoint_every": int,
}

ENV_KEYS = {"name": str}

BENCH_KEYS = {
    "sweep": str,
    "agent_counts": str,
    "chunk_steps": str,
    "steps": int,
    "d_model": int,
    "rollout_length": int,
}

MODEL_DEFAULTS = {
    "model": "sable",
    "d_model": 32,
    "n_heads": 2,
    "n_blocks": 1,
    "kappa_scale": 1.0,
    "memory_mode": "full-trajectory",
    "chunk_agents": 0,
    "norm": "rms",
    "ff": "swiglu",
}

BENCH_DEFAULTS = {
    "sweep": "agents",
    "agent_counts": "8,16,32,64,128,256",
    "chunk_steps": "8,16,32,64,128",
    "steps": 5,
    "d_model": 32,
    "rollout_length": 128,
}

_SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "env": ENV_KEYS, "bench": BENCH_KEYS}


def _line_of(path: str, section: str, key: str) -> str:
    """Best-effort line anchor for an error message."""
    try:
        with open(path) as f:
            for i, line in enumerate(f, 1):
                stripped = line.strip()
                if stripped.startswith(key) and ("=" in stripped or ":" in stripped):
                    return f"{path}:{i}"
    except OSError:
        pass
    return f"{path} [{section}]"


class RunConfig:
    """Parsed and validated configuration for one run."""

    def __init__(self, env_name: str, model: dict, train: TrainConfig, bench: dict):
        self.env_name = env_name
        self.model = model
        self.train = train
        self.bench = bench

    def build_net(self, seed: int | None = None):
        from sable.attention import AttentionNet
        from sable.net import SableNet

        env = make_env(self.env_name)
        seed = self.train.seed if seed is None else seed
        m = self.model
        if m["model"] == "sable":
            cfg = SableConfig(
                obs_dim=env.spec.obs_dim,
                n_agents=env.spec.n_agents,
                action_space=ActionSpace("discrete", env.spec.n_actions),
                d_model=m["d_model"],
                n_heads=m["n_heads"],
                n_blocks=m["n_blocks"],
                kappa_scale=m["kappa_scale"],
                memory_mode=m["memory_mode"],
                chunk_agents=m["chunk_agents"],
            )
            return SableNet(cfg, seed=seed)
        if m["model"] == "mat-lite":
            cfg = AttentionConfig(
                obs_dim=env.spec.obs_dim,
                n_agents=env.spec.n_agents,
                n_actions=env.spec.n_actions,
                d_model=m["d_model"],
                n_heads=m["n_heads"],
                n_blocks=m["n_blocks"],
                norm=m["norm"],
                ff=m["ff"],
            )
            return AttentionNet(cfg, seed=seed)
        raise ConfigError(f"unknown model kind {m['model']!r}")

    def model_label(self) -> str:
        if self.model["model"] == "mat-lite":
            return f"mat-lite:{self.model['norm']}:{self.model['ff']}"
        return "sable"


def _coerce_value(raw: str, typ, where: str):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {typ.__name__}, got {raw!r}") from None


def load_config(path: str, seed_override: int | None = None) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{_line_of(path, section, key)}: unknown key {key!r} in [{section}]")

    if not parser.has_option("env", "name"):
        raise ConfigError(f"{path}: missing required key 'name' in [env]")
    env_name = parser["env"]["name"]
    make_env(env_name)  # validates the name early

    model = dict(MODEL_DEFAULTS)
    if parser.has_section("model"):
        for key, raw in parser["model"].items():
            model[key] = _coerce_value(raw, MODEL_KEYS[key], _line_of(path, "model", key))

    train_kwargs = {}
    if parser.has_section("train"):
        for key, raw in parser["train"].items():
            train_kwargs[key] = _coerce_value(raw, TRAIN_KEYS[key], _line_of(path, "train", key))
    if seed_override is not None:
        train_kwargs["seed"] = seed_override
    train = TrainConfig(**train_kwargs)

    bench = dict(BENCH_DEFAULTS)
    if parser.has_section("bench"):
        for key, raw in parser["bench"].items():
            bench[key] = _coerce_value(raw, BENCH_KEYS[key], _line_of(path, "bench", key))

    return RunConfig(env_name=env_name, model=model, train=train, bench=bench)


def write_resolved(cfg: RunConfig, path: str) -> None:
    """Snapshot every setting, defaults included."""
    out = configparser.ConfigParser()
    out["env"] = {"name": cfg.env_name}
    out["model"] = {k: str(v) for k, v in cfg.model.items()}
    out["train"] = {f.name: str(getattr(cfg.train, f.name)) for f in fields(TrainConfig)}
    out["bench"] = {k: str(v) for k, v in cfg.bench.items()}
    with open(path, "w") as f:
        out.write(f)
