"""Scaling and memory benchmarks: retention vs attention, chunk tradeoffs.

Throughput numbers are wall-clock and machine-dependent; the deliverable
is the relative behavior across rows (memory growth with agent count,
memory reduction with smaller training chunks, loss invariance).
Environment stepping is excluded: models run on synthetic observations.
"""

from __future__ import annotations

import time

import numpy as np

from sable.attention import AttentionConfig, AttentionNet
from sable.net import ActionSpace, SableConfig, SableNet
from sable.tensor import AllocationMeter, ContractError
from sable.trainer import Rollout, SlotRunner, TrainConfig, collect_rollout, training_loss

AGENTS_HEADER = "model,agents_or_chunk,steps_per_sec,peak_bytes"
CHUNKS_HEADER = "model,agents_or_chunk,steps_per_sec,peak_bytes,loss"

DEFAULT_AGENT_COUNTS = (8, 16, 32, 64, 128, 256)
DEFAULT_CHUNK_STEPS = (8, 16, 32, 64, 128)
FIXED_AGENT_CHUNK = 32  # agent-axis chunk used by the retention model


def _retention_model(n_agents: int, obs_dim: int, d_model: int, n_heads: int, seed: int) -> SableNet:
    chunk = FIXED_AGENT_CHUNK if n_agents % FIXED_AGENT_CHUNK == 0 else n_agents
    cfg = SableConfig(
        obs_dim=obs_dim,
        n_agents=n_agents,
        action_space=ActionSpace("discrete", 5),
        d_model=d_model,
        n_heads=n_heads,
        n_blocks=1,
        memory_mode="agent-chunked",
        chunk_agents=min(chunk, n_agents),
    )
    return SableNet(cfg, seed=seed)


def _attention_model(n_agents: int, obs_dim: int, d_model: int, n_heads: int, seed: int) -> AttentionNet:
    cfg = AttentionConfig(
        obs_dim=obs_dim,
        n_agents=n_agents,
        n_actions=5,
        d_model=d_model,
        n_heads=n_heads,
        n_blocks=1,
        context="timestep",
    )
    return AttentionNet(cfg, seed=seed)


def bench_agents(
    agent_counts=DEFAULT_AGENT_COUNTS,
    d_model: int = 32,
    n_heads: int = 2,
    steps: int = 5,
    obs_dim: int = 8,
    seed: int = 0,
    models=("retention", "attention"),
):
    """Peak model memory and throughput of one joint act step, per agent count."""
    rows = []
    for model in models:
        for n in agent_counts:
            if model == "retention":
                net = _retention_model(n, obs_dim, d_model, n_heads, seed)
            elif model == "attention":
                net = _attention_model(n, obs_dim, d_model, n_heads, seed)
            else:
                raise ContractError(f"unknown model kind {model!r}")
            rng = np.random.default_rng(seed)
            obs = rng.normal(size=(1, n, obs_dim))
            try:
                state = net.zero_state(1)
                started = time.perf_counter()
                with AllocationMeter() as meter:
                    for t in range(steps):
                        res = net.act(obs, np.array([t]), state, greedy=True)
                        state = net.commit(res, np.array([False]))
                elapsed = time.perf_counter() - started
                rows.append(
                    {
                        "model": model,
                        "agents_or_chunk": n,
                        "steps_per_sec": steps / elapsed,
                        "peak_bytes": meter.peak_bytes,
                    }
                )
            except MemoryError:
                rows.append(
                    {
                        "model": model,
                        "agents_or_chunk": n,
                        "steps_per_sec": float("nan"),
                        "peak_bytes": float("nan"),
                    }
                )
    return rows


def fixed_rollout(env_name: str, net: SableNet, cfg: TrainConfig) -> Rollout:
    """One deterministic rollout used by every chunk-sweep row."""
    from sable.envs import make_env

    seq = np.random.SeedSequence(cfg.seed).spawn(cfg.n_envs + 1)
    slots = [SlotRunner(env=make_env(env_name), rng=np.random.default_rng(s)) for s in seq[:-1]]
    for s in slots:
        s.reset()
    rollout, _ = collect_rollout(net, slots, net.zero_state(cfg.n_envs), np.random.default_rng(seq[-1]), cfg)
    return rollout


def bench_chunks(
    chunk_steps=DEFAULT_CHUNK_STEPS,
    env_name: str = "neom:half-1-half-0:4",
    rollout_length: int = 128,
    d_model: int = 16,
    n_heads: int = 2,
    seed: int = 0,
):
    """Training loss and peak memory of one full-batch pass per chunk size."""
    for c in chunk_steps:
        if rollout_length % c != 0:
            raise ContractError(f"chunk of {c} steps does not divide rollout of {rollout_length}")
    from sable.envs import make_env

    env = make_env(env_name)
    cfg = SableConfig(
        obs_dim=env.spec.obs_dim,
        n_agents=env.spec.n_agents,
        action_space=ActionSpace("discrete", env.spec.n_actions),
        d_model=d_model,
        n_heads=n_heads,
        n_blocks=1,
    )
    net = SableNet(cfg, seed=seed)
    tcfg = TrainConfig(rollout_length=rollout_length, updates=1, epochs=1, minibatches=1,
                       n_envs=2, seed=seed)
    rollout = fixed_rollout(env_name, net, tcfg)

    rows = []
    for c in chunk_steps:
        run_cfg = TrainConfig(rollout_length=rollout_length, updates=1, epochs=1, minibatches=1,
                              n_envs=2, seed=seed, time_chunk_steps=c)
        started = time.perf_counter()
        with AllocationMeter() as meter:
            stats = training_loss(net, rollout, run_cfg)
        elapsed = time.perf_counter() - started
        rows.append(
            {
                "model": "retention",
                "agents_or_chunk": c,
                "steps_per_sec": rollout_length / elapsed,
                "peak_bytes": meter.peak_bytes,
                "loss": stats["loss_total"],
            }
        )
    return rows


def write_agents_csv(rows, path: str) -> None:
    with open(path, "w") as f:
        f.write(AGENTS_HEADER + "\n")
        for r in rows:
            f.write(f"{r['model']},{r['agents_or_chunk']},{r['steps_per_sec']:.6g},{r['peak_bytes']}\n")


def write_chunks_csv(rows, path: str) -> None:
    with open(path, "w") as f:
        f.write(CHUNKS_HEADER + "\n")
        for r in rows:
            f.write(
                f"{r['model']},{r['agents_or_chunk']},{r['steps_per_sec']:.6g},"
                f"{r['peak_bytes']},{r['loss']:.12g}\n"
            )


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
