"""On-policy training: rollouts, GAE, clipped-PPO updates.

Each update collects a fixed-length window from every environment slot
while carrying retention states across windows, snapshots those states
for the training pass, computes advantages once, then runs several
epochs of minibatched gradient steps over whole per-slot trajectories.
Agent order within timesteps is re-permuted per epoch (the first epoch
keeps the executed order, so importance ratios start at exactly one).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from sable import tensor as T
from sable.envs import make_env
from sable.net import NetState, SableNet, TrajectoryBatch
from sable.tensor import AllocationMeter, ContractError, Tensor

METRICS_HEADER = (
    "update,env_steps,mean_return,std_return,steps_per_sec,peak_bytes,"
    "loss_total,loss_ppo,loss_value,entropy"
)


class TrainingDiverged(RuntimeError):
    """The combined loss stopped being finite."""


@dataclass(frozen=True)
class TrainConfig:
    rollout_length: int = 128
    updates: int = 100
    epochs: int = 5
    minibatches: int = 2
    gamma: float = 0.99
    gae_lambda: float = 0.9
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    learning_rate: float = 1e-3
    normalize_advantage: bool = True
    n_envs: int = 8
    seed: int = 0
    time_chunk_steps: int = 0  # 0 means one chunk covering the whole rollout
    eval_every: int = 10
    eval_episodes: int = 32
    checkpoint_every: int = 0  # 0 means final checkpoint only

    def __post_init__(self):
        if self.n_envs % self.minibatches != 0:
            raise ContractError(
                f"minibatches={self.minibatches} must divide n_envs={self.n_envs}"
            )
        for name in ("rollout_length", "updates", "epochs", "minibatches", "n_envs"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("gamma", "gae_lambda", "clip_eps", "entropy_coef", "value_coef",
                     "max_grad_norm", "learning_rate"):
            if not np.isfinite(getattr(self, name)):
                raise ContractError(f"{name} must be finite")


@dataclass
class Rollout:
    obs: np.ndarray  # [B, L, N, obs_dim]
    actions: np.ndarray  # [B, L, N] or [B, L, N, dim]
    rewards: np.ndarray  # [B, L] shared scalar per step
    dones: np.ndarray  # [B, L]
    log_probs: np.ndarray  # [B, L, N]
    values: np.ndarray  # [B, L, N]
    t_idx: np.ndarray  # [B, L]
    boundary: NetState
    bootstrap_values: np.ndarray  # [B, N]
    advantages: np.ndarray | None = None
    targets: np.ndarray | None = None


# ---------------------------------------------------------------------------
# rollout collection


@dataclass
class SlotRunner:
    """One environment slot plus everything it carries across updates."""

    env: object
    rng: np.random.Generator
    obs: np.ndarray = field(default=None)
    episode_step: int = 0

    def reset(self):
        self.obs = self.env.reset(self.rng)
        self.episode_step = 0


def _step_slots(slots, values, pool):
    def one(args):
        slot, v = args
        return slot.env.step(v)

    if pool is None:
        return [one(a) for a in zip(slots, values)]
    return list(pool.map(one, zip(slots, values)))


def collect_rollout(
    net: SableNet,
    slots: list[SlotRunner],
    state: NetState,
    act_rng: np.random.Generator,
    cfg: TrainConfig,
    pool: ThreadPoolExecutor | None = None,
):
    """Gather one on-policy window, carrying states and episode clocks."""
    n_cfg = net.config
    B, L, N = len(slots), cfg.rollout_length, n_cfg.n_agents
    boundary = state.copy()

    obs = np.zeros((B, L, N, n_cfg.obs_dim))
    if n_cfg.action_space.kind == "discrete":
        actions = np.zeros((B, L, N), dtype=np.intp)
    else:
        actions = np.zeros((B, L, N, n_cfg.action_space.n))
    rewards = np.zeros((B, L))
    dones = np.zeros((B, L), dtype=bool)
    log_probs = np.zeros((B, L, N))
    values = np.zeros((B, L, N))
    t_idx = np.zeros((B, L), dtype=int)

    action_values = np.asarray(getattr(slots[0].env.spec, "action_values", ()))

    for t in range(L):
        cur_obs = np.stack([s.obs for s in slots])
        steps = np.array([s.episode_step for s in slots])
        res = net.act(cur_obs, steps, state, rng=act_rng)

        if n_cfg.action_space.kind == "discrete":
            env_actions = action_values[res.actions]
        else:
            env_actions = res.actions
        outcomes = _step_slots(slots, env_actions, pool)

        obs[:, t] = cur_obs
        actions[:, t] = res.actions
        log_probs[:, t] = res.log_probs
        values[:, t] = res.values
        t_idx[:, t] = steps
        done_t = np.array([d for (_, _, d) in outcomes])
        rewards[:, t] = [r for (_, r, _) in outcomes]
        dones[:, t] = done_t

        state = net.commit(res, done_t)
        for slot, (o, _, d) in zip(slots, outcomes):
            if d:
                slot.reset()
            else:
                slot.obs = o
                slot.episode_step += 1

    next_obs = np.stack([s.obs for s in slots])
    next_steps = np.array([s.episode_step for s in slots])
    bootstrap = net.peek_values(next_obs, next_steps, state)

    rollout = Rollout(
        obs=obs,
        actions=actions,
        rewards=rewards,
        dones=dones,
        log_probs=log_probs,
        values=values,
        t_idx=t_idx,
        boundary=boundary,
        bootstrap_values=bootstrap,
    )
    return rollout, state


# ---------------------------------------------------------------------------
# advantage estimation and losses


def compute_gae(rollout: Rollout, gamma: float, lam: float):
    """Standard done-masked GAE; targets are advantages plus values."""
    rewards, dones, values = rollout.rewards, rollout.dones, rollout.values
    B, L, N = values.shape
    adv = np.zeros((B, L, N))
    next_value = rollout.bootstrap_values
    carry = np.zeros((B, N))
    for t in reversed(range(L)):
        not_done = 1.0 - dones[:, t].astype(np.float64)
        delta = rewards[:, t, None] + gamma * next_value * not_done[:, None] - values[:, t]
        carry = delta + gamma * lam * not_done[:, None] * carry
        adv[:, t] = carry
        next_value = values[:, t]
    targets = adv + values
    rollout.advantages = adv
    rollout.targets = targets
    return adv, targets


def ppo_loss(logp_new: Tensor, logp_old: np.ndarray, advantages: np.ndarray, clip_eps: float) -> Tensor:
    """Negative mean clipped surrogate (minimization form)."""
    ratio = T.texp(T.sub(logp_new, Tensor(logp_old)))
    adv = Tensor(advantages)
    surr = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv))
    return T.mul(T.tmean(surr), T._coerce(-1.0))


def value_loss(values: Tensor, targets: np.ndarray, coef: float = 0.5) -> Tensor:
    diff = T.sub(values, Tensor(targets))
    return T.mul(T.tmean(T.mul(diff, diff)), T._coerce(coef))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        T.zero_grads(self.params)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# the update step


def _permute_agents(rollout: Rollout, perm: np.ndarray):
    """Apply one within-timestep agent permutation to every per-agent field."""
    return (
        rollout.obs[:, :, perm],
        rollout.actions[:, :, perm],
        rollout.log_probs[:, :, perm],
        rollout.advantages[:, :, perm],
        rollout.targets[:, :, perm],
    )


def update(net: SableNet, rollout: Rollout, cfg: TrainConfig, opt: Adam, rng: np.random.Generator):
    """K epochs of M minibatches over the rollout; returns averaged metrics."""
    if rollout.advantages is None:
        compute_gae(rollout, cfg.gamma, cfg.gae_lambda)
    B = rollout.obs.shape[0]
    n_agents = net.config.n_agents
    per_mb = B // cfg.minibatches
    chunk = cfg.time_chunk_steps or rollout.obs.shape[1]

    metrics = {"loss_total": 0.0, "loss_ppo": 0.0, "loss_value": 0.0, "entropy": 0.0}
    ratio_initial = None
    steps = 0

    for epoch in range(cfg.epochs):
        perm = np.arange(n_agents) if epoch == 0 else rng.permutation(n_agents)
        obs_p, act_p, logp_p, adv_p, tgt_p = _permute_agents(rollout, perm)
        slot_order = rng.permutation(B)
        for mb in range(cfg.minibatches):
            rows = slot_order[mb * per_mb : (mb + 1) * per_mb]
            batch = TrajectoryBatch(
                obs=obs_p[rows],
                actions=act_p[rows],
                t_idx=rollout.t_idx[rows],
                dones=rollout.dones[rows],
                boundary=rollout.boundary.select_rows(rows),
            )
            logp_new, entropy, values = net.evaluate_joint(batch, time_chunk_steps=chunk)

            adv = adv_p[rows]
            if cfg.normalize_advantage:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)

            if ratio_initial is None:
                ratio_initial = float(np.mean(np.exp(logp_new.data - logp_p[rows])))

            l_ppo = ppo_loss(logp_new, logp_p[rows], adv, cfg.clip_eps)
            l_value = value_loss(values, tgt_p[rows], cfg.value_coef)
            ent = T.tmean(entropy)
            loss = T.sub(T.add(l_ppo, l_value), T.mul(ent, T._coerce(cfg.entropy_coef)))

            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} minibatch {mb}: "
                    f"ppo={l_ppo.data} value={l_value.data} entropy={ent.data}"
                )

            opt.zero_grad()
            T.backward(loss)
            clip_grad_norm(opt.params, cfg.max_grad_norm)
            opt.step()

            metrics["loss_total"] += float(loss.data)
            metrics["loss_ppo"] += float(l_ppo.data)
            metrics["loss_value"] += float(l_value.data)
            metrics["entropy"] += float(ent.data)
            steps += 1

    for k in metrics:
        metrics[k] /= steps
    metrics["ratio_initial"] = ratio_initial
    return metrics


def training_loss(net, rollout: Rollout, cfg: TrainConfig) -> dict:
    """Full-batch combined loss without an optimizer step.

    Runs forward and backward (so measured memory reflects training),
    then clears gradients. The executed agent order is kept, so the
    result is comparable across time-chunk settings.
    """
    if rollout.advantages is None:
        compute_gae(rollout, cfg.gamma, cfg.gae_lambda)
    chunk = cfg.time_chunk_steps or rollout.obs.shape[1]
    batch = TrajectoryBatch(
        obs=rollout.obs,
        actions=rollout.actions,
        t_idx=rollout.t_idx,
        dones=rollout.dones,
        boundary=rollout.boundary,
    )
    logp_new, entropy, values = net.evaluate_joint(batch, time_chunk_steps=chunk)
    adv = rollout.advantages
    if cfg.normalize_advantage:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    l_ppo = ppo_loss(logp_new, rollout.log_probs, adv, cfg.clip_eps)
    l_value = value_loss(values, rollout.targets, cfg.value_coef)
    ent = T.tmean(entropy)
    loss = T.sub(T.add(l_ppo, l_value), T.mul(ent, T._coerce(cfg.entropy_coef)))
    T.backward(loss)
    T.zero_grads(net.parameters())
    return {
        "loss_total": float(loss.data),
        "loss_ppo": float(l_ppo.data),
        "loss_value": float(l_value.data),
        "entropy": float(ent.data),
    }


# ---------------------------------------------------------------------------
# evaluation


def evaluate_policy(net: SableNet, env_name: str, episodes: int, seed: int, greedy: bool = False):
    """Mean and std of episode return over freshly seeded episodes."""
    seeds = np.random.SeedSequence(seed).spawn(episodes + 1)
    act_rng = np.random.default_rng(seeds[-1])
    envs = [make_env(env_name) for _ in range(episodes)]
    spec = envs[0].spec
    action_values = np.asarray(spec.action_values)

    obs = np.stack([env.reset(np.random.default_rng(s)) for env, s in zip(envs, seeds[:-1])])
    state = net.zero_state(episodes)
    t_steps = np.zeros(episodes, dtype=int)
    active = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)

    for _ in range(spec.max_episode_steps):
        res = net.act(obs, t_steps, state, rng=act_rng, greedy=greedy)
        env_actions = action_values[res.actions] if net.config.action_space.kind == "discrete" else res.actions
        done_now = np.zeros(episodes, dtype=bool)
        for i, env in enumerate(envs):
            if not active[i]:
                done_now[i] = True
                continue
            o, r, d = env.step(env_actions[i])
            returns[i] += r
            obs[i] = o
            done_now[i] = d
            if d:
                active[i] = False
        state = net.commit(res, done_now)
        t_steps = np.where(done_now, 0, t_steps + 1)
        if not active.any():
            break
    return float(returns.mean()), float(returns.std())


# ---------------------------------------------------------------------------
# full training loop


def train(net: SableNet, env_name: str, cfg: TrainConfig, out_dir: str | None = None):
    """Run the full update loop; append metrics rows, return their list."""
    seq = np.random.SeedSequence(cfg.seed)
    slot_seeds = seq.spawn(cfg.n_envs + 3)
    act_rng = np.random.default_rng(slot_seeds[-1])
    update_rng = np.random.default_rng(slot_seeds[-2])
    eval_seed = int(np.random.default_rng(slot_seeds[-3]).integers(2**31))

    slots = [SlotRunner(env=make_env(env_name), rng=np.random.default_rng(s)) for s in slot_seeds[: cfg.n_envs]]
    for s in slots:
        s.reset()
    state = net.zero_state(cfg.n_envs)
    opt = Adam(net.parameters(), lr=cfg.learning_rate)

    max_workers = int(os.environ.get("SABLE_THREADS", "1") or "1")
    pool = ThreadPoolExecutor(max_workers=max_workers) if max_workers > 1 else None

    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    ckpt_dir = os.path.join(out_dir, "checkpoints") if out_dir else None
    if metrics_path:
        os.makedirs(out_dir, exist_ok=True)
        with open(metrics_path, "w") as f:
            f.write(METRICS_HEADER + "\n")
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)

    rows = []
    try:
        for upd in range(1, cfg.updates + 1):
            started = time.perf_counter()
            rollout, state = collect_rollout(net, slots, state, act_rng, cfg, pool)
            with AllocationMeter() as meter:
                stats = update(net, rollout, cfg, opt, update_rng)
            elapsed = time.perf_counter() - started

            if upd % cfg.eval_every == 0 or upd == cfg.updates:
                mean_ret, std_ret = evaluate_policy(net, env_name, cfg.eval_episodes, eval_seed)
                row = {
                    "update": upd,
                    "env_steps": upd * cfg.rollout_length * cfg.n_envs,
                    "mean_return": mean_ret,
                    "std_return": std_ret,
                    "steps_per_sec": cfg.rollout_length * cfg.n_envs / elapsed,
                    "peak_bytes": meter.peak_bytes,
                    "loss_total": stats["loss_total"],
                    "loss_ppo": stats["loss_ppo"],
                    "loss_value": stats["loss_value"],
                    "entropy": stats["entropy"],
                }
                rows.append(row)
                if metrics_path:
                    with open(metrics_path, "a") as f:
                        f.write(_format_row(row) + "\n")
            if ckpt_dir and cfg.checkpoint_every and upd % cfg.checkpoint_every == 0:
                net.save_checkpoint(os.path.join(ckpt_dir, f"update-{upd:06d}.ckpt"))
        if ckpt_dir:
            net.save_checkpoint(os.path.join(ckpt_dir, "final.ckpt"))
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


def _format_row(row: dict) -> str:
    return (
        f"{row['update']},{row['env_steps']},{row['mean_return']:.10g},{row['std_return']:.10g},"
        f"{row['steps_per_sec']:.6g},{row['peak_bytes']},{row['loss_total']:.10g},"
        f"{row['loss_ppo']:.10g},{row['loss_value']:.10g},{row['entropy']:.10g}"
    )
