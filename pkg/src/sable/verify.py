"""Built-in verification suites runnable from the CLI.

Each suite re-derives expected values from an independent oracle (hand
arithmetic, brute force, finite differences, or a second computation
path) and checks the implementation against it. A fresh checkout must
pass every suite.
"""

from __future__ import annotations

import numpy as np

import sable.decay as decay
from sable import tensor as T
from sable.decay import DecaySpec, artifacts_for_chunk
from sable.envs import make_env
from sable.net import ActionSpace, SableConfig, SableNet, TrajectoryBatch
from sable.retention import init_encoder_block, retention_chunkwise, retention_parallel
from sable.tensor import Tensor
from sable.trainer import (
    Adam,
    Rollout,
    SlotRunner,
    TrainConfig,
    collect_rollout,
    compute_gae,
    update,
)


def _suite_appendix_d33_matrices() -> bool:
    """The printed 3-agent, 4-step worked example, exactly."""
    k = 0.5
    spec = DecaySpec(3, 4, k, terminations=(False, True, False, False))
    dec = decay.build_decoder_decay(spec).data
    enc = decay.build_encoder_decay(spec).data
    xi = decay.build_xi(spec, 12).data[:, 0]
    zeta = decay.build_zeta(spec, 12).data[:, 0]

    expected_dec = np.zeros((12, 12))
    expected_enc = np.zeros((12, 12))
    for i in range(12):
        for j in range(12):
            si, sj = i // 3, j // 3
            same_segment = (si <= 1) == (sj <= 1)
            if not same_segment or sj > si:
                continue
            power = si - sj
            expected_enc[i, j] = k**power
            if j <= i:
                expected_dec[i, j] = k**power
    ok = np.array_equal(dec, expected_dec) and np.array_equal(enc, expected_enc)
    ok &= np.array_equal(xi, [k, k, k, k**2, k**2, k**2, 0, 0, 0, 0, 0, 0])
    ok &= np.array_equal(zeta, [0, 0, 0, 0, 0, 0, k, k, k, 1, 1, 1])
    ok &= decay.chunk_carry_factor(DecaySpec(3, 4, 0.9), 4) == 0.9**4
    ok &= decay.chunk_carry_factor(spec, 4) == 0.0
    return bool(ok)


def _suite_three_form_equivalence(cases: int = 40) -> bool:
    rng = np.random.default_rng(0)
    for _ in range(cases):
        n = int(rng.integers(1, 5))
        steps = int(rng.integers(1, 13))
        d = int(rng.integers(2, 17))
        kappa = float(rng.choice([0.3, 0.5, 0.8, 1.0]))
        terms = tuple(bool(rng.random() < 0.2) for _ in range(steps))
        spec = DecaySpec(n, steps, kappa, terms)
        S = spec.n_tokens
        q, k, v = (Tensor(rng.normal(size=(S, d))) for _ in range(3))

        art = artifacts_for_chunk(spec)
        ref = retention_parallel(q, k, v, art.d_decoder).data

        # recurrent accumulation, one timestep at a time
        state = np.zeros((d, d))
        rec = np.zeros((S, d))
        for t in range(steps):
            rows = slice(t * n, (t + 1) * n)
            inner = kappa * state
            for i in range(t * n, (t + 1) * n):
                inner = inner + k.data[i : i + 1].T @ v.data[i : i + 1]
                rec[i] = q.data[i] @ inner
            state = 0.0 if terms[t] else inner
        if np.abs(rec - ref).max() >= 1e-9:
            return False

        # chunkwise over a random timestep split
        sizes, left = [], steps
        while left:
            s = int(rng.integers(1, left + 1))
            sizes.append(s)
            left -= s
        h = Tensor(np.zeros((d, d)))
        outs, start = [], 0
        for size in sizes:
            sub = DecaySpec(n, size, kappa, terms[start : start + size])
            sub_art = artifacts_for_chunk(sub)
            sl = slice(start * n, (start + size) * n)
            out, h = retention_chunkwise(
                q[sl], k[sl], v[sl], sub_art.d_decoder, sub_art.xi, sub_art.zeta,
                sub_art.chunk_carry_power, h,
            )
            outs.append(out.data)
            start += size
        if np.abs(np.concatenate(outs) - ref).max() >= 1e-9:
            return False
    return True


def _suite_gradient_checks() -> bool:
    rng = np.random.default_rng(1)
    spec = DecaySpec(2, 2, 0.8, terminations=(False, True))
    block = init_encoder_block(rng, 6, 2, kappa_scale=0.5)
    x = rng.normal(size=(1, 4, 6))
    weight = rng.normal(size=(1, 4, 6))

    def forward():
        out, _ = block.chunkwise(Tensor(x), block.msr.zero_state(1), [spec])
        return T.tsum(T.mul(out, Tensor(weight, _track=False)))

    params = list(block.named_params("enc"))
    for _, p in params:
        p.grad = None
    loss = forward()
    T.backward(loss)
    h = 1e-5
    for name, p in params:
        analytic = p.grad_array()
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with T.no_grad():
                up = forward().item()
            flat[i] = orig - h
            with T.no_grad():
                down = forward().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        if np.abs(analytic.reshape(-1) - numeric).max() / scale >= 1e-4:
            return False
    return True


def _suite_gae_oracle() -> bool:
    rng = np.random.default_rng(2)
    for _ in range(30):
        B, L, N = 2, int(rng.integers(1, 17)), 2
        rewards = rng.normal(size=(B, L))
        values = rng.normal(size=(B, L, N))
        dones = rng.random((B, L)) < 0.25
        bootstrap = rng.normal(size=(B, N))
        rollout = Rollout(
            obs=np.zeros((B, L, N, 1)),
            actions=np.zeros((B, L, N), dtype=np.intp),
            rewards=rewards,
            dones=dones,
            log_probs=np.zeros((B, L, N)),
            values=values,
            t_idx=np.zeros((B, L), dtype=int),
            boundary=None,
            bootstrap_values=bootstrap,
        )
        adv, _ = compute_gae(rollout, 0.99, 0.9)
        next_v = np.concatenate([values[:, 1:], bootstrap[:, None]], axis=1)
        delta = rewards[..., None] + 0.99 * next_v * (1 - dones[..., None]) - values
        for b in range(B):
            for t in range(L):
                acc, w = 0.0, 1.0
                for kk in range(t, L):
                    acc = acc + w * delta[b, kk]
                    if dones[b, kk]:
                        break
                    w *= 0.99 * 0.9
                if np.abs(adv[b, t] - acc).max() > 1e-12:
                    return False
    return True


def _unit_net(seed=0):
    env = make_env("unit")
    cfg = SableConfig(
        obs_dim=env.spec.obs_dim,
        n_agents=env.spec.n_agents,
        action_space=ActionSpace("discrete", env.spec.n_actions),
        d_model=8,
        n_heads=2,
        n_blocks=1,
    )
    return SableNet(cfg, seed=seed)


def _suite_dual_path_ratio_one() -> bool:
    net = _unit_net(seed=3)
    cfg = TrainConfig(rollout_length=6, updates=1, epochs=1, minibatches=1, n_envs=2, seed=3)
    seq = np.random.SeedSequence(3).spawn(3)
    slots = [SlotRunner(env=make_env("unit"), rng=np.random.default_rng(s)) for s in seq[:2]]
    for s in slots:
        s.reset()
    rollout, _ = collect_rollout(net, slots, net.zero_state(2), np.random.default_rng(seq[2]), cfg)
    stats = update(net, rollout, cfg, Adam(net.parameters(), 1e-3), np.random.default_rng(0))
    return abs(stats["ratio_initial"] - 1.0) < 1e-8


def _suite_reset_soundness() -> bool:
    rng = np.random.default_rng(4)
    env = make_env("unit")
    cfg = SableConfig(
        obs_dim=env.spec.obs_dim,
        n_agents=2,
        action_space=ActionSpace("discrete", 2),
        d_model=8,
        n_heads=2,
        n_blocks=1,
    )
    net = SableNet(cfg, seed=5)
    L = 6
    obs = rng.normal(size=(1, L, 2, env.spec.obs_dim))
    actions = rng.integers(0, 2, size=(1, L, 2))
    t_idx = np.tile(np.arange(L), (1, 1))
    dones = np.zeros((1, L), dtype=bool)
    dones[0, 2] = True
    base = TrajectoryBatch(obs, actions, t_idx, dones, net.zero_state(1))
    lp, _, _ = net.evaluate_joint(base)
    pert_obs = obs.copy()
    pert_obs[:, :3] += rng.normal(size=pert_obs[:, :3].shape)
    pert = TrajectoryBatch(pert_obs, actions, t_idx, dones, net.zero_state(1))
    lp2, _, _ = net.evaluate_joint(pert)
    return np.abs(lp2.data[:, 3:] - lp.data[:, 3:]).max() < 1e-12


SUITES = {
    "appendix-d33-matrices": _suite_appendix_d33_matrices,
    "three-form-equivalence": _suite_three_form_equivalence,
    "gradient-checks": _suite_gradient_checks,
    "gae-oracle": _suite_gae_oracle,
    "dual-path-ratio-one": _suite_dual_path_ratio_one,
    "reset-soundness": _suite_reset_soundness,
}


def run_suites(names=None) -> dict[str, bool]:
    results = {}
    for name in names or SUITES:
        fn = SUITES[name]
        try:
            results[name] = bool(fn())
        except Exception:
            results[name] = False
    return results
