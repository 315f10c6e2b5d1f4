import numpy as np
import pytest

from sable import tensor as T
from sable.attention import (
    AttentionConfig,
    AttentionNet,
    ablation_variants,
    masked_attention,
    variant_name,
)
from sable.envs import make_env
from sable.net import TrajectoryBatch
from sable.tensor import ContractError, DimensionError, Tensor
from sable.trainer import Adam, SlotRunner, TrainConfig, collect_rollout, evaluate_policy, update


def _cfg(**kw):
    base = dict(obs_dim=2, n_agents=2, n_actions=2, d_model=8, n_heads=2, n_blocks=2)
    base.update(kw)
    return AttentionConfig(**base)


def test_masked_attention_single_token_returns_value_row():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=(1, 1, 4))) for _ in range(3))
    out = masked_attention(q, k, v, np.ones((1, 1), dtype=bool))
    np.testing.assert_allclose(out.data, v.data, atol=1e-12)


def test_masked_attention_uniform_scores_average_visible_rows():
    v = Tensor(np.arange(12.0).reshape(1, 4, 3))
    q = Tensor(np.zeros((1, 4, 5)))
    k = Tensor(np.zeros((1, 4, 5)))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = masked_attention(q, k, v, mask)
    for s in range(4):
        np.testing.assert_allclose(out.data[0, s], v.data[0, : s + 1].mean(axis=0), atol=1e-12)


def test_masked_attention_causal_perturbation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 4))
    mask = np.tril(np.ones((5, 5), dtype=bool))
    base = masked_attention(Tensor(x), Tensor(x), Tensor(x), mask).data
    x2 = x.copy()
    x2[0, 3:] += 1.0
    pert = masked_attention(Tensor(x2), Tensor(x2), Tensor(x2), mask).data
    np.testing.assert_allclose(pert[0, :3], base[0, :3], atol=1e-12)


def test_masked_attention_shape_checks():
    q = Tensor(np.zeros((1, 2, 3)))
    with pytest.raises(DimensionError):
        masked_attention(q, Tensor(np.zeros((1, 2, 4))), q, np.ones((2, 2), dtype=bool))
    with pytest.raises(DimensionError):
        masked_attention(q, q, q, np.ones((3, 3), dtype=bool))


def test_ablation_variants_enumerate_exactly_four():
    variants = ablation_variants(_cfg())
    combos = {(v.norm, v.ff) for v in variants}
    assert combos == {("layer", "plain"), ("rms", "plain"), ("layer", "swiglu"), ("rms", "swiglu")}
    names = {variant_name(v) for v in variants}
    assert len(names) == 4


def test_execution_matches_training_evaluation():
    net = AttentionNet(_cfg(), seed=0)
    cfg = TrainConfig(rollout_length=6, updates=1, epochs=1, minibatches=1, n_envs=2, seed=0)
    seq = np.random.SeedSequence(5).spawn(3)
    slots = [SlotRunner(env=make_env("unit"), rng=np.random.default_rng(s)) for s in seq[:2]]
    for s in slots:
        s.reset()
    rollout, _ = collect_rollout(net, slots, net.zero_state(2), np.random.default_rng(seq[2]), cfg)
    lp, ent, vals = net.evaluate_joint(
        TrajectoryBatch(rollout.obs, rollout.actions, rollout.t_idx, rollout.dones, rollout.boundary)
    )
    assert np.abs(lp.data - rollout.log_probs).max() < 1e-8
    assert np.abs(vals.data - rollout.values).max() < 1e-8
    assert np.isfinite(ent.data).all()


def test_update_ratio_one_for_attention_baseline():
    net = AttentionNet(_cfg(norm="layer", ff="plain"), seed=1)
    cfg = TrainConfig(rollout_length=4, updates=1, epochs=1, minibatches=1, n_envs=2, seed=1)
    seq = np.random.SeedSequence(9).spawn(3)
    slots = [SlotRunner(env=make_env("unit"), rng=np.random.default_rng(s)) for s in seq[:2]]
    for s in slots:
        s.reset()
    rollout, _ = collect_rollout(net, slots, net.zero_state(2), np.random.default_rng(seq[2]), cfg)
    stats = update(net, rollout, cfg, Adam(net.parameters(), 1e-3), np.random.default_rng(0))
    assert abs(stats["ratio_initial"] - 1.0) < 1e-8


def test_trajectory_context_cache_grows_and_resets():
    net = AttentionNet(_cfg(context="trajectory"), seed=2)
    rng = np.random.default_rng(3)
    state = net.zero_state(1)
    sizes = []
    for t in range(4):
        obs = rng.normal(size=(1, 2, 2))
        res = net.act(obs, np.array([t]), state, rng=rng)
        state = net.commit(res, np.array([False]))
        sizes.append(state.size_bytes())
    assert sizes == sorted(sizes) and sizes[0] > 0
    per_step = np.diff(sizes)
    assert (per_step == per_step[0]).all()  # linear growth in stored tokens

    res = net.act(rng.normal(size=(1, 2, 2)), np.array([4]), state, rng=rng)
    state = net.commit(res, np.array([True]))
    assert state.size_bytes() == 0

    with pytest.raises(ContractError):
        net2 = AttentionNet(_cfg(context="trajectory"), seed=2)
        r = net2.act(rng.normal(size=(2, 2, 2)), np.zeros(2, dtype=int), net2.zero_state(2), rng=rng)
        net2.commit(r, np.array([True, False]))


def test_trajectory_context_refuses_training():
    net = AttentionNet(_cfg(context="trajectory"), seed=4)
    with pytest.raises(ContractError):
        net.evaluate_joint(
            TrajectoryBatch(
                obs=np.zeros((1, 2, 2, 2)),
                actions=np.zeros((1, 2, 2), dtype=np.intp),
                t_idx=np.zeros((1, 2), dtype=int),
                dones=np.zeros((1, 2), dtype=bool),
                boundary=net.zero_state(1),
            )
        )


def train_until(net, env_name, cfg, target, max_updates, eval_seed=0, eval_episodes=4):
    """Collect/update until greedy eval reaches `target`; returns best mean."""
    seq = np.random.SeedSequence(cfg.seed).spawn(cfg.n_envs + 2)
    slots = [SlotRunner(env=make_env(env_name), rng=np.random.default_rng(s)) for s in seq[: cfg.n_envs]]
    for s in slots:
        s.reset()
    state = net.zero_state(cfg.n_envs)
    act_rng = np.random.default_rng(seq[-1])
    update_rng = np.random.default_rng(seq[-2])
    opt = Adam(net.parameters(), lr=cfg.learning_rate)
    best = -np.inf
    for _ in range(max_updates):
        rollout, state = collect_rollout(net, slots, state, act_rng, cfg)
        update(net, rollout, cfg, opt, update_rng)
        mean, _ = evaluate_policy(net, env_name, episodes=eval_episodes, seed=eval_seed, greedy=True)
        best = max(best, mean)
        if best >= target:
            break
    return best


@pytest.mark.parametrize("norm,ff", [("layer", "plain"), ("rms", "swiglu")])
def test_variants_learn_unit_env(norm, ff):
    net = AttentionNet(_cfg(norm=norm, ff=ff, d_model=8, n_blocks=1), seed=7)
    cfg = TrainConfig(
        rollout_length=32, updates=1, epochs=4, minibatches=1, n_envs=4,
        learning_rate=3e-3, entropy_coef=0.01, seed=7,
    )
    assert train_until(net, "unit", cfg, target=2.0, max_updates=30) >= 2.0
