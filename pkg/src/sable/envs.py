"""Cooperative shared-reward environments.

Two built-ins: a pattern-matching task where N agents must jointly
reproduce a periodic target pattern (with a time-decaying bonus for a
perfect match), and a two-agent coordination micro-task whose optimum is
computable by brute force, used to smoke-test training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sable.tensor import ContractError

HISTORY_LEN = 4
PERFECT_BONUS = 9.0

PATTERNS: dict[str, tuple[float, ...]] = {
    "simple-sine": (0.5, 0.7, 0.8, 0.7, 0.5, 0.3, 0.2, 0.3),
    "half-1-half-0": (1.0, 0.0),
    "quick-flip": (0.5, 0.0, -0.5, 0.0),
}

ACTION_SETS: dict[str, tuple[float, ...]] = {
    "simple-sine": (0.2, 0.3, 0.5, 0.7, 0.8),
    "half-1-half-0": (1.0, 0.0),
    "quick-flip": (0.5, 0.0, -0.5),
}


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    obs_dim: int
    n_actions: int
    action_values: tuple[float, ...]
    max_episode_steps: int

    def __post_init__(self):
        if min(self.n_agents, self.obs_dim, self.n_actions, self.max_episode_steps) < 1:
            raise ContractError("environment spec fields must be positive")


@dataclass
class NeomState:
    pattern_type: str
    target: np.ndarray  # per-agent target value
    current: np.ndarray  # per-agent last chosen value
    prev_actions: np.ndarray  # [N, HISTORY_LEN], most recent first
    step: int


class NeomEnv:
    """N agents match a periodic 1-D pattern tiled across the team.

    Observation per agent: a correct-position bit followed by the
    agent's last HISTORY_LEN action values. Reward is the normalized
    mean absolute distance to the target, mapped to [-1, 1], plus a
    bonus of up to PERFECT_BONUS for a full match that shrinks linearly
    with elapsed time. A perfect match ends the episode.
    """

    def __init__(self, pattern_type: str, n_agents: int, max_episode_steps: int = 32):
        if pattern_type not in PATTERNS:
            raise ContractError(f"unknown pattern type {pattern_type!r}")
        self.pattern = np.array(PATTERNS[pattern_type])
        self.actions = np.array(ACTION_SETS[pattern_type])
        self.spec = EnvSpec(
            n_agents=n_agents,
            obs_dim=1 + HISTORY_LEN,
            n_actions=len(self.actions),
            action_values=tuple(self.actions),
            max_episode_steps=max_episode_steps,
        )
        self.pattern_type = pattern_type
        self.max_distance = float(self.actions.max() - self.actions.min())
        self.state: NeomState | None = None

    def _target(self) -> np.ndarray:
        n = self.spec.n_agents
        return np.resize(self.pattern, n)

    def _observe(self) -> np.ndarray:
        s = self.state
        correct = (s.current == s.target).astype(np.float64)[:, None]
        return np.concatenate([correct, s.prev_actions], axis=1)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        n = self.spec.n_agents
        self.state = NeomState(
            pattern_type=self.pattern_type,
            target=self._target(),
            current=rng.choice(self.actions, size=n),
            prev_actions=np.zeros((n, HISTORY_LEN)),
            step=0,
        )
        return self._observe()

    def step(self, action_values: np.ndarray):
        s = self.state
        values = np.asarray(action_values, dtype=np.float64)
        if values.shape != (self.spec.n_agents,):
            raise ContractError(f"expected {self.spec.n_agents} actions, got shape {values.shape}")
        if not np.isin(values, self.actions).all():
            raise ContractError(f"action outside the pattern's value set: {values}")

        s.current = values
        s.prev_actions = np.concatenate([values[:, None], s.prev_actions[:, :-1]], axis=1)
        dist = np.abs(s.current - s.target).mean()
        reward = 1.0 - 2.0 * dist / self.max_distance
        perfect = bool((s.current == s.target).all())
        if perfect:
            reward += PERFECT_BONUS * (1.0 - s.step / self.spec.max_episode_steps)
        s.step += 1
        done = perfect or s.step >= self.spec.max_episode_steps
        return self._observe(), float(reward), done


class UnitEnv:
    """Two agents, two actions, reward 1 per step when both hit the target bit.

    Horizon 2, so the brute-force optimal return is 2.0 and a uniform
    random joint policy scores 0.5 in expectation.
    """

    TARGET_BIT = 1.0
    HORIZON = 2

    def __init__(self):
        self.spec = EnvSpec(
            n_agents=2,
            obs_dim=2,
            n_actions=2,
            action_values=(0.0, 1.0),
            max_episode_steps=self.HORIZON,
        )
        self.step_count = 0

    def _observe(self) -> np.ndarray:
        frac = self.step_count / self.HORIZON
        return np.tile([1.0, frac], (2, 1))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.step_count = 0
        return self._observe()

    def step(self, action_values: np.ndarray):
        values = np.asarray(action_values, dtype=np.float64)
        if values.shape != (2,):
            raise ContractError(f"expected 2 actions, got shape {values.shape}")
        reward = 1.0 if (values == self.TARGET_BIT).all() else 0.0
        self.step_count += 1
        return self._observe(), reward, self.step_count >= self.HORIZON


def brute_force_unit_optimum() -> float:
    """Enumerate all 16 deterministic joint action sequences of UnitEnv."""
    best = -np.inf
    for plan in range(16):
        bits = [(plan >> i) & 1 for i in range(4)]  # (a1, a2) per step
        env = UnitEnv()
        env.reset(np.random.default_rng(0))
        total = 0.0
        for t in range(2):
            _, r, _ = env.step(np.array(bits[2 * t : 2 * t + 2], dtype=float))
            total += r
        best = max(best, total)
    return best


def make_env(name: str):
    """Build an environment from its config name.

    Names: `neom:<pattern>:<agents>` or `unit`.
    """
    if name == "unit":
        return UnitEnv()
    parts = name.split(":")
    if len(parts) == 3 and parts[0] == "neom":
        pattern, n = parts[1], parts[2]
        if pattern not in PATTERNS:
            raise ContractError(f"unknown pattern {pattern!r} in env name {name!r}")
        try:
            n_agents = int(n)
        except ValueError:
            raise ContractError(f"bad agent count in env name {name!r}") from None
        return NeomEnv(pattern, n_agents)
    raise ContractError(f"unknown environment name {name!r}")
