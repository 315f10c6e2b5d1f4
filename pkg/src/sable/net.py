"""The full encoder-decoder model over flattened agent-timestep tokens.

The encoder turns each timestep's joint observation into per-agent
encodings and value estimates while carrying a compact hidden state
across timesteps. The decoder emits one action distribution per agent,
conditioning on the agents decoded so far (self-retention over action
tokens) and on the encoded observations (cross-retention). Execution
advances one timestep at a time; training replays whole trajectories
chunkwise, and the two paths agree to float64 rounding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from sable import tensor as T
from sable.decay import DecaySpec
from sable.retention import (
    DecoderBlock,
    EncoderBlock,
    RetentionState,
    init_decoder_block,
    init_encoder_block,
    init_projection,
)
from sable.tensor import ContractError, DimensionError, Tensor

MEMORY_MODES = ("full-trajectory", "no-memory", "agent-chunked")


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or does not match the model."""


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    n: int  # number of discrete actions, or continuous dimensionality

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise ContractError(f"unknown action space kind {self.kind!r}")
        if self.n < 1:
            raise ContractError("action space needs at least one dimension")


@dataclass(frozen=True)
class SableConfig:
    obs_dim: int
    n_agents: int
    action_space: ActionSpace
    d_model: int = 32
    n_heads: int = 2
    n_blocks: int = 1
    kappa_scale: float = 1.0
    memory_mode: str = "full-trajectory"
    chunk_agents: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"{self.n_heads} heads do not divide d_model={self.d_model}")
        if self.memory_mode not in MEMORY_MODES:
            raise ContractError(f"unknown memory mode {self.memory_mode!r}")
        if self.memory_mode == "agent-chunked":
            if self.chunk_agents < 1 or self.n_agents % self.chunk_agents != 0:
                raise ContractError(
                    f"chunk_agents={self.chunk_agents} must divide n_agents={self.n_agents}"
                )


# ---------------------------------------------------------------------------
# positional encoding


def positional_encode(timestep: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of the timestep index, shared by a step's agents."""
    if timestep < 0:
        raise ContractError("timestep must be non-negative")
    return positional_encoding_for(np.array([timestep]), d_model)[0]


def positional_encoding_for(t_idx: np.ndarray, d_model: int) -> np.ndarray:
    t_idx = np.asarray(t_idx, dtype=np.float64)
    half = (d_model + 1) // 2
    freq = np.exp(-np.log(10000.0) * (2.0 * np.arange(half) / d_model))
    ang = t_idx[..., None] * freq
    pe = np.zeros(t_idx.shape + (2 * half,))
    pe[..., 0::2] = np.sin(ang)
    pe[..., 1::2] = np.cos(ang)
    return pe[..., :d_model]


# ---------------------------------------------------------------------------
# states


@dataclass
class NetState:
    """All hidden matrices carried across timesteps, one entry per block."""

    enc: list[RetentionState]
    dec_self: list[RetentionState]
    dec_cross: list[RetentionState]

    def copy(self) -> "NetState":
        return NetState(
            enc=[s.copy() for s in self.enc],
            dec_self=[s.copy() for s in self.dec_self],
            dec_cross=[s.copy() for s in self.dec_cross],
        )

    def select_rows(self, rows: np.ndarray) -> "NetState":
        def pick(rs: RetentionState) -> RetentionState:
            out = rs.copy()
            out.h = [Tensor(h.data[rows]) for h in rs.h]
            return out

        return NetState(
            enc=[pick(s) for s in self.enc],
            dec_self=[pick(s) for s in self.dec_self],
            dec_cross=[pick(s) for s in self.dec_cross],
        )

    def size_bytes(self) -> int:
        return sum(s.size_bytes() for s in self.enc + self.dec_self + self.dec_cross)


@dataclass
class ActResult:
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    _enc_steps: list = field(repr=False, default_factory=list)
    _dec_ctxs: list = field(repr=False, default_factory=list)


@dataclass
class TrajectoryBatch:
    """One minibatch of full per-slot trajectories, teacher-forcing ready."""

    obs: np.ndarray  # [B, L, N, obs_dim]
    actions: np.ndarray  # [B, L, N] ints or [B, L, N, dim] floats
    t_idx: np.ndarray  # [B, L] within-episode timestep indices
    dones: np.ndarray  # [B, L] bools
    boundary: NetState  # hidden states at the first step of the window


# ---------------------------------------------------------------------------
# model


class SableNet:
    def __init__(self, config: SableConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        act = config.action_space

        self.obs_w = init_projection(rng, config.obs_dim, d)
        self.obs_b = T.parameter(np.zeros(d))
        self.sos = T.parameter(rng.normal(0.0, 0.02, size=(d,)))
        if act.kind == "discrete":
            self.act_table = T.parameter(rng.normal(0.0, 0.02, size=(act.n, d)))
        else:
            self.act_w = init_projection(rng, act.n, d)
            self.act_b = T.parameter(np.zeros(d))
            self.log_std = T.parameter(np.zeros(act.n))

        self.enc_blocks = [
            init_encoder_block(rng, d, config.n_heads, config.kappa_scale)
            for _ in range(config.n_blocks)
        ]
        self.dec_blocks = [
            init_decoder_block(rng, d, config.n_heads, config.kappa_scale)
            for _ in range(config.n_blocks)
        ]
        self.value_w = init_projection(rng, d, 1)
        self.value_b = T.parameter(np.zeros(1))
        head_out = act.n
        self.head_w = T.parameter(rng.normal(0.0, 0.01 * d**-0.5, size=(d, head_out)))
        self.head_b = T.parameter(np.zeros(head_out))

    # -- parameters ----------------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [
            ("obs_w", self.obs_w),
            ("obs_b", self.obs_b),
            ("sos", self.sos),
        ]
        if self.config.action_space.kind == "discrete":
            out.append(("act_table", self.act_table))
        else:
            out += [("act_w", self.act_w), ("act_b", self.act_b), ("log_std", self.log_std)]
        for i, b in enumerate(self.enc_blocks):
            out += list(b.named_params(f"enc{i}"))
        for i, b in enumerate(self.dec_blocks):
            out += list(b.named_params(f"dec{i}"))
        out += [
            ("value_w", self.value_w),
            ("value_b", self.value_b),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]
        names = [n for n, _ in out]
        assert len(names) == len(set(names)), "parameter names must be unique"
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    # -- states ----------------------------------------------------------------

    def zero_state(self, batch: int) -> NetState:
        return NetState(
            enc=[b.msr.zero_state(batch) for b in self.enc_blocks],
            dec_self=[b.self_msr.zero_state(batch) for b in self.dec_blocks],
            dec_cross=[b.cross_msr.zero_state(batch) for b in self.dec_blocks],
        )

    # -- embeddings --------------------------------------------------------------

    def _embed_obs(self, obs: np.ndarray, t_idx: np.ndarray) -> Tensor:
        """[..., N, obs_dim] observations to tokens, with shared step encoding."""
        x = T.gelu(T.add(T.matmul(Tensor(obs), self.obs_w), self.obs_b))
        pe = positional_encoding_for(t_idx, self.config.d_model)
        return T.add(x, Tensor(np.expand_dims(pe, -2)))

    def _embed_action_value(self, actions: np.ndarray) -> Tensor:
        if self.config.action_space.kind == "discrete":
            return T.embedding(self.act_table, actions.astype(np.intp))
        return T.add(T.matmul(Tensor(actions), self.act_w), self.act_b)

    def _teacher_forced_tokens(self, actions: np.ndarray, t_idx: np.ndarray) -> Tensor:
        """Shifted action tokens: agent 0 gets the start token each step."""
        n = self.config.n_agents
        shifted = np.roll(actions, 1, axis=-1) if actions.ndim == 3 else np.roll(actions, 1, axis=-2)
        emb = self._embed_action_value(shifted)
        first = np.zeros(emb.shape[:-1] + (1,), dtype=bool)
        first[..., 0, :] = True
        tok = T.where(first, T.reshape(self.sos, (1,) * (emb.ndim - 1) + (-1,)), emb)
        pe = positional_encoding_for(t_idx, self.config.d_model)
        return T.add(tok, Tensor(np.expand_dims(pe, -2)))

    # -- heads ---------------------------------------------------------------------

    def _values(self, encoded: Tensor) -> Tensor:
        return T.add(T.matmul(encoded, self.value_w), self.value_b)[..., 0]

    def _head(self, decoded: Tensor) -> Tensor:
        return T.add(T.matmul(decoded, self.head_w), self.head_b)

    def _discrete_logp_entropy(self, logits: Tensor, actions: np.ndarray):
        logp_all = T.log_softmax(logits, axis=-1)
        logp = T.gather_last(logp_all, actions.astype(np.intp))
        entropy = T.mul(T.tsum(T.mul(T.texp(logp_all), logp_all), axis=-1), T._coerce(-1.0))
        return logp, entropy

    def _gaussian_logp_entropy(self, mean: Tensor, actions: np.ndarray):
        dim = self.config.action_space.n
        std = T.texp(self.log_std)
        z = T.div(T.sub(Tensor(actions), mean), std)
        logp = T.sub(
            T.mul(T.tsum(T.mul(z, z), axis=-1), T._coerce(-0.5)),
            T._coerce(0.5 * dim * np.log(2.0 * np.pi)),
        )
        logp = T.sub(logp, T.tsum(self.log_std))
        ent = T.add(T.tsum(self.log_std), T._coerce(0.5 * dim * (1.0 + np.log(2.0 * np.pi))))
        entropy = T.add(T.mul(logp, T._coerce(0.0)), ent)  # broadcast to token shape
        return logp, entropy

    # -- execution -------------------------------------------------------------------

    def act(
        self,
        obs: np.ndarray,
        t_idx: np.ndarray,
        state: NetState,
        rng: np.random.Generator | None = None,
        greedy: bool = False,
    ) -> ActResult:
        """Encode one joint observation and decode each agent's action.

        The returned result holds open step accumulators; call
        :meth:`commit` with the env's done flags to obtain the state
        carried to the next timestep.
        """
        cfg = self.config
        batch, n = obs.shape[0], cfg.n_agents
        if obs.shape[1] != n or obs.shape[2] != cfg.obs_dim:
            raise DimensionError(f"expected observations [B, {n}, {cfg.obs_dim}], got {obs.shape}")
        chunk = cfg.chunk_agents if cfg.memory_mode == "agent-chunked" else None
        with T.no_grad():
            x = self._embed_obs(obs, t_idx)
            enc_steps = []
            for block, bstate in zip(self.enc_blocks, state.enc):
                x, step = block.open_step(x, bstate, chunk_agents=chunk)
                enc_steps.append(step)
            encoded = x
            values = self._values(encoded).data

            dec_ctxs = [
                block.begin_step(s_self, s_cross)
                for block, s_self, s_cross in zip(self.dec_blocks, state.dec_self, state.dec_cross)
            ]
            pe = positional_encoding_for(t_idx, cfg.d_model)[:, None, :]
            actions_out = []
            logps = []
            prev_action = None
            for i in range(n):
                if i == 0:
                    tok = T.add(T.reshape(self.sos, (1, 1, -1)), Tensor(pe))
                else:
                    tok = T.add(self._embed_action_value(prev_action[:, None]), Tensor(pe))
                xdec = tok
                enc_tok = encoded[:, i : i + 1]
                for block, ctx in zip(self.dec_blocks, dec_ctxs):
                    xdec = block.agent_step(xdec, enc_tok, ctx, i)
                head = self._head(xdec)
                if cfg.action_space.kind == "discrete":
                    logp_all = T.log_softmax(head, axis=-1).data[:, 0, :]
                    if greedy:
                        a = logp_all.argmax(axis=-1)
                    else:
                        u = rng.random(batch)
                        cum = np.cumsum(np.exp(logp_all), axis=-1)
                        a = np.minimum((u[:, None] > cum).sum(axis=-1), cfg.action_space.n - 1)
                    logps.append(logp_all[np.arange(batch), a])
                    prev_action = a
                else:
                    mean = head.data[:, 0, :]
                    std = np.exp(self.log_std.data)
                    a = mean if greedy else mean + std * rng.standard_normal(mean.shape)
                    z = (a - mean) / std
                    logps.append(
                        -0.5 * (z * z).sum(-1)
                        - self.log_std.data.sum()
                        - 0.5 * cfg.action_space.n * np.log(2.0 * np.pi)
                    )
                    prev_action = a
                actions_out.append(a)

        actions = np.stack(actions_out, axis=1)
        return ActResult(
            actions=actions,
            log_probs=np.stack(logps, axis=1),
            values=values,
            _enc_steps=enc_steps,
            _dec_ctxs=dec_ctxs,
        )

    def commit(self, result: ActResult, dones: np.ndarray) -> NetState:
        """Close the timestep: zero states of finished (or memoryless) slots."""
        if self.config.memory_mode != "full-trajectory":
            dones = np.ones_like(np.asarray(dones, dtype=bool))
        with T.no_grad():
            enc = [
                block.close_step(step, dones)
                for block, step in zip(self.enc_blocks, result._enc_steps)
            ]
            closed = [
                block.end_step(ctx, dones)
                for block, ctx in zip(self.dec_blocks, result._dec_ctxs)
            ]
        return NetState(
            enc=enc,
            dec_self=[s for s, _ in closed],
            dec_cross=[c for _, c in closed],
        )

    def peek_values(self, obs: np.ndarray, t_idx: np.ndarray, state: NetState) -> np.ndarray:
        """Value estimates for one observation without advancing state."""
        chunk = self.config.chunk_agents if self.config.memory_mode == "agent-chunked" else None
        with T.no_grad():
            x = self._embed_obs(obs, t_idx)
            for block, bstate in zip(self.enc_blocks, state.enc):
                x, _ = block.open_step(x, bstate, chunk_agents=chunk)
            return self._values(x).data

    # -- training ---------------------------------------------------------------------

    def _chunk_specs(self, dones: np.ndarray) -> list[DecaySpec]:
        """Per-slot decay specs for a chunk of timesteps (kappa filled per head)."""
        cfg = self.config
        if cfg.memory_mode == "agent-chunked":
            # one real timestep re-read as chunk_agents-wide pseudo-steps
            if dones.shape[1] != 1:
                raise ContractError("agent-chunked evaluation processes one timestep at a time")
            pseudo_steps = cfg.n_agents // cfg.chunk_agents
            spec = DecaySpec(cfg.chunk_agents, pseudo_steps, 1.0)
            return [spec] * dones.shape[0]
        effective = np.ones_like(dones) if cfg.memory_mode == "no-memory" else dones
        return [
            DecaySpec(cfg.n_agents, dones.shape[1], 1.0, tuple(bool(x) for x in effective[b]))
            for b in range(dones.shape[0])
        ]

    def evaluate_joint(self, batch: TrajectoryBatch, time_chunk_steps: int | None = None):
        """Teacher-forced log-probs, entropies and values for a trajectory.

        Chunk size divides the evaluation along the time axis; outputs
        are invariant to the choice.
        """
        cfg = self.config
        B, L, n = batch.obs.shape[0], batch.obs.shape[1], cfg.n_agents
        if batch.obs.shape[2] != n or batch.obs.shape[3] != cfg.obs_dim:
            raise DimensionError(f"expected observations [B, L, {n}, {cfg.obs_dim}], got {batch.obs.shape}")
        if batch.dones.shape != (B, L):
            raise ContractError(f"dones shape {batch.dones.shape} does not match ({B}, {L})")
        chunk = time_chunk_steps or L
        if cfg.memory_mode == "agent-chunked":
            chunk = 1
        if chunk < 1 or chunk > L:
            raise ContractError(f"time chunk of {chunk} steps does not fit rollout of {L}")

        obs_tokens = self._embed_obs(batch.obs, batch.t_idx)  # [B, L, N, d]
        obs_tokens = T.reshape(obs_tokens, (B, L * n, cfg.d_model))
        act_tokens = self._teacher_forced_tokens(batch.actions, batch.t_idx)
        act_tokens = T.reshape(act_tokens, (B, L * n, cfg.d_model))

        enc_states = [s for s in batch.boundary.enc]
        dec_self_states = [s for s in batch.boundary.dec_self]
        dec_cross_states = [s for s in batch.boundary.dec_cross]

        lock = cfg.memory_mode == "agent-chunked"
        head_chunks = []
        value_chunks = []
        for start in range(0, L, chunk):
            steps = min(chunk, L - start)
            sl = slice(start * n, (start + steps) * n)
            specs = self._chunk_specs(batch.dones[:, start : start + steps])

            x = obs_tokens[:, sl]
            for bi, block in enumerate(self.enc_blocks):
                x, enc_states[bi] = block.chunkwise(x, enc_states[bi], specs, lock_kappa=lock)
            encoded = x
            value_chunks.append(self._values(encoded))

            xd = act_tokens[:, sl]
            for bi, block in enumerate(self.dec_blocks):
                xd, dec_self_states[bi], dec_cross_states[bi] = block.chunkwise(
                    xd, encoded, dec_self_states[bi], dec_cross_states[bi], specs, lock_kappa=lock
                )
            head_chunks.append(self._head(xd))

            if cfg.memory_mode != "full-trajectory":
                zero = self.zero_state(B)
                enc_states = zero.enc
                dec_self_states = zero.dec_self
                dec_cross_states = zero.dec_cross

        heads = head_chunks[0] if len(head_chunks) == 1 else T.concat(head_chunks, axis=1)
        values = value_chunks[0] if len(value_chunks) == 1 else T.concat(value_chunks, axis=1)

        flat_actions = (
            batch.actions.reshape(B, L * n)
            if cfg.action_space.kind == "discrete"
            else batch.actions.reshape(B, L * n, cfg.action_space.n)
        )
        if cfg.action_space.kind == "discrete":
            logp, entropy = self._discrete_logp_entropy(heads, flat_actions)
        else:
            logp, entropy = self._gaussian_logp_entropy(heads, flat_actions)

        shape3 = (B, L, n)
        return (
            T.reshape(logp, shape3),
            T.reshape(entropy, shape3),
            T.reshape(values, shape3),
        )

    # -- checkpointing -----------------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        save_params(dict(self.named_params()), path)

    def load_checkpoint(self, path: str) -> None:
        arrays = load_params(path)
        own = dict(self.named_params())
        for name in arrays:
            if name not in own:
                raise CheckpointError(f"checkpoint array {name!r} has no matching parameter")
        for name, p in own.items():
            if name not in arrays:
                raise CheckpointError(f"parameter {name!r} missing from checkpoint")
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {p.data.shape}, checkpoint holds {arrays[name].shape}"
                )
            p.data = np.ascontiguousarray(arrays[name])


# ---------------------------------------------------------------------------
# checkpoint file format: text manifest, then raw little-endian float64


_MAGIC = b"SABLE-PARAMS-1\n"


def save_params(params: dict[str, Tensor], path: str) -> None:
    names = sorted(params)
    lines = []
    offset = 0
    for name in names:
        arr = params[name].data
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} float64 {shape} {offset}\n")
        offset += arr.size * 8
    manifest = _MAGIC + "".join(lines).encode() + b"END\n"
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(manifest)
        for name in names:
            f.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_params(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not a parameter checkpoint")
    header_end = blob.find(b"END\n", len(_MAGIC))
    if header_end < 0:
        raise CheckpointError(f"{path}: manifest is truncated")
    payload = blob[header_end + 4 :]
    out: dict[str, np.ndarray] = {}
    for line in blob[len(_MAGIC) : header_end].decode().splitlines():
        name, dtype, shape_s, offset_s = line.rsplit(" ", 3)
        if dtype != "float64":
            raise CheckpointError(f"{path}: array {name!r} has unsupported dtype {dtype}")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        if offset + count * 8 > len(payload):
            raise CheckpointError(f"{path}: array {name!r} extends past end of payload")
        out[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
    return out
