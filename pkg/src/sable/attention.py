"""Minimal softmax-attention encoder-decoder baseline.

Shares the retention model's skeleton (embeddings, per-step encoder,
per-agent decoder, value and action heads) but mixes tokens with masked
softmax attention. By default it conditions on the current timestep
only; a trajectory-context mode keeps growing key/value caches, which is
what makes its inference memory scale with episode length, unlike the
constant-size retention states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sable import tensor as T
from sable.net import ActResult, TrajectoryBatch, positional_encoding_for
from sable.retention import SwiGLUParams, init_projection, swiglu
from sable.tensor import ContractError, DimensionError, Tensor

NEG_INF = -1e30


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(Q K^T / sqrt(d) + log-mask) V; mask is 1 where visible."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise DimensionError(f"mask {mask.shape} does not cover {q.shape[-2]}x{k.shape[-2]}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, k.mT), T._coerce(scale))
    scores = T.add(scores, Tensor(np.where(mask, 0.0, NEG_INF)))
    return T.matmul(T.softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AttentionConfig:
    obs_dim: int
    n_agents: int
    n_actions: int
    d_model: int = 32
    n_heads: int = 2
    n_blocks: int = 1
    norm: str = "rms"  # "rms" | "layer"
    ff: str = "swiglu"  # "swiglu" | "plain"
    context: str = "timestep"  # "timestep" | "trajectory"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"{self.n_heads} heads do not divide d_model={self.d_model}")
        if self.norm not in ("rms", "layer"):
            raise ContractError(f"unknown norm {self.norm!r}")
        if self.ff not in ("swiglu", "plain"):
            raise ContractError(f"unknown feed-forward {self.ff!r}")
        if self.context not in ("timestep", "trajectory"):
            raise ContractError(f"unknown context mode {self.context!r}")

    @property
    def action_space(self):
        from sable.net import ActionSpace

        return ActionSpace("discrete", self.n_actions)


def ablation_variants(base: AttentionConfig) -> list[AttentionConfig]:
    """The four norm/feed-forward combinations, original first."""
    from dataclasses import replace

    return [
        replace(base, norm=n, ff=f)
        for n, f in (("layer", "plain"), ("rms", "plain"), ("layer", "swiglu"), ("rms", "swiglu"))
    ]


def variant_name(cfg: AttentionConfig) -> str:
    return f"mat-lite:{cfg.norm}:{cfg.ff}"


# ---------------------------------------------------------------------------
# parameter groups


@dataclass
class Norm:
    kind: str
    weight: Tensor
    bias: Tensor | None

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "rms":
            return T.rms_norm(x, self.weight)
        return T.layer_norm(x, self.weight, self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.kind == "layer":
            yield f"{prefix}.bias", self.bias


def _init_norm(kind: str, d: int) -> Norm:
    return Norm(
        kind=kind,
        weight=T.parameter(np.ones(d)),
        bias=T.parameter(np.zeros(d)) if kind == "layer" else None,
    )


@dataclass
class PlainFF:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def named_params(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def _init_ff(kind: str, rng, d: int):
    if kind == "plain":
        return PlainFF(
            w1=init_projection(rng, d, 2 * d),
            b1=T.parameter(np.zeros(2 * d)),
            w2=init_projection(rng, 2 * d, d),
            b2=T.parameter(np.zeros(d)),
        )
    p = SwiGLUParams(
        w_gate=init_projection(rng, d, 2 * d),
        w_up=init_projection(rng, d, 2 * d),
        w_down=init_projection(rng, 2 * d, d),
    )
    return lambda_ff(p)


@dataclass
class lambda_ff:
    p: SwiGLUParams

    def __call__(self, x: Tensor) -> Tensor:
        return swiglu(x, self.p)

    def named_params(self, prefix: str):
        yield from self.p.named_params(prefix)


class MultiHeadAttention:
    def __init__(self, rng, d_model: int, n_heads: int):
        dh = d_model // n_heads
        self.heads = [
            (
                init_projection(rng, d_model, dh),
                init_projection(rng, d_model, dh),
                init_projection(rng, d_model, dh),
            )
            for _ in range(n_heads)
        ]
        self.w_out = init_projection(rng, d_model, d_model)

    def named_params(self, prefix: str):
        for i, (wq, wk, wv) in enumerate(self.heads):
            yield f"{prefix}.head{i}.w_q", wq
            yield f"{prefix}.head{i}.w_k", wk
            yield f"{prefix}.head{i}.w_v", wv
        yield f"{prefix}.w_out", self.w_out

    def __call__(self, q_src: Tensor, kv_src: Tensor, mask: np.ndarray) -> Tensor:
        outs = [
            masked_attention(T.matmul(q_src, wq), T.matmul(kv_src, wk), T.matmul(kv_src, wv), mask)
            for wq, wk, wv in self.heads
        ]
        y = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
        return T.matmul(y, self.w_out)


class AttnEncoderBlock:
    def __init__(self, rng, cfg: AttentionConfig):
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.norm1 = _init_norm(cfg.norm, cfg.d_model)
        self.ff = _init_ff(cfg.ff, rng, cfg.d_model)
        self.norm2 = _init_norm(cfg.norm, cfg.d_model)

    def named_params(self, prefix: str):
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.ff.named_params(f"{prefix}.ff")
        yield from self.norm2.named_params(f"{prefix}.norm2")

    def __call__(self, x: Tensor, mask: np.ndarray, kv: Tensor | None = None) -> Tensor:
        z = self.norm1(x)
        zkv = z if kv is None else kv
        x = T.add(x, self.attn(z, zkv, mask))
        return T.add(x, self.ff(self.norm2(x)))


class AttnDecoderBlock:
    def __init__(self, rng, cfg: AttentionConfig):
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.norm1 = _init_norm(cfg.norm, cfg.d_model)
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.norm2q = _init_norm(cfg.norm, cfg.d_model)
        self.norm2kv = _init_norm(cfg.norm, cfg.d_model)
        self.ff = _init_ff(cfg.ff, rng, cfg.d_model)
        self.norm3 = _init_norm(cfg.norm, cfg.d_model)

    def named_params(self, prefix: str):
        yield from self.self_attn.named_params(f"{prefix}.self")
        yield from self.norm1.named_params(f"{prefix}.norm1")
        yield from self.cross_attn.named_params(f"{prefix}.cross")
        yield from self.norm2q.named_params(f"{prefix}.norm2q")
        yield from self.norm2kv.named_params(f"{prefix}.norm2kv")
        yield from self.ff.named_params(f"{prefix}.ff")
        yield from self.norm3.named_params(f"{prefix}.norm3")

    def __call__(self, x: Tensor, x_kv: Tensor, enc: Tensor, self_mask, cross_mask) -> Tensor:
        x = T.add(x, self.self_attn(self.norm1(x), self.norm1(x_kv), self_mask))
        x = T.add(x, self.cross_attn(self.norm2q(x), self.norm2kv(enc), cross_mask))
        return T.add(x, self.ff(self.norm3(x)))


# ---------------------------------------------------------------------------
# execution-time context


@dataclass
class ContextCache:
    """Per-block token buffers for trajectory-context attention.

    Each entry holds the inputs a block has seen from past timesteps, so
    the cache grows linearly with episode length; the timestep-context
    mode keeps it empty.
    """

    enc: list = field(default_factory=list)  # per block: Tensor [B, tokens, d] or None
    dec: list = field(default_factory=list)
    enc_out: Tensor | None = None

    @classmethod
    def empty(cls, n_blocks: int) -> "ContextCache":
        return cls(enc=[None] * n_blocks, dec=[None] * n_blocks, enc_out=None)

    def _is_empty(self) -> bool:
        return all(t is None for t in self.enc + self.dec + [self.enc_out])

    def copy(self) -> "ContextCache":
        return ContextCache(
            enc=[None if t is None else Tensor(t.data.copy()) for t in self.enc],
            dec=[None if t is None else Tensor(t.data.copy()) for t in self.dec],
            enc_out=None if self.enc_out is None else Tensor(self.enc_out.data.copy()),
        )

    def select_rows(self, rows: np.ndarray) -> "ContextCache":
        if not self._is_empty():
            raise ContractError("trajectory-context attention supports execution only")
        return ContextCache.empty(len(self.enc))

    def size_bytes(self) -> int:
        total = 0
        for t in self.enc + self.dec + [self.enc_out]:
            if t is not None:
                total += t.data.nbytes
        return total


def _extend(cur: Tensor | None, new: Tensor) -> Tensor:
    return new if cur is None else T.concat([cur, new], axis=1)


# ---------------------------------------------------------------------------
# the model


class AttentionNet:
    """MAT-lite: the attention counterpart of the retention model.

    Implements the same act/commit/evaluate_joint surface the trainer
    drives, for discrete action spaces.
    """

    def __init__(self, config: AttentionConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.obs_w = init_projection(rng, config.obs_dim, d)
        self.obs_b = T.parameter(np.zeros(d))
        self.sos = T.parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.act_table = T.parameter(rng.normal(0.0, 0.02, size=(config.n_actions, d)))
        self.enc_blocks = [AttnEncoderBlock(rng, config) for _ in range(config.n_blocks)]
        self.dec_blocks = [AttnDecoderBlock(rng, config) for _ in range(config.n_blocks)]
        self.value_w = init_projection(rng, d, 1)
        self.value_b = T.parameter(np.zeros(1))
        self.head_w = T.parameter(rng.normal(0.0, 0.01 * d**-0.5, size=(d, config.n_actions)))
        self.head_b = T.parameter(np.zeros(config.n_actions))

    def named_params(self):
        out = [("obs_w", self.obs_w), ("obs_b", self.obs_b), ("sos", self.sos), ("act_table", self.act_table)]
        for i, b in enumerate(self.enc_blocks):
            out += list(b.named_params(f"enc{i}"))
        for i, b in enumerate(self.dec_blocks):
            out += list(b.named_params(f"dec{i}"))
        out += [("value_w", self.value_w), ("value_b", self.value_b),
                ("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def parameters(self):
        return [p for _, p in self.named_params()]

    def zero_state(self, batch: int) -> ContextCache:
        return ContextCache.empty(self.config.n_blocks)

    # -- shared pieces -------------------------------------------------------

    def _embed_obs(self, obs: np.ndarray, t_idx: np.ndarray) -> Tensor:
        x = T.gelu(T.add(T.matmul(Tensor(obs), self.obs_w), self.obs_b))
        pe = positional_encoding_for(t_idx, self.config.d_model)
        return T.add(x, Tensor(np.expand_dims(pe, -2)))

    def _values(self, encoded: Tensor) -> Tensor:
        return T.add(T.matmul(encoded, self.value_w), self.value_b)[..., 0]

    def _head(self, decoded: Tensor) -> Tensor:
        return T.add(T.matmul(decoded, self.head_w), self.head_b)

    # -- execution -------------------------------------------------------------

    def act(self, obs, t_idx, state: ContextCache, rng=None, greedy: bool = False) -> ActResult:
        cfg = self.config
        batch, n = obs.shape[0], cfg.n_agents
        trajectory = cfg.context == "trajectory"
        with T.no_grad():
            x = self._embed_obs(obs, t_idx)
            enc_inputs = []  # this step's input to each encoder block
            for bi, block in enumerate(self.enc_blocks):
                enc_inputs.append(x)
                past = state.enc[bi] if trajectory else None
                kv = _extend(past, x) if past is not None else x
                n_keys = kv.shape[1]
                mask = np.ones((n, n_keys), dtype=bool)
                z_q = block.norm1(x)
                z_kv = block.norm1(kv)
                x = T.add(x, block.attn(z_q, z_kv, mask))
                x = T.add(x, block.ff(block.norm2(x)))
            encoded = x
            values = self._values(encoded).data

            cross_past = state.enc_out.shape[1] if trajectory and state.enc_out is not None else 0
            cross_kv = _extend(state.enc_out, encoded) if cross_past else encoded

            pe = positional_encoding_for(t_idx, cfg.d_model)[:, None, :]
            dec_streams: list[Tensor | None] = [None] * cfg.n_blocks
            actions_out, logps = [], []
            prev = None
            for i in range(n):
                if i == 0:
                    tok = T.add(T.reshape(self.sos, (1, 1, -1)), Tensor(pe))
                else:
                    tok = T.add(T.embedding(self.act_table, prev[:, None]), Tensor(pe))
                xdec = tok
                for bi, block in enumerate(self.dec_blocks):
                    dec_streams[bi] = _extend(dec_streams[bi], xdec)
                    past = state.dec[bi] if trajectory else None
                    self_kv = _extend(past, dec_streams[bi]) if past is not None else dec_streams[bi]
                    smask = np.ones((1, self_kv.shape[1]), dtype=bool)
                    cmask = np.zeros((1, cross_past + n), dtype=bool)
                    cmask[:, : cross_past + i + 1] = True
                    xdec = block(xdec, self_kv, cross_kv, smask, cmask)
                logp_all = T.log_softmax(self._head(xdec), axis=-1).data[:, 0, :]
                if greedy:
                    a = logp_all.argmax(axis=-1)
                else:
                    u = rng.random(batch)
                    cum = np.cumsum(np.exp(logp_all), axis=-1)
                    a = np.minimum((u[:, None] > cum).sum(axis=-1), cfg.n_actions - 1)
                logps.append(logp_all[np.arange(batch), a])
                actions_out.append(a)
                prev = a

        res = ActResult(
            actions=np.stack(actions_out, axis=1),
            log_probs=np.stack(logps, axis=1),
            values=values,
        )
        res._enc_steps = enc_inputs
        res._dec_ctxs = [dec_streams, encoded, state]
        return res

    def commit(self, result: ActResult, dones: np.ndarray) -> ContextCache:
        """Carry context forward; the timestep mode carries nothing.

        Trajectory context is a measurement mode for uniform batches: all
        slots must reset together (no termination, or all terminating).
        """
        if self.config.context != "trajectory":
            return ContextCache.empty(self.config.n_blocks)
        dones = np.asarray(dones, dtype=bool)
        if dones.all():
            return ContextCache.empty(self.config.n_blocks)
        if dones.any():
            raise ContractError("trajectory-context attention needs uniform done flags per batch")
        enc_inputs = result._enc_steps
        dec_streams, encoded, prev = result._dec_ctxs
        return ContextCache(
            enc=[_extend(c, x) for c, x in zip(prev.enc, enc_inputs)],
            dec=[_extend(c, x) for c, x in zip(prev.dec, dec_streams)],
            enc_out=_extend(prev.enc_out, encoded),
        )

    def peek_values(self, obs, t_idx, state: ContextCache) -> np.ndarray:
        with T.no_grad():
            x = self._embed_obs(obs, t_idx)
            n = self.config.n_agents
            mask = np.ones((n, n), dtype=bool)
            for block in self.enc_blocks:
                x = block(x, mask)
            return self._values(x).data

    # -- training (timestep context only) ----------------------------------------

    def evaluate_joint(self, batch: TrajectoryBatch, time_chunk_steps: int | None = None):
        cfg = self.config
        if cfg.context != "timestep":
            raise ContractError("trajectory-context attention supports execution only")
        B, L, n = batch.obs.shape[:3]
        d = cfg.d_model

        obs_tokens = T.reshape(self._embed_obs(batch.obs, batch.t_idx), (B, L * n, d))
        shifted = np.roll(batch.actions, 1, axis=-1)
        emb = T.embedding(self.act_table, shifted.astype(np.intp))
        first = np.zeros(emb.shape[:-1] + (1,), dtype=bool)
        first[..., 0, :] = True
        tok = T.where(first, T.reshape(self.sos, (1, 1, 1, -1)), emb)
        pe = positional_encoding_for(batch.t_idx, d)
        act_tokens = T.reshape(T.add(tok, Tensor(np.expand_dims(pe, -2))), (B, L * n, d))

        block_full = np.kron(np.eye(L, dtype=bool), np.ones((n, n), dtype=bool))
        block_tri = np.kron(np.eye(L, dtype=bool), np.tril(np.ones((n, n), dtype=bool)))

        x = obs_tokens
        for block in self.enc_blocks:
            x = block(x, block_full)
        encoded = x
        values = self._values(encoded)

        xd = act_tokens
        for block in self.dec_blocks:
            xd = block(xd, xd, encoded, block_tri, block_tri)
        logits = self._head(xd)

        logp_all = T.log_softmax(logits, axis=-1)
        logp = T.gather_last(logp_all, batch.actions.reshape(B, L * n).astype(np.intp))
        entropy = T.mul(T.tsum(T.mul(T.texp(logp_all), logp_all), axis=-1), T._coerce(-1.0))
        shape3 = (B, L, n)
        return T.reshape(logp, shape3), T.reshape(entropy, shape3), T.reshape(values, shape3)
