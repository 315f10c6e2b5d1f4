"""Retention: decayed linear token mixing in three equivalent forms.

The recurrent form advances a d_k x d_v hidden state one token at a
time, the parallel form applies a dense decay matrix to Q K^T, and the
chunkwise form mixes both: a parallel pass inside each chunk plus a
carried hidden state across chunks. All three agree to float64 rounding,
which is the correctness backbone of this package.

Execution-time behavior follows the per-timestep recurrences: a step's
outputs always come from the state updated with the step's own tokens,
and the reset for a finished episode applies only to the state carried
onward.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from sable import tensor as T
from sable.decay import DecaySpec, artifacts_for_chunk
from sable.tensor import ContractError, DimensionError, Tensor


# ---------------------------------------------------------------------------
# single-head primitives


def retention_recurrent(q: Tensor, k: Tensor, v: Tensor, state: Tensor, kappa: float):
    """One token through the recurrent form: h = kappa*h + k^T v, out = q h."""
    if q.shape[-2] != 1:
        raise DimensionError(f"recurrent form takes one token at a time, got {q.shape}")
    h = T.add(T.mul(state, T._coerce(kappa)), T.matmul(k.mT, v))
    return T.matmul(q, h), h


def retention_parallel(q: Tensor, k: Tensor, v: Tensor, decay: Tensor) -> Tensor:
    """(Q K^T o D) V over a whole token batch."""
    if decay.shape[-1] != k.shape[-2] or decay.shape[-2] != q.shape[-2]:
        raise DimensionError(
            f"decay shape {decay.shape} does not match {q.shape[-2]} queries / {k.shape[-2]} keys"
        )
    return T.matmul(T.mul(T.matmul(q, k.mT), decay), v)


def retention_chunkwise(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    decay: Tensor,
    xi: Tensor,
    zeta: Tensor,
    carry_power,
    carry_state: Tensor,
):
    """One chunk: parallel inner term plus decayed consumption of the carry.

    Returns the chunk outputs and the state at the chunk's end. `decay`,
    `xi`, `zeta` and `carry_power` must describe this chunk's termination
    pattern; `carry_power` may be a scalar or a [batch,1,1] tensor.
    """
    if q.shape[-2] != decay.shape[-2] or xi.shape[-2] != q.shape[-2]:
        raise ContractError(
            f"artifacts built for {decay.shape[-2]} tokens, got {q.shape[-2]}"
        )
    inner = retention_parallel(q, k, v, decay)
    cross = T.mul(T.matmul(q, carry_state), xi)
    out = T.add(inner, cross)
    new_state = T.add(
        T.matmul(k.mT, T.mul(v, zeta)),
        T.mul(carry_state, T._coerce(carry_power)),
    )
    return out, new_state


# ---------------------------------------------------------------------------
# state containers


@dataclass
class RetentionState:
    """Per-head hidden matrices for one retention sublayer.

    Constant-size regardless of how many timesteps have been consumed:
    the whole point of inference-time retention.
    """

    h: list[Tensor]
    role: str

    @classmethod
    def zeros(cls, batch: int, n_heads: int, d_head: int, role: str) -> "RetentionState":
        return cls(h=[T.zeros(batch, d_head, d_head) for _ in range(n_heads)], role=role)

    def copy(self) -> "RetentionState":
        return RetentionState(h=[Tensor(t.data.copy()) for t in self.h], role=self.role)

    def size_bytes(self) -> int:
        return sum(t.data.nbytes for t in self.h)


@dataclass
class StepAccumulator:
    """Within-timestep running state: decayed carry plus tokens seen so far."""

    acc: list[Tensor]
    role: str


# ---------------------------------------------------------------------------
# multi-scale (multi-head) retention


def head_decay_rates(n_heads: int, kappa_scale: float) -> list[float]:
    """Distinct per-head decays, largest memory first: (1 - 2^-(5+h))^scale."""
    return [float((1.0 - 2.0 ** -(5 + h)) ** kappa_scale) for h in range(n_heads)]


@dataclass
class RetentionHeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    kappa: float


class MultiScaleRetention:
    """Multi-head retention with GroupNorm over heads and a swish gate.

    `causal=True` uses the token-triangular decay matrix (decoder side);
    otherwise the block-causal encoder matrix with full within-step
    mixing. Heterogeneous query/key/value sources give cross-retention;
    the gate always reads the key source.
    """

    def __init__(
        self,
        heads: list[RetentionHeadParams],
        gn_weight: Tensor,
        gn_bias: Tensor,
        w_gate: Tensor,
        w_out: Tensor,
        causal: bool,
        role: str,
    ) -> None:
        self.heads = heads
        self.gn_weight = gn_weight
        self.gn_bias = gn_bias
        self.w_gate = w_gate
        self.w_out = w_out
        self.causal = causal
        self.role = role
        self.d_head = heads[0].w_q.shape[-1]
        self.scale = 1.0 / np.sqrt(self.d_head)

    # -- parameter plumbing -------------------------------------------------

    def named_params(self, prefix: str):
        for i, hp in enumerate(self.heads):
            yield f"{prefix}.head{i}.w_q", hp.w_q
            yield f"{prefix}.head{i}.w_k", hp.w_k
            yield f"{prefix}.head{i}.w_v", hp.w_v
        yield f"{prefix}.gn_weight", self.gn_weight
        yield f"{prefix}.gn_bias", self.gn_bias
        yield f"{prefix}.w_gate", self.w_gate
        yield f"{prefix}.w_out", self.w_out

    def zero_state(self, batch: int) -> RetentionState:
        return RetentionState.zeros(batch, len(self.heads), self.d_head, self.role)

    # -- shared plumbing ------------------------------------------------------

    def _project(self, q_src: Tensor, k_src: Tensor, v_src: Tensor, head: RetentionHeadParams):
        if k_src.shape[-2] != v_src.shape[-2]:
            raise DimensionError(
                f"key/value sources disagree on length: {k_src.shape} vs {v_src.shape}"
            )
        q = T.mul(T.matmul(q_src, head.w_q), T._coerce(self.scale))
        k = T.matmul(k_src, head.w_k)
        v = T.matmul(v_src, head.w_v)
        return q, k, v

    def _finish(self, head_outs: list[Tensor], gate_src: Tensor) -> Tensor:
        y = head_outs[0] if len(head_outs) == 1 else T.concat(head_outs, axis=-1)
        y = T.group_norm(y, len(self.heads), self.gn_weight, self.gn_bias)
        gate = T.swish(T.matmul(gate_src, self.w_gate))
        return T.matmul(T.mul(gate, y), self.w_out)

    def _head_artifacts(self, specs: list[DecaySpec], kappa: float):
        arts = [artifacts_for_chunk(replace(s, kappa=kappa)) for s in specs]
        mat = np.stack([(a.d_decoder if self.causal else a.d_encoder).data for a in arts])
        xi = np.stack([a.xi.data for a in arts])
        zeta = np.stack([a.zeta.data for a in arts])
        carry = np.array([[[a.chunk_carry_power]] for a in arts])
        return Tensor(mat), Tensor(xi), Tensor(zeta), Tensor(carry)

    # -- training-time forms --------------------------------------------------

    def chunkwise(
        self,
        q_src: Tensor,
        k_src: Tensor,
        v_src: Tensor,
        state: RetentionState,
        specs: list[DecaySpec],
        lock_kappa: bool = False,
    ):
        """Process one timestep-aligned chunk, carrying per-head states.

        `lock_kappa` pins every head's decay at one, for sequences whose
        pseudo-steps are really peers of a single timestep.
        """
        outs, new_h = [], []
        for hp, h_prev in zip(self.heads, state.h):
            q, k, v = self._project(q_src, k_src, v_src, hp)
            decay, xi, zeta, carry = self._head_artifacts(specs, 1.0 if lock_kappa else hp.kappa)
            out, h_new = retention_chunkwise(q, k, v, decay, xi, zeta, carry, h_prev)
            outs.append(out)
            new_h.append(h_new)
        return self._finish(outs, k_src), RetentionState(h=new_h, role=self.role)

    def parallel(self, q_src: Tensor, k_src: Tensor, v_src: Tensor, specs: list[DecaySpec]):
        """Whole-sequence parallel form (zero carry), mostly for oracles."""
        outs = []
        for hp in self.heads:
            q, k, v = self._project(q_src, k_src, v_src, hp)
            decay, _, _, _ = self._head_artifacts(specs, hp.kappa)
            outs.append(retention_parallel(q, k, v, decay))
        return self._finish(outs, k_src)

    # -- execution-time form ---------------------------------------------------

    def begin_step(self, state: RetentionState) -> StepAccumulator:
        """Open a timestep: decay the carried state once per head."""
        return StepAccumulator(
            acc=[T.mul(h, T._coerce(hp.kappa)) for hp, h in zip(self.heads, state.h)],
            role=self.role,
        )

    def accumulate(self, q_src: Tensor, k_src: Tensor, v_src: Tensor, step: StepAccumulator):
        """Fold tokens into the open step, then query them.

        Feeding all N agent tokens at once yields full self-retention
        over the step (encoder); feeding tokens one agent at a time
        yields the strict agent-causal ordering (decoder).
        """
        outs = []
        for j, hp in enumerate(self.heads):
            q, k, v = self._project(q_src, k_src, v_src, hp)
            step.acc[j] = T.add(step.acc[j], T.matmul(k.mT, v))
            outs.append(T.matmul(q, step.acc[j]))
        return self._finish(outs, k_src)

    def end_step(self, step: StepAccumulator, done: np.ndarray) -> RetentionState:
        """Close the timestep; finished episodes carry a zero state."""
        keep = (~np.asarray(done, dtype=bool)).astype(np.float64)[:, None, None]
        keep_t = Tensor(keep)
        return RetentionState(
            h=[T.mul(acc, keep_t) for acc in step.acc],
            role=self.role,
        )


# ---------------------------------------------------------------------------
# feed-forward and full blocks


@dataclass
class SwiGLUParams:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def named_params(self, prefix: str):
        yield f"{prefix}.w_gate", self.w_gate
        yield f"{prefix}.w_up", self.w_up
        yield f"{prefix}.w_down", self.w_down


def swiglu(x: Tensor, p: SwiGLUParams) -> Tensor:
    return T.matmul(T.mul(T.swish(T.matmul(x, p.w_gate)), T.matmul(x, p.w_up)), p.w_down)


class EncoderBlock:
    """Pre-norm self-retention plus a SwiGLU feed-forward, both residual."""

    def __init__(self, msr: MultiScaleRetention, norm_attn: Tensor, ffn: SwiGLUParams, norm_ffn: Tensor):
        self.msr = msr
        self.norm_attn = norm_attn
        self.ffn = ffn
        self.norm_ffn = norm_ffn

    def named_params(self, prefix: str):
        yield from self.msr.named_params(f"{prefix}.msr")
        yield f"{prefix}.norm_attn", self.norm_attn
        yield from self.ffn.named_params(f"{prefix}.ffn")
        yield f"{prefix}.norm_ffn", self.norm_ffn

    def _ffn(self, x: Tensor) -> Tensor:
        return T.add(x, swiglu(T.rms_norm(x, self.norm_ffn), self.ffn))

    def chunkwise(self, x: Tensor, state: RetentionState, specs: list[DecaySpec], lock_kappa: bool = False):
        z = T.rms_norm(x, self.norm_attn)
        y, state = self.msr.chunkwise(z, z, z, state, specs, lock_kappa)
        return self._ffn(T.add(x, y)), state

    def open_step(self, x: Tensor, state: RetentionState, chunk_agents: int | None = None):
        """One whole timestep of N agent tokens.

        Without `chunk_agents` every token sees every other (full
        self-retention); with it, tokens see their own chunk fully and
        earlier chunks only.
        """
        step = self.msr.begin_step(state)
        z = T.rms_norm(x, self.norm_attn)
        n_tokens = z.shape[-2]
        if not chunk_agents or chunk_agents >= n_tokens:
            y = self.msr.accumulate(z, z, z, step)
        else:
            parts = []
            for start in range(0, n_tokens, chunk_agents):
                zc = z[:, start : start + chunk_agents]
                parts.append(self.msr.accumulate(zc, zc, zc, step))
            y = T.concat(parts, axis=-2)
        return self._ffn(T.add(x, y)), step

    def close_step(self, step: StepAccumulator, done: np.ndarray) -> RetentionState:
        return self.msr.end_step(step, done)

    def step(self, x: Tensor, state: RetentionState, done: np.ndarray, chunk_agents: int | None = None):
        out, step = self.open_step(x, state, chunk_agents)
        return out, self.close_step(step, done)


@dataclass
class DecoderStepContext:
    self_step: StepAccumulator
    cross_step: StepAccumulator
    next_agent: int = 0


class DecoderBlock:
    """Self-retention over action tokens, cross-retention into encodings.

    The cross sublayer keeps the decoder stream as the residual path and
    gates on the (normalized) encoded observations it reads.
    """

    def __init__(
        self,
        self_msr: MultiScaleRetention,
        norm_self: Tensor,
        cross_msr: MultiScaleRetention,
        norm_cross_q: Tensor,
        norm_cross_kv: Tensor,
        ffn: SwiGLUParams,
        norm_ffn: Tensor,
    ):
        self.self_msr = self_msr
        self.norm_self = norm_self
        self.cross_msr = cross_msr
        self.norm_cross_q = norm_cross_q
        self.norm_cross_kv = norm_cross_kv
        self.ffn = ffn
        self.norm_ffn = norm_ffn

    def named_params(self, prefix: str):
        yield from self.self_msr.named_params(f"{prefix}.self")
        yield f"{prefix}.norm_self", self.norm_self
        yield from self.cross_msr.named_params(f"{prefix}.cross")
        yield f"{prefix}.norm_cross_q", self.norm_cross_q
        yield f"{prefix}.norm_cross_kv", self.norm_cross_kv
        yield from self.ffn.named_params(f"{prefix}.ffn")
        yield f"{prefix}.norm_ffn", self.norm_ffn

    def _ffn(self, x: Tensor) -> Tensor:
        return T.add(x, swiglu(T.rms_norm(x, self.norm_ffn), self.ffn))

    def chunkwise(
        self,
        actions: Tensor,
        encoded: Tensor,
        self_state: RetentionState,
        cross_state: RetentionState,
        specs: list[DecaySpec],
        lock_kappa: bool = False,
    ):
        z = T.rms_norm(actions, self.norm_self)
        y, self_state = self.self_msr.chunkwise(z, z, z, self_state, specs, lock_kappa)
        x = T.add(actions, y)
        zq = T.rms_norm(x, self.norm_cross_q)
        zkv = T.rms_norm(encoded, self.norm_cross_kv)
        y2, cross_state = self.cross_msr.chunkwise(zq, zkv, zkv, cross_state, specs, lock_kappa)
        x = T.add(x, y2)
        return self._ffn(x), self_state, cross_state

    def begin_step(self, self_state: RetentionState, cross_state: RetentionState) -> DecoderStepContext:
        return DecoderStepContext(
            self_step=self.self_msr.begin_step(self_state),
            cross_step=self.cross_msr.begin_step(cross_state),
        )

    def agent_step(self, action_tok: Tensor, encoded_tok: Tensor, ctx: DecoderStepContext, agent_index: int):
        """Decode one agent; agents must arrive in order within the step."""
        if agent_index != ctx.next_agent:
            raise ContractError(
                f"agents must be decoded in order: expected {ctx.next_agent}, got {agent_index}"
            )
        ctx.next_agent += 1
        z = T.rms_norm(action_tok, self.norm_self)
        y = self.self_msr.accumulate(z, z, z, ctx.self_step)
        x = T.add(action_tok, y)
        zq = T.rms_norm(x, self.norm_cross_q)
        zkv = T.rms_norm(encoded_tok, self.norm_cross_kv)
        y2 = self.cross_msr.accumulate(zq, zkv, zkv, ctx.cross_step)
        x = T.add(x, y2)
        return self._ffn(x)

    def end_step(self, ctx: DecoderStepContext, done: np.ndarray):
        return (
            self.self_msr.end_step(ctx.self_step, done),
            self.cross_msr.end_step(ctx.cross_step, done),
        )


# ---------------------------------------------------------------------------
# initialization


def init_projection(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return T.parameter(rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out)))


def init_msr(
    rng: np.random.Generator,
    d_model: int,
    n_heads: int,
    kappa_scale: float,
    causal: bool,
    role: str,
) -> MultiScaleRetention:
    if d_model % n_heads != 0:
        raise ContractError(f"{n_heads} heads do not divide d_model={d_model}")
    d_head = d_model // n_heads
    heads = [
        RetentionHeadParams(
            w_q=init_projection(rng, d_model, d_head),
            w_k=init_projection(rng, d_model, d_head),
            w_v=init_projection(rng, d_model, d_head),
            kappa=kap,
        )
        for kap in head_decay_rates(n_heads, kappa_scale)
    ]
    return MultiScaleRetention(
        heads=heads,
        gn_weight=T.parameter(np.ones(d_model)),
        gn_bias=T.parameter(np.zeros(d_model)),
        w_gate=init_projection(rng, d_model, d_model),
        w_out=init_projection(rng, d_model, d_model),
        causal=causal,
        role=role,
    )


def init_swiglu(rng: np.random.Generator, d_model: int, mult: int = 2) -> SwiGLUParams:
    hidden = mult * d_model
    return SwiGLUParams(
        w_gate=init_projection(rng, d_model, hidden),
        w_up=init_projection(rng, d_model, hidden),
        w_down=init_projection(rng, hidden, d_model),
    )


def init_encoder_block(
    rng: np.random.Generator, d_model: int, n_heads: int, kappa_scale: float
) -> EncoderBlock:
    return EncoderBlock(
        msr=init_msr(rng, d_model, n_heads, kappa_scale, causal=False, role="encoder-self"),
        norm_attn=T.parameter(np.ones(d_model)),
        ffn=init_swiglu(rng, d_model),
        norm_ffn=T.parameter(np.ones(d_model)),
    )


def init_decoder_block(
    rng: np.random.Generator, d_model: int, n_heads: int, kappa_scale: float
) -> DecoderBlock:
    return DecoderBlock(
        self_msr=init_msr(rng, d_model, n_heads, kappa_scale, causal=True, role="decoder-self"),
        norm_self=T.parameter(np.ones(d_model)),
        cross_msr=init_msr(rng, d_model, n_heads, kappa_scale, causal=True, role="decoder-cross"),
        norm_cross_q=T.parameter(np.ones(d_model)),
        norm_cross_kv=T.parameter(np.ones(d_model)),
        ffn=init_swiglu(rng, d_model),
        norm_ffn=T.parameter(np.ones(d_model)),
    )
