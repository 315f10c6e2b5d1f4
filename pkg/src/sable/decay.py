"""Structured decay objects for multi-agent retention over episodic data.

A trajectory of L timesteps with N agents flattens to N*L tokens. All
builders here derive token-pair weightings from three facts: tokens of
the same timestep are peers (equal decay, exponent counts whole
timesteps), information never flows backward in time, and nothing
crosses an episode boundary. Exponents use the timestep difference
between tokens, which is what makes the parallel matrices agree exactly
with the per-step recurrences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sable.tensor import ContractError, Tensor


@dataclass(frozen=True)
class DecaySpec:
    """Shape and reset structure of one flattened agent-timestep sequence.

    `terminations[t]` is True when the episode ends at step t: tokens of
    steps > t must not see tokens of steps <= t.
    """

    n_agents: int
    n_timesteps: int
    kappa: float
    terminations: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.n_agents < 1 or self.n_timesteps < 1:
            raise ContractError("DecaySpec needs at least one agent and one timestep")
        if not (0.0 < self.kappa <= 1.0):
            raise ContractError(f"kappa must lie in (0, 1], got {self.kappa}")
        terms = tuple(bool(t) for t in self.terminations)
        if not terms:
            terms = (False,) * self.n_timesteps
        if len(terms) != self.n_timesteps:
            raise ContractError(
                f"terminations length {len(terms)} != n_timesteps {self.n_timesteps}"
            )
        object.__setattr__(self, "terminations", terms)

    @property
    def n_tokens(self) -> int:
        return self.n_agents * self.n_timesteps


@dataclass
class DecayArtifacts:
    """Everything one chunk of chunkwise retention needs, for one kappa."""

    d_encoder: Tensor
    d_decoder: Tensor
    xi: Tensor
    zeta: Tensor
    chunk_carry_power: float
    spec: DecaySpec = field(repr=False)


def _token_steps(spec: DecaySpec) -> np.ndarray:
    return np.repeat(np.arange(spec.n_timesteps), spec.n_agents)


def _termination_mask(spec: DecaySpec) -> np.ndarray:
    """1 where the token pair lies within one episode segment, else 0.

    A pair (i, j) with step(j) <= step(i) is severed iff some episode
    ended at a step t with step(j) <= t < step(i).
    """
    steps = _token_steps(spec)
    ends_before = np.concatenate([[0], np.cumsum(spec.terminations)])  # ends at steps < s
    seg = ends_before[steps]
    return (seg[:, None] == seg[None, :]).astype(np.float64)


def build_decoder_decay(spec: DecaySpec) -> Tensor:
    """Token-causal decay matrix: strict lower triangle across agents.

    Same-step tokens weight earlier agents of the step at power zero;
    pairs across steps decay once per elapsed timestep; termination
    boundaries zero whole blocks.
    """
    steps = _token_steps(spec)
    dstep = steps[:, None] - steps[None, :]
    tok = np.arange(spec.n_tokens)
    causal = tok[:, None] >= tok[None, :]
    base = np.where(causal, spec.kappa ** np.maximum(dstep, 0), 0.0)
    return Tensor(base * _termination_mask(spec))


def build_encoder_decay(spec: DecaySpec) -> Tensor:
    """Block-causal decay matrix: full N x N blocks of equal weight.

    Every pair within one timestep gets power zero in both directions,
    giving full self-retention across the step's agents.
    """
    steps = _token_steps(spec)
    dstep = steps[:, None] - steps[None, :]
    base = np.where(dstep >= 0, spec.kappa ** np.maximum(dstep, 0), 0.0)
    return Tensor(base * _termination_mask(spec))


def _validate_chunk_tokens(spec: DecaySpec, chunk_len_tokens: int) -> int:
    if chunk_len_tokens % spec.n_agents != 0:
        raise ContractError(
            f"chunk of {chunk_len_tokens} tokens is not divisible by {spec.n_agents} agents"
        )
    n_steps = chunk_len_tokens // spec.n_agents
    if n_steps < 1 or n_steps > spec.n_timesteps:
        raise ContractError(f"chunk of {n_steps} steps does not fit spec of {spec.n_timesteps}")
    return n_steps


def build_xi(spec: DecaySpec, chunk_len_tokens: int) -> Tensor:
    """Per-token weights on the carried-in hidden state, shape [tokens, 1].

    A token of local step s consumes the previous chunk's state at power
    s + 1; tokens after the chunk's first termination consume nothing.
    """
    n_steps = _validate_chunk_tokens(spec, chunk_len_tokens)
    steps = np.repeat(np.arange(n_steps), spec.n_agents)
    xi = spec.kappa ** (steps + 1.0)
    terms = np.flatnonzero(spec.terminations[:n_steps])
    if terms.size:
        xi = np.where(steps <= terms[0], xi, 0.0)
    return Tensor(xi[:, None])


def build_zeta(spec: DecaySpec, chunk_len_tokens: int) -> Tensor:
    """Per-token weights on values when accumulating the chunk-end state.

    Equals the last row of the chunk's masked decay matrix; if the final
    step itself terminates, the whole state dies, so every weight is
    zero.
    """
    n_steps = _validate_chunk_tokens(spec, chunk_len_tokens)
    steps = np.repeat(np.arange(n_steps), spec.n_agents)
    zeta = spec.kappa ** (n_steps - 1.0 - steps)
    terms = np.flatnonzero(spec.terminations[:n_steps])
    if terms.size:
        # tokens at or before the last termination never reach the chunk end
        zeta = np.where(steps > terms[-1], zeta, 0.0)
    return Tensor(zeta[:, None])


def chunk_carry_factor(spec: DecaySpec, timesteps_per_chunk: int) -> float:
    """Scalar carrying the previous chunk's state across this chunk.

    kappa to the power of the chunk's timestep count, or zero when any
    episode ends inside the chunk.
    """
    if timesteps_per_chunk < 1:
        raise ContractError("a chunk must cover at least one timestep")
    if any(spec.terminations[:timesteps_per_chunk]):
        return 0.0
    return float(spec.kappa**timesteps_per_chunk)


def artifacts_for_chunk(spec: DecaySpec) -> DecayArtifacts:
    """Build every decay object for one chunk described by `spec`."""
    return DecayArtifacts(
        d_encoder=build_encoder_decay(spec),
        d_decoder=build_decoder_decay(spec),
        xi=build_xi(spec, spec.n_tokens),
        zeta=build_zeta(spec, spec.n_tokens),
        chunk_carry_power=chunk_carry_factor(spec, spec.n_timesteps),
        spec=spec,
    )
