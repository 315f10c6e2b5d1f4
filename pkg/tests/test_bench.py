import numpy as np
import pytest

from sable.bench import (
    AGENTS_HEADER,
    CHUNKS_HEADER,
    bench_agents,
    bench_chunks,
    loglog_slope,
    write_agents_csv,
    write_chunks_csv,
)
from sable.tensor import ContractError


@pytest.fixture(scope="module")
def agent_rows():
    return bench_agents(agent_counts=(8, 16, 32), steps=2, d_model=16)


def test_agent_sweep_row_shape(agent_rows):
    assert len(agent_rows) == 6
    kinds = {(r["model"], r["agents_or_chunk"]) for r in agent_rows}
    assert ("retention", 8) in kinds and ("attention", 32) in kinds
    for r in agent_rows:
        assert np.isfinite(r["peak_bytes"]) and r["peak_bytes"] > 0
        assert np.isfinite(r["steps_per_sec"])


def test_agent_sweep_memory_deterministic():
    a = bench_agents(agent_counts=(8, 16), steps=2, d_model=16)
    b = bench_agents(agent_counts=(8, 16), steps=2, d_model=16)
    for ra, rb in zip(a, b):
        assert ra["peak_bytes"] == rb["peak_bytes"]


def test_attention_to_retention_ratio_grows(agent_rows):
    ret = {r["agents_or_chunk"]: r["peak_bytes"] for r in agent_rows if r["model"] == "retention"}
    att = {r["agents_or_chunk"]: r["peak_bytes"] for r in agent_rows if r["model"] == "attention"}
    ratios = [att[n] / ret[n] for n in sorted(ret)]
    assert all(b >= a for a, b in zip(ratios, ratios[1:]))


def test_chunk_sweep_loss_invariant_and_memory_decreasing():
    rows = bench_chunks(chunk_steps=(4, 8, 16), rollout_length=16, d_model=8)
    losses = [r["loss"] for r in rows]
    assert max(losses) - min(losses) < 1e-8
    by_chunk = {r["agents_or_chunk"]: r["peak_bytes"] for r in rows}
    assert by_chunk[4] < by_chunk[16]


def test_chunk_sweep_rejects_nondividing_chunks():
    with pytest.raises(ContractError):
        bench_chunks(chunk_steps=(3,), rollout_length=16)


def test_csv_writers(tmp_path, agent_rows):
    apath = tmp_path / "agents.csv"
    write_agents_csv(agent_rows, str(apath))
    lines = apath.read_text().strip().splitlines()
    assert lines[0] == AGENTS_HEADER
    assert len(lines) == len(agent_rows) + 1

    rows = bench_chunks(chunk_steps=(4, 8), rollout_length=8, d_model=8)
    cpath = tmp_path / "chunks.csv"
    write_chunks_csv(rows, str(cpath))
    clines = cpath.read_text().strip().splitlines()
    assert clines[0] == CHUNKS_HEADER
    assert len(clines) == 3


def test_loglog_slope_on_powers():
    xs = [8, 16, 32, 64]
    assert loglog_slope(xs, [x**2 for x in xs]) == pytest.approx(2.0)
    assert loglog_slope(xs, [5.0 * x for x in xs]) == pytest.approx(1.0)
