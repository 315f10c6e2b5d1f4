import configparser

import matplotlib
import numpy as np
import pytest

matplotlib.use("Agg")

from bootstrap import bootstrap_ci
from scaling import PlotInputError as ScalingError, main as scaling_main, plot_scaling
from training import PlotInputError as TrainingError, main as training_main, plot_training

METRICS_HEADER = (
    "update,env_steps,mean_return,std_return,steps_per_sec,peak_bytes,"
    "loss_total,loss_ppo,loss_value,entropy"
)


def make_run(tmp_path, name, seed, returns, env="unit", model="sable"):
    d = tmp_path / name
    d.mkdir()
    lines = [METRICS_HEADER]
    for i, r in enumerate(returns, start=1):
        lines.append(f"{i},{i * 100},{r},0.1,50,1000,0.5,0.2,0.3,0.7")
    (d / "metrics.csv").write_text("\n".join(lines) + "\n")
    cfg = configparser.ConfigParser()
    cfg["env"] = {"name": env}
    cfg["model"] = {"model": model}
    cfg["train"] = {"seed": str(seed)}
    with open(d / "resolved-config.ini", "w") as f:
        cfg.write(f)
    return str(d)


# ---------------------------------------------------------------------------
# bootstrap


def test_bootstrap_matches_direct_percentile_computation():
    rng = np.random.default_rng(42)
    fixture = rng.normal(size=(5, 7))
    lo, hi = bootstrap_ci(fixture, n_resamples=1000, alpha=0.05, seed=3)

    # direct recomputation: same resampling scheme, percentiles taken by hand
    idx = np.random.default_rng(3).integers(0, 5, size=(1000, 5))
    means = fixture[idx].mean(axis=1)
    np.testing.assert_array_equal(lo, np.percentile(means, 2.5, axis=0))
    np.testing.assert_array_equal(hi, np.percentile(means, 97.5, axis=0))
    assert (lo <= fixture.mean(axis=0)).all() and (fixture.mean(axis=0) <= hi).all()


def test_bootstrap_zero_width_for_identical_seeds():
    fixture = np.tile(np.arange(4.0), (5, 1))
    lo, hi = bootstrap_ci(fixture, n_resamples=200)
    np.testing.assert_array_equal(lo, hi)
    np.testing.assert_array_equal(lo, np.arange(4.0))


# ---------------------------------------------------------------------------
# training curves


def test_single_seed_line_without_band(tmp_path):
    run = make_run(tmp_path, "r0", 0, [1.0, 2.0, 3.0])
    fig, n_curves, n_bands = plot_training([run], str(tmp_path / "fig.png"))
    assert n_curves == 1 and n_bands == 0
    assert len(fig.axes[0].lines) == 1
    assert len(fig.axes[0].collections) == 0
    assert (tmp_path / "fig.png").exists()


def test_five_identical_seeds_zero_width_band(tmp_path):
    runs = [make_run(tmp_path, f"r{s}", s, [1.0, 2.0, 3.0]) for s in range(5)]
    fig, n_curves, n_bands = plot_training(runs, str(tmp_path / "fig.png"))
    assert n_curves == 1 and n_bands == 1
    band = fig.axes[0].collections[0]
    verts = band.get_paths()[0].vertices
    ys = {round(v, 12) for x, v in verts if x == 100.0}
    assert len(ys) == 1  # upper and lower edges coincide


def test_groups_by_configuration_not_seed(tmp_path):
    runs = [make_run(tmp_path, f"a{s}", s, [1.0, 2.0]) for s in range(3)]
    runs += [make_run(tmp_path, f"b{s}", s, [2.0, 3.0], model="mat-lite") for s in range(2)]
    fig, n_curves, n_bands = plot_training(runs, str(tmp_path / "fig.png"))
    assert n_curves == 2
    assert n_bands == 1  # only the 3-seed group gets a band


def test_inputs_are_read_only(tmp_path):
    run = make_run(tmp_path, "r0", 0, [1.0])
    before = (tmp_path / "r0" / "metrics.csv").read_bytes()
    plot_training([run], str(tmp_path / "fig.png"))
    assert (tmp_path / "r0" / "metrics.csv").read_bytes() == before


def test_malformed_csv_names_file_and_row(tmp_path):
    run = make_run(tmp_path, "r0", 0, [1.0, 2.0])
    path = tmp_path / "r0" / "metrics.csv"
    lines = path.read_text().splitlines()
    lines[2] = "2,200,not-a-number,0,0,0,0,0,0,0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TrainingError) as err:
        plot_training([run], str(tmp_path / "fig.png"))
    assert "metrics.csv" in str(err.value) and "row 3" in str(err.value)


def test_mismatched_eval_points_rejected(tmp_path):
    r1 = make_run(tmp_path, "r1", 1, [1.0, 2.0])
    r2 = make_run(tmp_path, "r2", 2, [1.0, 2.0, 3.0])
    with pytest.raises(TrainingError):
        plot_training([r1, r2], str(tmp_path / "fig.png"))


def test_training_script_exit_codes(tmp_path, capsys):
    run = make_run(tmp_path, "r0", 0, [1.0])
    assert training_main(["--runs", run, "--out", str(tmp_path / "f.png")]) == 0
    assert training_main(["--runs", str(tmp_path / "missing"), "--out", str(tmp_path / "f.png")]) == 2


# ---------------------------------------------------------------------------
# scaling figures


AGENTS_CSV = """model,agents_or_chunk,steps_per_sec,peak_bytes
retention,8,100,1000
retention,16,90,2000
attention,8,100,1500
attention,16,80,6000
"""


def test_two_model_csv_renders_two_series(tmp_path):
    path = tmp_path / "agents.csv"
    path.write_text(AGENTS_CSV)
    fig, n_series, n_sat = plot_scaling(str(path), str(tmp_path / "fig.png"))
    assert n_series == 2 and n_sat == 0
    ax = fig.axes[0]
    assert ax.get_yscale() == "log"
    assert len(ax.lines) == 2


def test_saturation_rows_truncate_with_marker(tmp_path):
    path = tmp_path / "agents.csv"
    path.write_text(AGENTS_CSV + "attention,32,nan,nan\n")
    fig, n_series, n_sat = plot_scaling(str(path), str(tmp_path / "fig.png"))
    assert n_series == 2 and n_sat == 1
    ax = fig.axes[0]
    assert len(ax.lines) == 3  # two series plus one saturation marker
    markers = [ln for ln in ax.lines if ln.get_marker() == "x"]
    assert len(markers) == 1
    assert markers[0].get_xdata()[0] == 32.0


CHUNKS_CSV = """model,agents_or_chunk,steps_per_sec,peak_bytes,loss
retention,8,10,1000,0.4217
retention,16,12,1800,0.4217
retention,32,13,3400,0.4217
"""


def test_chunk_sweep_shows_flat_loss_series(tmp_path):
    path = tmp_path / "chunks.csv"
    path.write_text(CHUNKS_CSV)
    fig, n_series, _ = plot_scaling(str(path), str(tmp_path / "fig.png"))
    assert n_series == 1
    assert len(fig.axes) == 2  # memory axis plus loss axis
    loss_line = fig.axes[1].lines[0]
    ys = loss_line.get_ydata()
    assert len(set(ys)) == 1  # chunk invariance keeps the series flat


def test_scaling_missing_columns_error(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("model,foo\nretention,1\n")
    with pytest.raises(ScalingError):
        plot_scaling(str(path), str(tmp_path / "fig.png"))


def test_scaling_script_exit_codes(tmp_path):
    path = tmp_path / "agents.csv"
    path.write_text(AGENTS_CSV)
    assert scaling_main(["--csv", str(path), "--out", str(tmp_path / "f.png")]) == 0
    assert scaling_main(["--csv", str(tmp_path / "none.csv"), "--out", str(tmp_path / "f.png")]) == 2
