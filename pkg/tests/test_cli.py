import numpy as np
import pytest

import sable.decay
from sable.cli import main
from sable.config import ConfigError, load_config, write_resolved
from sable.verify import SUITES, run_suites


UNIT_CONFIG = """
[env]
name = unit

[train]
rollout_length = 6
updates = 2
epochs = 1
minibatches = 1
n_envs = 2
eval_every = 1
eval_episodes = 2
seed = 7

[model]
d_model = 8
n_heads = 2
"""


@pytest.fixture
def unit_config(tmp_path):
    path = tmp_path / "unit.ini"
    path.write_text(UNIT_CONFIG)
    return str(path)


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)])
    assert code == 2
    assert "nope.ini" in capsys.readouterr().err


def test_unknown_key_is_hard_error(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[env]\nname = unit\n\n[train]\nlerning_rate = 0.1\n")
    with pytest.raises(ConfigError) as err:
        load_config(str(path))
    assert "lerning_rate" in str(err.value)
    assert "bad.ini:5" in str(err.value)


def test_unknown_section_is_hard_error(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[env]\nname = unit\n\n[mystery]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_resolved_snapshot_contains_defaults(tmp_path, unit_config):
    cfg = load_config(unit_config)
    out = tmp_path / "resolved.ini"
    write_resolved(cfg, str(out))
    text = out.read_text()
    assert "gamma = 0.99" in text
    assert "gae_lambda = 0.9" in text
    assert "rollout_length = 6" in text  # explicit value wins over the default
    # reloading the snapshot reproduces the config
    cfg2 = load_config(str(out))
    assert cfg2.train == cfg.train
    assert cfg2.model == cfg.model


def test_default_rollout_length_is_128():
    from sable.trainer import TrainConfig

    assert TrainConfig().rollout_length == 128
    assert TrainConfig().gamma == 0.99
    assert TrainConfig().gae_lambda == 0.9


def test_train_subcommand_writes_run_dir(tmp_path, unit_config):
    out = tmp_path / "runs"
    assert main(["train", "--config", unit_config, "--out", str(out)]) == 0
    run_dirs = list(out.iterdir())
    assert len(run_dirs) == 1
    files = {p.name for p in run_dirs[0].iterdir()}
    assert {"metrics.csv", "resolved-config.ini", "checkpoints"} <= files


def test_train_reruns_use_fresh_dirs_and_match(tmp_path, unit_config):
    out = tmp_path / "runs"
    assert main(["train", "--config", unit_config, "--out", str(out)]) == 0
    assert main(["train", "--config", unit_config, "--out", str(out)]) == 0
    dirs = sorted(out.iterdir())
    assert len(dirs) == 2
    rows = []
    for d in dirs:
        lines = (d / "metrics.csv").read_text().strip().splitlines()
        # mask the timing column (index 4), the one legitimately varying field
        rows.append([",".join(c for i, c in enumerate(line.split(",")) if i != 4) for line in lines])
    assert rows[0] == rows[1]


def test_eval_subcommand(tmp_path, unit_config, capsys):
    out = tmp_path / "runs"
    main(["train", "--config", unit_config, "--out", str(out)])
    run_dir = next(out.iterdir())
    ckpt = run_dir / "checkpoints" / "final.ckpt"
    code = main(["eval", "--checkpoint", str(ckpt), "--config", unit_config, "--episodes", "4"])
    assert code == 0
    text = capsys.readouterr().out
    assert "greedy" in text and "stochastic" in text


def test_eval_default_episode_count_is_32():
    from sable.cli import build_parser

    args = build_parser().parse_args(["eval", "--checkpoint", "x", "--config", "y"])
    assert args.episodes == 32


def test_eval_checkpoint_config_mismatch(tmp_path, unit_config, capsys):
    out = tmp_path / "runs"
    main(["train", "--config", unit_config, "--out", str(out)])
    ckpt = next(out.iterdir()) / "checkpoints" / "final.ckpt"
    other = tmp_path / "other.ini"
    other.write_text(UNIT_CONFIG.replace("d_model = 8", "d_model = 16"))
    code = main(["eval", "--checkpoint", str(ckpt), "--config", str(other)])
    assert code == 2
    assert "shape" in capsys.readouterr().err


def test_bench_subcommand_agents(tmp_path):
    cfg = tmp_path / "bench.ini"
    cfg.write_text("[env]\nname = unit\n\n[bench]\nagent_counts = 8,16\nsteps = 2\nd_model = 8\n")
    out = tmp_path / "runs"
    assert main(["bench", "--sweep", "agents", "--config", str(cfg), "--out", str(out)]) == 0
    csv = next(out.iterdir()) / "agents.csv"
    lines = csv.read_text().strip().splitlines()
    assert len(lines) == 5  # header + 2 counts x 2 models


def test_verify_subcommand_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "PASS appendix-d33-matrices" in out
    for name in SUITES:
        assert name in out


def test_verify_detects_injected_decay_corruption(monkeypatch, capsys):
    import sable.verify

    original = sable.decay.build_decoder_decay

    def flipped(spec):
        import dataclasses

        bad = dataclasses.replace(spec, kappa=min(1.0, 1.0 - spec.kappa + 1e-3))
        return original(bad)

    monkeypatch.setattr(sable.decay, "build_decoder_decay", flipped)
    results = run_suites(["appendix-d33-matrices"])
    assert results["appendix-d33-matrices"] is False


def test_verify_unknown_suite_exits_2(capsys):
    assert main(["verify", "--suite", "not-a-suite"]) == 2
