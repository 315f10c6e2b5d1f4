"""Command-line entry point: train, eval, bench, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
error. Every run writes into a fresh timestamped directory; existing
outputs are never touched.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from sable.config import ConfigError, load_config, write_resolved
from sable.net import CheckpointError
from sable.tensor import ContractError


def _fresh_run_dir(base: str, label: str) -> str:
    os.makedirs(base, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for counter in range(10000):
        suffix = f"-{counter}" if counter else ""
        path = os.path.join(base, f"{label}-{stamp}{suffix}")
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {base}")


def cmd_train(args) -> int:
    from sable.trainer import train

    cfg = load_config(args.config, seed_override=args.seed)
    run_dir = _fresh_run_dir(args.out, "train")
    write_resolved(cfg, os.path.join(run_dir, "resolved-config.ini"))
    net = cfg.build_net()
    print(f"training {cfg.model_label()} on {cfg.env_name} -> {run_dir}")
    rows = train(net, cfg.env_name, cfg.train, out_dir=run_dir)
    if rows:
        last = rows[-1]
        print(f"final mean return {last['mean_return']:.4f} +- {last['std_return']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from sable.trainer import evaluate_policy

    cfg = load_config(args.config)
    net = cfg.build_net()
    net.load_checkpoint(args.checkpoint)
    g_mean, g_std = evaluate_policy(net, cfg.env_name, args.episodes, args.seed, greedy=True)
    s_mean, s_std = evaluate_policy(net, cfg.env_name, args.episodes, args.seed, greedy=False)
    print(f"greedy     return over {args.episodes} episodes: {g_mean:.4f} +- {g_std:.4f}")
    print(f"stochastic return over {args.episodes} episodes: {s_mean:.4f} +- {s_std:.4f}")
    return 0


def cmd_bench(args) -> int:
    from sable import bench

    if args.config:
        cfg = load_config(args.config)
        opts = cfg.bench
    else:
        from sable.config import BENCH_DEFAULTS

        opts = dict(BENCH_DEFAULTS)
    run_dir = _fresh_run_dir(args.out, "bench")
    if args.sweep == "agents":
        counts = tuple(int(x) for x in str(opts["agent_counts"]).split(","))
        rows = bench.bench_agents(agent_counts=counts, d_model=opts["d_model"], steps=opts["steps"])
        path = os.path.join(run_dir, "agents.csv")
        bench.write_agents_csv(rows, path)
    else:
        chunks = tuple(int(x) for x in str(opts["chunk_steps"]).split(","))
        rows = bench.bench_chunks(chunk_steps=chunks, rollout_length=opts["rollout_length"])
        path = os.path.join(run_dir, "chunks.csv")
        bench.write_chunks_csv(rows, path)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_verify(args) -> int:
    from sable.verify import SUITES, run_suites

    names = [args.suite] if args.suite else None
    if args.suite and args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; available: {', '.join(SUITES)}", file=sys.stderr)
        return 2
    results = run_suites(names)
    failed = False
    for name, ok in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        failed |= not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sable", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default="runs")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--episodes", type=int, default=32)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(fn=cmd_eval)

    p_bench = sub.add_parser("bench", help="run a scaling sweep")
    p_bench.add_argument("--sweep", choices=("agents", "chunks"), required=True)
    p_bench.add_argument("--config", default=None)
    p_bench.add_argument("--out", default="runs")
    p_bench.set_defaults(fn=cmd_bench)

    p_verify = sub.add_parser("verify", help="run the built-in oracle suites")
    p_verify.add_argument("--suite", default=None)
    p_verify.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
