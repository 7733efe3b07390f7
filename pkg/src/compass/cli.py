"""Command-line entry point: train / eval / ablate / plot.

All outputs are deterministic for a fixed (config, seed, subcommand):
CSV files carry a metadata comment naming the tool version and config
hash, floats are serialized with repr, and nothing timestamped is written.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

import compass
from compass.config import Config, dump_config, load_config
from compass.errors import ConfigError
from compass.metrics import EpisodeMetrics, EvaluationResult, evaluate
from compass.svgplot import render_uncertainty_curves

PLANNERS = ("compass", "random", "coverage", "auction", "greedy")
VARIANTS = ("full", "no_presence", "no_spatial", "no_temporal")


def _meta_line(cfg_hash: str) -> str:
    return f"# tool=artifact-{compass.__version__} config_hash={cfg_hash}"


def _write_csv(path: str, meta: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(meta + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in row])


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg.sim.seed = args.seed
    if getattr(args, "critic", None) is not None:
        cfg.net.critic = args.critic
    if getattr(args, "variant", None) is not None:
        cfg.net.variant = args.variant
    cfg.validate()
    return cfg


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("COMPASS_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"COMPASS_THREADS must be an integer, got {env!r}")
    return 1


def _build_net(cfg: Config, seed: int, checkpoint: str | None):
    import torch

    from compass.policy_net import PolicyNetwork

    net = PolicyNetwork(cfg, dtype=torch.float32, init_seed=seed)
    if checkpoint:
        net.load_checkpoint(checkpoint)
    else:
        print("note: no checkpoint given; using a freshly initialized policy",
              file=sys.stderr)
    net.eval()
    return net


def _write_eval_outputs(out_dir: str, cfg: Config, result: EvaluationResult,
                        seed: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = _meta_line(cfg.hash())
    s = cfg.sim
    rows = []
    for i, m in enumerate(result.runs):
        rows.append([result.planner, s.K, s.M, s.N, s.B, seed, i,
                     m.avg_unc, m.avg_jsd, m.min_visits, m.avg_visits, m.rmse])
    _write_csv(os.path.join(out_dir, "results.csv"), meta,
               ["planner", "K", "M", "N", "B", "seed", "run",
                "avg_unc", "avg_jsd", "min_visits", "avg_visits", "rmse"], rows)

    agg = result.aggregate()
    agg_rows = [[result.planner, name, mean, std]
                for name, (mean, std) in agg.items()]
    _write_csv(os.path.join(out_dir, "aggregate.csv"), meta,
               ["planner", "metric", "mean", "std"], agg_rows)

    n_runs, n_steps = result.traces.shape
    trace_rows = [[t + 1] + [float(result.traces[r, t]) for r in range(n_runs)]
                  for t in range(n_steps)]
    _write_csv(os.path.join(out_dir, f"trace_{result.planner}.csv"), meta,
               ["step"] + [f"run{r}" for r in range(n_runs)], trace_rows)


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    threads = _resolve_threads(args)
    seed = cfg.sim.seed
    net = None
    if args.planner == "compass":
        import torch
        torch.set_num_threads(threads)
        net = _build_net(cfg, seed, args.checkpoint)
    if args.dump_episodes:
        result, sims = evaluate(args.planner, cfg, args.runs, seed, net=net,
                                threads=threads, keep_sims=True)
        ep_dir = os.path.join(args.out, "episodes")
        os.makedirs(ep_dir, exist_ok=True)
        for i, sim in enumerate(sims):
            sim.export_trace_jsonl(os.path.join(ep_dir, f"run_{i}.jsonl"))
    else:
        result = evaluate(args.planner, cfg, args.runs, seed, net=net,
                          threads=threads)
    _write_eval_outputs(args.out, cfg, result, seed)
    return 0


def cmd_train(args) -> int:
    import torch

    from compass.trainer import train

    cfg = _load_cfg(args)
    threads = _resolve_threads(args)
    torch.set_num_threads(threads)
    os.makedirs(args.out, exist_ok=True)
    dump_config(cfg, os.path.join(args.out, "config_resolved.json"))
    train(cfg, args.out, master_seed=cfg.sim.seed, iterations=args.iters,
          verbose=args.verbose, header_lines=[_meta_line(cfg.hash())])
    return 0


def cmd_ablate(args) -> int:
    import torch

    from compass.trainer import train

    cfg = _load_cfg(args)
    threads = _resolve_threads(args)
    torch.set_num_threads(threads)
    os.makedirs(args.out, exist_ok=True)
    dump_config(cfg, os.path.join(args.out, "config_resolved.json"))
    net, _ = train(cfg, args.out, master_seed=cfg.sim.seed, iterations=args.iters,
                   verbose=args.verbose, header_lines=[_meta_line(cfg.hash())])
    net.eval()
    result = evaluate("compass", cfg, args.runs, cfg.sim.seed, net=net,
                      threads=threads)
    _write_eval_outputs(args.out, cfg, result, cfg.sim.seed)
    agg = result.aggregate()
    _write_csv(os.path.join(args.out, "ablation.csv"), _meta_line(cfg.hash()),
               ["variant", "uncertainty", "rmse", "visits"],
               [[cfg.net.variant, agg["avg_unc"][0], agg["rmse"][0],
                 agg["avg_visits"][0]]])
    return 0


def _read_trace_csv(path: str) -> tuple[np.ndarray, np.ndarray, str]:
    """Returns (mean, std) over the run columns plus the file's config hash."""
    cfg_hash = "unknown"
    rows = []
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line.split():
                    if tok.startswith("config_hash="):
                        cfg_hash = tok.split("=", 1)[1]
                continue
            cells = line.split(",")
            if header is None:
                header = cells
                continue
            rows.append([float(c) for c in cells[1:]])
    data = np.asarray(rows)
    return data.mean(axis=1), data.std(axis=1), cfg_hash


def cmd_plot(args) -> int:
    curves = {}
    cfg_hash = "unknown"
    for name in sorted(os.listdir(args.traces)):
        if name.startswith("trace_") and name.endswith(".csv"):
            planner = name[len("trace_"):-len(".csv")]
            mean, std, cfg_hash = _read_trace_csv(os.path.join(args.traces, name))
            curves[planner] = (mean, std)
    if not curves:
        raise ConfigError(f"no trace_*.csv files found in {args.traces}")
    svg = render_uncertainty_curves(
        curves, subtitle=f"tool=artifact-{compass.__version__} config_hash={cfg_hash}")
    svg = svg.replace(
        "<svg ",
        f"<!-- tool=artifact-{compass.__version__} config_hash={cfg_hash} -->\n<svg ", 1)
    with open(args.out, "w") as fh:
        fh.write(svg + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compass",
        description="Multi-agent persistent monitoring: train, evaluate, ablate, plot.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_seed=True):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        if with_seed:
            p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="worker threads (fallback: COMPASS_THREADS, default 1)")

    p_train = sub.add_parser("train", help="train the attention policy with PPO")
    common(p_train)
    p_train.add_argument("--iters", type=int, help="override iteration count")
    p_train.add_argument("--critic", choices=("central", "decentralized"))
    p_train.add_argument("--verbose", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a planner over seeded episodes")
    common(p_eval)
    p_eval.add_argument("--planner", choices=PLANNERS, required=True)
    p_eval.add_argument("--runs", type=int, default=10)
    p_eval.add_argument("--checkpoint", help="policy checkpoint for --planner compass")
    p_eval.add_argument("--critic", choices=("central", "decentralized"))
    p_eval.add_argument("--dump-episodes", action="store_true",
                        help="write per-episode JSON-lines traces")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train + evaluate one network ablation")
    common(p_abl)
    p_abl.add_argument("--variant", choices=VARIANTS, required=True)
    p_abl.add_argument("--iters", type=int, help="override iteration count")
    p_abl.add_argument("--runs", type=int, default=10)
    p_abl.add_argument("--critic", choices=("central", "decentralized"))
    p_abl.add_argument("--verbose", action="store_true")
    p_abl.set_defaults(func=cmd_ablate)

    p_plot = sub.add_parser("plot", help="render uncertainty curves from trace CSVs")
    p_plot.add_argument("--traces", required=True, help="directory of trace_*.csv files")
    p_plot.add_argument("--out", required=True, help="output SVG path")
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


run = main

if __name__ == "__main__":
    raise SystemExit(main())
