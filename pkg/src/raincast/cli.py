"""Command-line interface over the pipeline stages.

Every subcommand works inside one run directory (``--out``, defaulting to
the ``RAINCAST_CACHE`` environment variable). Options resolve in layers:
built-in defaults, then ``--config`` file values, then explicit flags.

Exit codes: 0 success, 2 validation or configuration failure, 3 numeric
failure during training or inference.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import RaincastError
from .pipeline import resolve_config, run_pipeline, run_stage
from .profiles import load_config_file

CACHE_ENV = "RAINCAST_CACHE"


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--out", help=f"run directory (default: ${CACHE_ENV} or ./raincast_out)")
    parser.add_argument("--config", help="configuration file with nested overrides")
    parser.add_argument("--profile", help="run profile name (desk or full)")
    parser.add_argument("--seed", type=int, help="base seed for every random stream")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raincast",
        description="Two-stage ensemble precipitation forecasting at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic input series")
    _add_common(p)
    p.add_argument("--n-times", type=int, help="number of timesteps")
    p.add_argument("--n-storms", type=int, help="number of synthetic storms")

    p = sub.add_parser("preprocess", help="compute normalization statistics")
    _add_common(p)

    p = sub.add_parser("train-det", help="train the mean-precipitation model")
    _add_common(p)
    p.add_argument("--experiment", help="model variant (baseline, d1..d4)")
    p.add_argument("--steps", type=int, help="training steps")

    p = sub.add_parser("train-vae", help="train the residual autoencoder")
    _add_common(p)
    p.add_argument("--steps", type=int, help="training steps")

    p = sub.add_parser("train-diffusion", help="train the latent denoiser")
    _add_common(p)
    p.add_argument("--steps", type=int, help="training steps")

    p = sub.add_parser("infer", help="sample ensemble members and products")
    _add_common(p)
    p.add_argument("--members", type=int, help="ensemble size")
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--eval-times", type=int, help="number of forecast times")

    p = sub.add_parser("pm", help="rebuild probability-matched products")
    _add_common(p)

    p = sub.add_parser("evaluate", help="score forecasts; write table and figures")
    _add_common(p)
    p.add_argument("--thresholds", help="comma-separated thresholds in mm")

    p = sub.add_parser("pipeline", help="run every stage in order")
    _add_common(p)
    p.add_argument("--ablation", action="store_true", help="also run the model-variant table")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    """Nested override layer from explicitly passed flags."""
    out: dict = {}
    if args.profile is not None:
        out["profile"] = args.profile
    if args.seed is not None:
        out["seed"] = args.seed

    def put(section, key, value):
        if value is not None:
            out.setdefault(section, {})[key] = value

    cmd = args.command
    if cmd == "synth-data":
        put("data", "n_times", args.n_times)
        put("data", "n_storms", args.n_storms)
    elif cmd == "train-det":
        put("det", "experiment", args.experiment)
        put("det", "steps", args.steps)
    elif cmd == "train-vae":
        put("vae", "steps", args.steps)
    elif cmd == "train-diffusion":
        put("diffusion", "steps", args.steps)
    elif cmd == "infer":
        put("infer", "members", args.members)
        put("infer", "steps", args.steps)
        put("infer", "eval_times", args.eval_times)
    elif cmd == "evaluate" and args.thresholds is not None:
        out.setdefault("evaluate", {})["thresholds"] = [
            float(t) for t in args.thresholds.split(",") if t.strip()
        ]
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out or os.environ.get(CACHE_ENV) or "raincast_out")
    try:
        layers = []
        if args.config:
            layers.append(load_config_file(args.config))
        layers.append(_overrides(args))
        cfg = resolve_config(*layers)
        if args.command == "pipeline":
            manifest = run_pipeline(cfg, out_dir, ablation=args.ablation)
            print(f"pipeline complete: {manifest}")
        else:
            artifacts = run_stage(args.command, cfg, out_dir)
            for path in artifacts:
                print(path)
    except RaincastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
