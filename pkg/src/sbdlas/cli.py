"""Command-line entry point.

    sbdlas run <preset|config.yaml> [--alpha X] [--seed N] [--scale desk|paper] [--out DIR]
    sbdlas report <run-dir>

A config file is flat YAML. It names a base preset with ``experiment`` (and
optionally ``scale``) and may override any :class:`ExperimentConfig` field.
Values resolve as command line, then file, then preset default.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import io
from .experiments import EXPERIMENTS, SCALES, ConfigError, PhaseError, format_report, preset, run_experiment


def load_config_file(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat mapping of keys to values")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested sections are not supported ({nested})")
    return data


def resolve_config(target: str, scale=None, alpha=None, seed=None, out=None):
    """Build the config for ``target`` (preset name or file), applying flag overrides."""
    file_values = {}
    if target in EXPERIMENTS:
        name = target
    else:
        path = Path(target)
        if not path.is_file():
            raise ConfigError(f"{target!r} is neither a preset ({', '.join(EXPERIMENTS)}) nor a config file")
        file_values = load_config_file(path)
        name = file_values.pop("experiment", None)
        if name is None:
            raise ConfigError(f"{path}: missing 'experiment' key")
    file_scale = file_values.pop("scale", "desk")
    overrides = dict(file_values)
    if alpha is not None:
        overrides["alphas"] = [alpha]
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out"] = str(out)
    return preset(name, scale or file_scale, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbdlas", description="Surrogate-accelerated Bayesian inversion experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per iteration")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a preset or a config file")
    run.add_argument("target", help=f"preset ({', '.join(EXPERIMENTS)}) or path to a YAML config")
    run.add_argument("--alpha", type=float, help="single step ratio, replaces the configured list")
    run.add_argument("--seed", type=int, help="global seed")
    run.add_argument("--scale", choices=SCALES, help="preset scale (default: desk)")
    run.add_argument("--out", type=Path, help="output directory")

    rep = sub.add_parser("report", help="print tables from a finished run")
    rep.add_argument("run_dir", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run":
        try:
            cfg = resolve_config(args.target, args.scale, args.alpha, args.seed, args.out)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        out = Path(cfg.out) if args.out is not None else Path(cfg.out) / f"{cfg.experiment}-{cfg.scale}-seed{cfg.seed}"
        try:
            manifest = run_experiment(cfg, out)
        except PhaseError as exc:
            print(f"run failed during {exc.phase}: {exc.__cause__}", file=sys.stderr)
            return 1
        print(format_report(manifest))
        print(f"artifacts written to {out}")
        return 0

    manifest_path = args.run_dir / "manifest.json"
    if not manifest_path.is_file():
        print(f"no manifest.json in {args.run_dir}", file=sys.stderr)
        return 2
    print(format_report(io.read_json(manifest_path)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
