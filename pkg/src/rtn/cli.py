"""Command-line entry point: ``rtn <subcommand> ...``.

Exit status is 0 on success, 2 for a missing or invalid config file, 3 for a
corrupt bag archive and 1 for anything else. Progress goes to stderr; results
go to files under ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .autodiff.checkpoint import FormatError, atomic_write_bytes
from .experiment.config import ConfigError, ExperimentConfig, defaults_help, load_config, render_config
from .experiment.report import index_distribution, read_episode_log
from .experiment.runner import (
    ABLATION_AXES,
    collect,
    dataset_for,
    run_ablation_grid,
    run_folds,
    write_run_outputs,
)
from .instances.archive import load_bags, save_bags

log = logging.getLogger("rtn")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ARCHIVE = 0, 1, 2, 3


class MissingConfig(Exception):
    pass


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    here = Path(__file__).resolve().parent
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"{__version__}+{described}" if described else __version__


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seed(cli_seed: int | None) -> int | None:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("RTN_SEED")
    if env is None or env.strip() == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"RTN_SEED must be an integer, got {env!r}") from None


def read_config(path: str | None, seed: int | None) -> ExperimentConfig:
    if path is not None and not Path(path).is_file():
        raise MissingConfig(f"config file not found: {path}")
    config = load_config(path)
    if seed is not None:
        config = config.replace(seed=seed)
        config.synthetic.seed = seed
    return config


def write_manifest(path: Path, args: argparse.Namespace, config: ExperimentConfig, inputs: Sequence[str]) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": version_string(),
        "seed": config.seed,
        "config_hash": config.digest(),
        "config": render_config(config),
        "inputs": {str(p): sha256_file(p) for p in inputs},
    }
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _bags(args, config):
    if getattr(args, "data", None):
        return load_bags(args.data), [args.data]
    log.info("no --data given; generating the synthetic dataset from the config")
    return dataset_for(config), []


def _inputs(args, extra: Sequence[str]) -> list[str]:
    return ([args.config] if args.config else []) + list(extra)


# -- subcommands --------------------------------------------------------------


def cmd_generate(args) -> int:
    config = read_config(args.config, resolve_seed(args.seed))
    bags = dataset_for(config)
    out = Path(args.out)
    save_bags(out, bags)
    write_manifest(Path(f"{out}.run.json"), args, config, _inputs(args, []))
    log.info("wrote %d bags to %s", len(bags), out)
    return EXIT_OK


def _report_lines(result) -> list[str]:
    r = result.report
    lines = [
        f"accuracy {r.accuracy:.4f} (fold mean {r.accuracy_mean:.4f} +- {r.accuracy_std:.4f})",
        f"auc {'n/a' if r.auc is None else f'{r.auc:.4f}'}",
        f"full-bag accuracy {r.full_bag_accuracy:.4f}",
    ]
    if r.negative_recall is not None:
        lines.append(f"negative recall {r.negative_recall:.4f}")
    if result.random_report is not None:
        q = result.random_report
        lines.append(f"random discards: accuracy {q.accuracy:.4f} auc {'n/a' if q.auc is None else f'{q.auc:.4f}'}")
    return lines


def _finish(args, config, folds, out: Path, inputs) -> int:
    result = collect(config, folds)
    write_run_outputs(result, out)
    atomic_write_bytes(out / "summary.txt", ("\n".join(_report_lines(result)) + "\n").encode())
    write_manifest(out / "manifest.json", args, config, inputs)
    print("\n".join(_report_lines(result)))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = read_config(args.config, resolve_seed(args.seed))
    bags, data_inputs = _bags(args, config)
    # Held-out scoring after stage 1 uses random discards of m instances.
    eval_config = config.replace(discard_strategy="random")
    folds = run_folds(eval_config, bags, out_dir=args.out, stages=("tmil", "eval"), jobs=args.jobs)
    return _finish(args, eval_config, folds, Path(args.out), _inputs(args, data_inputs))


def cmd_train_agent(args) -> int:
    config = read_config(args.config, resolve_seed(args.seed))
    if config.m < 1 or config.discard_strategy != "prid":
        raise ConfigError("train-agent needs m >= 1 and discard_strategy = prid")
    bags, data_inputs = _bags(args, config)
    folds = run_folds(
        config, bags, out_dir=args.out, ckpt_dir=args.checkpoints, stages=("agent", "eval"), jobs=args.jobs
    )
    ckpts = sorted(str(p) for p in Path(args.checkpoints).glob("fold*/tmil.ckpt"))
    return _finish(args, config, folds, Path(args.out), _inputs(args, data_inputs + ckpts))


def cmd_evaluate(args) -> int:
    config = read_config(args.config, resolve_seed(args.seed))
    if args.strategy:
        config = config.replace(discard_strategy=args.strategy)
    bags, data_inputs = _bags(args, config)
    folds = run_folds(config, bags, out_dir=None, ckpt_dir=args.checkpoints, stages=("eval",), jobs=args.jobs)
    ckpts = sorted(str(p) for p in Path(args.checkpoints).glob("fold*/*.ckpt"))
    return _finish(args, config, folds, Path(args.out), _inputs(args, data_inputs + ckpts))


def cmd_ablate(args) -> int:
    config = read_config(args.config, resolve_seed(args.seed))
    values = [v.strip() for v in args.values.split(",") if v.strip()] if args.values else None
    bags, data_inputs = (None, []) if args.axis == "cube_size" else _bags(args, config)
    table = run_ablation_grid(config, args.axis, values, bags=bags, out_dir=args.out, jobs=args.jobs)
    write_manifest(Path(args.out) / "manifest.json", args, config, _inputs(args, data_inputs))
    print(table.format())
    return EXIT_OK


def cmd_report(args) -> int:
    lines = Path(args.episodes).read_text().splitlines()
    records = read_episode_log(lines)
    if not records:
        raise ValueError(f"{args.episodes}: no episodes")
    dist = index_distribution(records, n=args.n)
    out = Path(args.out)
    text = dist.render()
    atomic_write_bytes(out / "index_report.txt", (text + "\n").encode())
    counts = {f"{o}/{f}": c.tolist() for (o, f), c in dist.counts.items()}
    payload = {"n": dist.n, "episodes": dist.episodes, "counts": counts}
    atomic_write_bytes(out / "index_counts.json", (json.dumps(payload, sort_keys=True) + "\n").encode())
    manifest = {
        "command": "report",
        "argv": sys.argv[1:],
        "version": version_string(),
        "inputs": {args.episodes: sha256_file(args.episodes)},
    }
    atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    print(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtn",
        description="Instance-discarding transformer for bag-level quality classification.",
        epilog="config defaults (file format: 'key = value' lines under [section] headers):\n"
        + defaults_help()
        + "\n\nRTN_SEED sets the seed when --seed is absent."
        + "\nexit status: 0 ok, 1 error, 2 missing or invalid config, 3 corrupt bag archive",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"rtn {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, data=True, jobs=True):
        p.add_argument("--config", help="experiment config file (default: built-in defaults)")
        p.add_argument("--seed", type=int, help="seed override (falls back to RTN_SEED, then the config)")
        if data:
            p.add_argument("--data", help="bag archive; generated from the config when omitted")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel fold workers (default: 1)")

    p = sub.add_parser("generate", help="write a synthetic bag archive")
    p.add_argument("--config", "--spec", dest="config", help="config file whose [synthetic]/[signal] sections apply")
    p.add_argument("--seed", type=int, help="dataset seed (falls back to RTN_SEED, then the config)")
    p.add_argument("--out", required=True, help="archive path; <out>.manifest and <out>.run.json are written too")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="stage 1: train T-MIL on random instance subsets per fold")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-agent", help="stage 2: train the discarding agent against frozen T-MIL checkpoints")
    common(p)
    p.add_argument("--checkpoints", required=True, help="directory written by pretrain")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("evaluate", help="score held-out folds with saved checkpoints")
    common(p)
    p.add_argument("--checkpoints", required=True, help="directory written by train-agent (or pretrain for --strategy random)")
    p.add_argument("--strategy", choices=("prid", "random"), help="override discard_strategy")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="one full two-stage run per value along an axis")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--values", help="comma-separated values (defaults: m 4,9,14; pooling pma,avg,max; cube_size 15,20,30)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="index histograms of reserved and discarded instances from an episode log")
    p.add_argument("--episodes", required=True, help="episode log (one episode per line)")
    p.add_argument("--n", type=int, help="bag size, when the log lines do not carry n=")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except MissingConfig as exc:
        print(f"rtn: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"rtn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"rtn: corrupt archive: {exc}", file=sys.stderr)
        return EXIT_ARCHIVE
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for every failure
        print(f"rtn: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
