"""Command line: ``bntricks run|compare|probe-drift|gen-stream``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .harness import (
    compare_methods,
    drift_probe,
    format_table,
    load_checkpoint,
    resolve_out_dir,
    run_experiment,
)
from .scenario import ConfigError, export_stream_csv, make_gaussian_stream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bntricks", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one method over its seeds")
    run.add_argument("--config", required=True)
    run.add_argument("--seeds", type=_seed_list)
    run.add_argument("--out")
    run.add_argument("--method")
    run.add_argument("--buffer-size", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--drift-probe", action="store_true", help="also run the EMA drift probe per seed")
    run.add_argument("--save-checkpoint", action="store_true")

    cmp_ = sub.add_parser("compare", help="tabulate ACC/BWT of several configs")
    cmp_.add_argument("--configs", required=True, help="comma-separated config paths")
    cmp_.add_argument("--paired", action="store_true", help="require shared stream/seeds and report win counts")
    cmp_.add_argument("--seeds", type=_seed_list)
    cmp_.add_argument("--out", help="write per-config results and comparison.csv here")

    probe = sub.add_parser("probe-drift", help="EMA drift probe on a saved checkpoint")
    probe.add_argument("--config", required=True)
    probe.add_argument("--checkpoint", required=True)
    probe.add_argument("--batches", type=int)

    gen = sub.add_parser("gen-stream", help="write the configured stream as CSV")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    return parser


def _with_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seeds", None):
        overrides["experiment.seeds"] = args.seeds
    if getattr(args, "method", None):
        overrides["strategy.method"] = args.method
    if getattr(args, "buffer_size", None) is not None:
        overrides["experiment.buffer_size"] = args.buffer_size
    if getattr(args, "epochs", None) is not None:
        overrides["experiment.epochs"] = args.epochs
    if getattr(args, "drift_probe", False):
        overrides["probe.ema_drift"] = True
    if getattr(args, "save_checkpoint", False):
        overrides["probe.save_checkpoint"] = True
    if getattr(args, "batches", None) is not None:
        overrides["probe.drift_batches"] = args.batches
    return config.replace(**overrides) if overrides else config


def _cmd_run(args) -> int:
    config = _with_overrides(load_config(args.config), args)
    out = resolve_out_dir(config, args.out)
    record = run_experiment(config, out)
    for r in record.per_seed:
        if r.error:
            print(f"seed {r.seed}: FAILED {r.error}", file=sys.stderr)
    if record.failed:
        return EXIT_RUNTIME
    bwt = "n/a" if record.bwt_mean is None else f"{100 * record.bwt_mean:.2f}"
    print(f"{record.method}: ACC {100 * record.acc_mean:.2f} ± {100 * record.acc_std:.2f}  BWT {bwt}  -> {out}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    paths = [p for p in args.configs.split(",") if p.strip()]
    if not paths:
        raise ConfigError("--configs lists no files")
    configs = [_with_overrides(load_config(p), args) for p in paths]
    comp = compare_methods(configs, paired_seeds=args.paired, out_dir=args.out)
    print(format_table(comp))
    if args.out:
        out = Path(args.out)
        (out / "comparison.csv").write_text(comp.to_csv())
        if comp.wins is not None:
            (out / "wins.csv").write_text(comp.wins_csv())
    if any(r[1] is None for r in comp.rows):
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_probe(args) -> int:
    config = _with_overrides(load_config(args.config), args)
    run = load_checkpoint(config, args.checkpoint)
    print(json.dumps(drift_probe(config, run, run.result.seed), indent=2))
    return EXIT_OK


def _cmd_gen(args) -> int:
    config = load_config(args.config)
    export_stream_csv(make_gaussian_stream(config.stream), args.out)
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "probe-drift": _cmd_probe, "gen-stream": _cmd_gen}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
