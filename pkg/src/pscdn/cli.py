"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 training divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

from . import experiments as ex
from . import io as pio
from . import model as M
from .channel import generate_bits
from .tensor import ConfigurationError
from .training import DivergenceError, evaluate, time_inference

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cr(text: str) -> Fraction:
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid compression ratio {text!r}") from None
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError("compression ratio must lie in (0, 1)")
    return value


def _code_dim(cr: Fraction, K: int) -> int:
    C = cr * K
    if C.denominator != 1:
        raise ConfigurationError(f"CR {cr} does not give an integer code dimension for K={K}")
    return int(C)


def _config(args) -> pio.ExperimentConfig:
    cfg = pio.load_config(args.config) if getattr(args, "config", None) else pio.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "snr_db", None) is not None:
        cfg.eval_snr_db = args.snr_db
        cfg.train = replace(cfg.train, train_snr_db=args.snr_db)
    if getattr(args, "cr", None) is not None:
        cfg.C = _code_dim(args.cr, cfg.K)
    if getattr(args, "model", None):
        cfg.model = args.model
    if getattr(args, "epochs", None):
        cfg.train.epochs = args.epochs
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def cmd_generate_data(args) -> int:
    bits = generate_bits(args.count, args.K, args.seed if args.seed is not None else 0)
    pio.save_dataset(bits, args.out)
    print(f"wrote {args.count} samples (K={args.K}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.preset = "none"
    cfg.weights = None
    _emit(ex.run_experiment(cfg, progress=args.verbose))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, spec = pio.load_weights(args.weights)
    data = pio.load_dataset(args.data) if args.data else generate_bits(args.count, spec.K, 3000)
    seed = args.seed if args.seed is not None else 0
    snrs = [args.snr_db] if args.snr_db is not None else [0.0, 5.0, 10.0, 15.0, 20.0]
    records = [evaluate(spec, params, data, snr, trials_seed=seed) for snr in snrs]
    rows = [[spec.name, f"{spec.C}/{spec.K}", snr, r.val_nmse_linear, r.val_nmse_db, r.bit_error_rate]
            for snr, r in zip(snrs, records)]
    if args.out:
        pio.write_table_csv(["model", "cr", "snr_db", "nmse_linear", "nmse_db", "ber"], rows, args.out)
    for row in rows:
        print(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _config(args)
    cfg.preset = "table1"
    grid = ex.run_experiment(cfg, progress=args.verbose)
    _emit(grid)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    cfg.preset = "fig3-pscdn"
    rows = ex.run_experiment(cfg, progress=args.verbose)
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


def cmd_count_params(args) -> int:
    cfg = _config(args)
    spec = M.build_network(cfg.model, cfg.K, cfg.C, cfg.N)
    _emit({"model": spec.name, "K": spec.K, "C": spec.C, "N": spec.N,
           "parameters": M.count_parameters(spec)})
    return EXIT_OK


def cmd_time(args) -> int:
    if args.weights:
        params, spec = pio.load_weights(args.weights)
    else:
        cfg = _config(args)
        spec = M.build_network(cfg.model, cfg.K, cfg.C, cfg.N)
        params = M.init_parameters(spec, cfg.seed)
    data = generate_bits(args.count, spec.K, 3000)
    seconds = time_inference(spec, params, data, args.repetitions)
    _emit({"model": spec.name, "parameters": M.count_parameters(spec), "samples": args.count,
           "median_seconds": seconds})
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    result = ex.run_experiment(cfg, progress=args.verbose)
    _emit(result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pscdn", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--config", help="key=value experiment config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--snr-db", type=float, dest="snr_db")
        sp.add_argument("--cr", type=_cr, help="compression ratio C/K, e.g. 2/9")
        if model:
            sp.add_argument("--model", choices=M.MODEL_NAMES)
            sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("generate-data", help="write a packed-bit QPS dataset")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--K", type=int, default=M.DEFAULT_K)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("train", help="train one model through the feedback channel")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate saved weights over an SNR grid")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", help="dataset file (default: generated test set)")
    sp.add_argument("--count", type=int, default=100000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--snr-db", type=float, dest="snr_db")
    sp.add_argument("--out", help="CSV output file")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablation", help="BN ablation grid over the six plain variants (preset table1)")
    common(sp, model=False)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("sweep", help="PSCDN NMSE over CR x SNR (preset fig3-pscdn)")
    common(sp, model=False)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("count-params", help="trainable parameter count")
    common(sp)
    sp.set_defaults(func=cmd_count_params)

    sp = sub.add_parser("time", help="median inference time over a test set")
    common(sp)
    sp.add_argument("--weights")
    sp.add_argument("--count", type=int, default=100000)
    sp.add_argument("--repetitions", type=int, default=5)
    sp.set_defaults(func=cmd_time)

    sp = sub.add_parser("run", help="run an experiment config (any preset)")
    common(sp)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError) as exc:
        if isinstance(exc, pio.WeightsFormatError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.records and getattr(args, "out", None):
            Path(args.out).mkdir(parents=True, exist_ok=True)
            pio.export_metrics_csv(exc.records, Path(args.out) / "metrics_partial.csv")
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
