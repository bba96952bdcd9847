"""Command line: ``snfkit train|sample|eval|verify``.

Exit codes: 0 success, 1 failed verification checks, 2 bad input (config,
checkpoint, CSV or suite name), 3 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation
from .chain import path_log_weight, sample_forward, write_paths_csv
from .config import build_chain, load_config, parse_config
from .densities import ConfigError
from .evaluation import energy_distance, summary_moments
from .training import TrainingDiverged, train

log = logging.getLogger("snfkit")

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _setup_logging():
    level = os.environ.get("SNFKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _remove(*paths):
    for p in paths:
        if p and os.path.exists(p):
            os.remove(p)


def _write_atomic(path, write):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    finally:
        _remove(tmp)


def cmd_train(args):
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise InputError(f"config error at {exc.key}: {exc}") from None
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.output["dir"]
    os.makedirs(out_dir, exist_ok=True)
    resolved = os.path.join(out_dir, "config.yaml")
    metrics = os.path.join(out_dir, "metrics.csv")
    checkpoint = os.path.join(out_dir, "checkpoint.json")
    _write_atomic(resolved, lambda fh: fh.write(cfg.dump()))
    chain = build_chain(cfg)
    try:
        train(chain, cfg.train_config(), metrics_path=metrics, checkpoint_path=checkpoint,
              checkpoint_extra={"config": cfg.to_dict()})
    except TrainingDiverged as exc:
        _remove(metrics, f"{checkpoint}.tmp")
        print(f"training diverged at {exc}; last checkpoint kept at {checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except BaseException:
        _remove(metrics, checkpoint, f"{checkpoint}.tmp", resolved)
        raise
    if cfg.output["write_paths"]:
        path = sample_forward(chain, cfg.train["eval_samples"], np.random.default_rng([cfg.seed, 1]))
        path_log_weight(chain, path)
        paths_csv = os.path.join(out_dir, "paths.csv")
        write_paths_csv(path, f"{paths_csv}.tmp")
        os.replace(f"{paths_csv}.tmp", paths_csv)
    log.info("wrote %s, %s and %s", metrics, checkpoint, resolved)
    return EXIT_OK


def load_chain(checkpoint):
    """Rebuild a chain from the config embedded in a checkpoint and load its parameters."""
    try:
        payload = ad.read_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint: {exc}") from None
    if "config" not in payload:
        raise InputError(f"{checkpoint}: checkpoint has no embedded config")
    try:
        cfg = parse_config(payload["config"])
        chain = build_chain(cfg)
        chain.store.load_dict(payload)
    except ConfigError as exc:
        raise InputError(f"embedded config error at {exc.key}: {exc}") from None
    except (ContractViolation, KeyError) as exc:
        raise InputError(f"checkpoint/config mismatch: {exc}") from None
    return cfg, chain


def _write_samples(fh, x, dim):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow([f"x{k}" for k in range(dim)])
    for row in x:
        writer.writerow([repr(float(v)) for v in row])


def cmd_sample(args):
    cfg, chain = load_chain(args.checkpoint)
    if args.n < 0:
        raise InputError("--n must be non-negative")
    seed = cfg.seed if args.seed is None else args.seed
    dim = chain.target.dim
    if args.n == 0:
        _write_atomic(args.out, lambda fh: _write_samples(fh, np.empty((0, dim)), dim))
        return EXIT_OK
    path = sample_forward(chain, args.n, np.random.default_rng(seed))
    try:
        _write_atomic(args.out, lambda fh: _write_samples(fh, path.states[-1], dim))
        if args.paths:
            path_log_weight(chain, path)
            write_paths_csv(path, f"{args.paths}.tmp")
            os.replace(f"{args.paths}.tmp", args.paths)
    except BaseException:
        _remove(args.out, args.paths, f"{args.paths}.tmp" if args.paths else None)
        raise
    return EXIT_OK


def read_samples(path):
    """Read a sample CSV with header x0,x1,...; errors name the offending line."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header != [f"x{k}" for k in range(len(header))]:
            raise InputError(f"{path}: line 1: expected header x0,x1,...")
        rows = []
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise InputError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise InputError(f"{path}: line {line}: non-numeric field") from None
            if not all(np.isfinite(rows[-1])):
                raise InputError(f"{path}: line {line}: non-finite value")
    return np.array(rows, dtype=np.float64).reshape(-1, len(header))


def cmd_eval(args):
    a, b = read_samples(args.a), read_samples(args.b)
    if a.shape[1] != b.shape[1]:
        raise InputError(f"dimension mismatch: {args.a} has {a.shape[1]} columns, {args.b} has {b.shape[1]}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("energy distance needs non-empty samples")
    report = {"energy_distance": energy_distance(a, b), "a": summary_moments(a), "b": summary_moments(b)}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        _write_atomic(args.out, lambda fh: fh.write(text))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args):
    from .verify import SUITE_NAMES, report_json, run_suites

    if args.suite not in SUITE_NAMES:
        raise InputError(f"unknown suite {args.suite!r}; valid suites: {', '.join(SUITE_NAMES)}")
    if args.threads is not None and args.threads < 1:
        raise InputError("--threads must be at least 1")
    records = run_suites(args.suite, seed=args.seed or 0, threads=args.threads)
    text = report_json(records)
    if args.out:
        _write_atomic(args.out, lambda fh: fh.write(text))
    else:
        sys.stdout.write(text)
    failed = [r["check"] for r in records if not r["pass"]]
    for name in failed:
        print(f"FAILED {name}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="snfkit", description="Stochastic normalizing flows on toy targets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a chain from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: output.dir from the config)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw forward samples x_T from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", help="also write full paths and their log-weights to this CSV")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="energy distance and moments of two sample CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run verification suites and print a JSON report")
    p.add_argument("--suite", default="all")
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
