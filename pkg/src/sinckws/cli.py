"""Command-line interface.

Option values resolve as: command-line flag, then ``--config`` file
(``key = value`` lines, ``#`` comments), then the ``SINCKWS_DATA``
environment variable (dataset root only), then built-in defaults.

Exit codes: 0 ok, 2 usage, 3 I/O or data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import (DatasetError, build_manifest, condition_clip, read_manifest_csv,
                   read_wav, write_manifest_csv)
from .model import CLASSES, MAC_BUDGET, build_model, count_macs, default_config, layer_table, write_table_csv
from .sinc import export_filters, write_filters_csv
from .tensor import NonFiniteError
from .train import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_DATA = "SINCKWS_DATA"

DEFAULTS = {
    "version": "v1",
    "arch": "base",
    "epochs": 60,
    "seed": 0,
    "batch_size": 64,
    "lr": 1e-3,
    "silence_fraction": 1.0 / 12.0,
    "split": "test",
    "input_length": 16000,
    "workers": 1,
    "cache_size": 0,
    "prefetch": 2,
}
TYPES = {"epochs": int, "seed": int, "batch_size": int, "lr": float, "silence_fraction": float,
         "input_length": int, "workers": int, "cache_size": int, "prefetch": int}

log = logging.getLogger("sinckws")


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class Options:
    """Merged view over flags, config file, environment and defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = read_config_file(args.config) if getattr(args, "config", None) else {}

    def get(self, key: str, required: bool = False):
        value = getattr(self.args, key, None)
        if value is None and key in self.file:
            value = self.file[key]
            if key in TYPES:
                try:
                    value = TYPES[key](value)
                except ValueError as exc:
                    raise UsageError(f"config key {key}: {exc}") from exc
        if value is None and key == "data":
            value = os.environ.get(ENV_DATA)
        if value is None:
            value = DEFAULTS.get(key)
        if value is None and required:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
        return value


def _flag(value) -> bool:
    return value is True or str(value).lower() in ("1", "true", "yes", "on")


def _manifest(opts: Options):
    strict = not _flag(opts.get("allow_missing_classes") or False)
    data = opts.get("data", required=True)
    manifest_csv = opts.get("manifest")
    if manifest_csv:
        return read_manifest_csv(manifest_csv, data, opts.get("version"), strict)
    return build_manifest(data, opts.get("version"), strict)


def _print_rows(rows, total_label: str, key: str) -> int:
    print(f"{'layer':<8} {'name':<22} {'params':>9} {'macs':>12}")
    for r in rows:
        print(f"{r.layer:<8} {r.name:<22} {r.params:>9} {r.macs:>12}")
    total = sum(getattr(r, key) for r in rows)
    print(f"{'total':<31} {total_label}: {total}")
    return total


def _config_for(opts: Options):
    ckpt = opts.get("ckpt")
    if ckpt:
        return load_checkpoint(ckpt)[0].config
    arch = opts.get("arch")
    if arch not in ("base", "grouped"):
        raise UsageError(f"--arch must be base or grouped, got {arch!r}")
    return default_config(arch)


def cmd_train(opts: Options) -> int:
    arch = opts.get("arch")
    if arch not in ("base", "grouped"):
        raise UsageError(f"--arch must be base or grouped, got {arch!r}")
    out = Path(opts.get("out", required=True))
    manifest = _manifest(opts)
    config = TrainConfig(
        epochs=opts.get("epochs"), lr=opts.get("lr"), batch_size=opts.get("batch_size"),
        seed=opts.get("seed"), silence_fraction=opts.get("silence_fraction"),
        cache_size=opts.get("cache_size"), prefetch=opts.get("prefetch"),
    )
    model = build_model(default_config(arch), seed=config.seed)
    history = opts.get("history") or out.with_suffix(".history.csv")
    result = train(model, manifest, config, out, history)
    print(f"best val accuracy {result.best_val_accuracy:.4g} at epoch {result.best_epoch}; "
          f"checkpoint {out}; history {history}")
    return EXIT_OK


def cmd_eval(opts: Options) -> int:
    model, meta = load_checkpoint(opts.get("ckpt", required=True))
    manifest = _manifest(opts)
    split = opts.get("split")
    res = evaluate(model, manifest, split, opts.get("batch_size"), opts.get("silence_fraction"))
    print(f"{split} accuracy {res.accuracy:.4g} ({int(np.trace(res.confusion))}/{res.total})")
    out = opts.get("out")
    if out:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true\\pred", *CLASSES])
            for name, row in zip(CLASSES, res.confusion):
                writer.writerow([name, *row.tolist()])
    return EXIT_OK


def cmd_infer(opts: Options) -> int:
    model, _ = load_checkpoint(opts.get("ckpt", required=True))
    files = opts.args.wavfiles

    def run(path):
        try:
            clip = condition_clip(read_wav(path)).samples
        except (DatasetError, OSError) as exc:
            return path, exc
        return path, model.predict(clip)

    workers = max(1, opts.get("workers"))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, files))
    ok = 0
    print("file\ttop\t" + "\t".join(CLASSES))
    for path, res in results:
        if isinstance(res, Exception):
            print(f"{path}\tERROR\t{res}", file=sys.stderr)
            continue
        ok += 1
        print(f"{path}\t{CLASSES[int(np.argmax(res))]}\t" + "\t".join(f"{p:.6f}" for p in res))
    return EXIT_OK if ok else EXIT_DATA


def cmd_params(opts: Options) -> int:
    rows = layer_table(_config_for(opts), opts.get("input_length"))
    _print_rows(rows, "params", "params")
    if opts.get("out"):
        write_table_csv(rows, opts.get("out"))
    return EXIT_OK


def cmd_macs(opts: Options) -> int:
    rows, total = count_macs(_config_for(opts), opts.get("input_length"))
    _print_rows(rows, "macs", "macs")
    verdict = "real-time OK" if total < MAC_BUDGET else "exceeds budget"
    print(f"budget {MAC_BUDGET} MACs/s: {verdict} ({100.0 * total / MAC_BUDGET:.1f}% used)")
    if opts.get("out"):
        write_table_csv(rows, opts.get("out"))
    return EXIT_OK


def cmd_export_filters(opts: Options) -> int:
    model, _ = load_checkpoint(opts.get("ckpt", required=True))
    records = export_filters(model.sinc.low.data, model.sinc.band.data, model.config.sinc)
    out = opts.get("out", required=True)
    n = write_filters_csv(records, out)
    for r in records:
        print(f"filter {r.filter_id:>3}: {r.f1_hz:9.2f} - {r.f2_hz:9.2f} Hz")
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def cmd_manifest(opts: Options) -> int:
    manifest = _manifest(opts)
    print(f"{'class':<10} {'train':>7} {'val':>7} {'test':>7} {'weight':>8}")
    counts = {s: manifest.counts(s) for s in ("train", "val", "test")}
    for i, name in enumerate(CLASSES):
        print(f"{name:<10} {counts['train'][i]:>7} {counts['val'][i]:>7} {counts['test'][i]:>7} "
              f"{manifest.class_weights()[i]:>8.4f}")
    print(f"{len(manifest.entries)} entries, {len(manifest.noise_files)} noise files")
    if opts.get("out"):
        write_manifest_csv(manifest, opts.get("out"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinckws", description="Raw-audio keyword spotting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value option file")
        p.set_defaults(func=func)
        return p

    def data_opts(p):
        p.add_argument("--data", help=f"dataset root (default ${ENV_DATA})")
        p.add_argument("--version", choices=["v1", "v2"])
        p.add_argument("--manifest", help="use a manifest CSV instead of scanning list files")
        p.add_argument("--allow-missing-classes", action="store_const", const=True)
        p.add_argument("--silence-fraction", type=float)
        p.add_argument("--batch-size", type=int)

    p = add("train", cmd_train, "train a model")
    data_opts(p)
    p.add_argument("--arch", choices=["base", "grouped"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--history", help="history CSV path")
    p.add_argument("--cache-size", type=int)
    p.add_argument("--prefetch", type=int)

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    data_opts(p)
    p.add_argument("--ckpt")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--out", help="confusion matrix CSV")

    p = add("infer", cmd_infer, "classify WAV files")
    p.add_argument("--ckpt")
    p.add_argument("--workers", type=int)
    p.add_argument("wavfiles", nargs="+")

    for name, func in (("params", cmd_params), ("macs", cmd_macs)):
        p = add(name, func, f"per-layer {name} table")
        p.add_argument("--arch", choices=["base", "grouped"])
        p.add_argument("--ckpt")
        p.add_argument("--input-length", type=int)
        p.add_argument("--out", help="CSV path")

    p = add("export-filters", cmd_export_filters, "export SincConv filters as CSV")
    p.add_argument("--ckpt")
    p.add_argument("--out")

    p = add("manifest", cmd_manifest, "inspect a dataset manifest")
    data_opts(p)
    p.add_argument("--out", help="manifest CSV path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(Options(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
