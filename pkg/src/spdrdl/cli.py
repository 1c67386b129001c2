"""Command line entry point: ``spdrdl <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from . import evaluate as E
from . import gradcheck as G
from . import kvconfig
from . import model as M
from . import train as TR
from .errors import (CheckpointError, ConfigError, DatasetError, NumericalError, ShapeError,
                     SpdrdlError)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_NAME = "resolved_config.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 means "data error" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _counts(text: str):
    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"counts must be integers, got {text!r}") from None
    if len(parts) not in (1, 2) or any(p <= 0 for p in parts):
        raise argparse.ArgumentTypeError("counts must be one or two positive integers (train[,val])")
    return parts


def _proportions(text: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"proportions must be numbers, got {text!r}") from None
    if not vals or any(not 0 <= v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("proportions must lie in [0, 1]")
    return vals


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("train fraction must be in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spdrdl", description="Synthetic-data training and evaluation of the "
                "despeckling + classification + localisation network.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic chip dataset")
    g.add_argument("--seed", type=int, required=True, help="dataset seed")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--chip", type=int, default=D.CHIP, help="chip extent in pixels (default %(default)s)")
    g.add_argument("--crop", type=int, default=D.CROP, help="network crop extent (default %(default)s)")
    g.add_argument("--counts", type=_counts, default=[4000, 1000],
                   help="train[,val] chip totals (default 4000,1000; val defaults to train/4)")
    g.add_argument("--imbalance", type=float, default=4.0, help="background:target ratio (default %(default)s)")
    g.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="flat key = value file with model and training fields")
    t.add_argument("--seed", type=int, required=True, help="initialisation / sampling seed")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--no-ssp", action="store_true", help="drop the structural-similarity prior")
    t.add_argument("--no-sscp", action="store_true", help="drop the target-shift prior")
    t.add_argument("--despeckler", choices=("gaussian", "median"),
                   help="fixed filter replacing the enhancement network (requires --no-ssp)")
    t.add_argument("--train-fraction", type=_fraction, help="use floor(F * N) training chips")
    t.add_argument("--max-epochs", type=int, help="epoch cap (overrides the config file)")
    t.add_argument("--patience", type=int, help="early-stopping patience (overrides the config file)")
    t.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--split", default="val", choices=("train", "val"), help="split to score")
    e.add_argument("--nine-crops", action="store_true", help="score the 3x3 shifted crops of every chip")
    e.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    r = sub.add_parser("prune", help="magnitude-pruning sweep")
    r.add_argument("--checkpoint", required=True, help="checkpoint file")
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--proportions", type=_proportions, required=True,
                   help="comma-separated pruning proportions in [0, 1]")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    s = sub.add_parser("spectrum", help="averaged magnitude spectrum of target chips")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--checkpoint", help="if given, use the enhancement network's output")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    c = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    c.add_argument("--seed", type=int, default=0, help="seed for random probe inputs")
    return p


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"--out {out} is not empty (use --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, command: str, args: argparse.Namespace, extra: Dict[str, object]) -> None:
    values = {k: v for k, v in vars(args).items() if v is not None and k != "command"}
    values.update(extra)
    flat = {k: (",".join(map(str, v)) if isinstance(v, list) else v) for k, v in values.items()}
    (out / RESOLVED_NAME).write_text(f"# spdrdl {command}\n" + kvconfig.dumps(flat))


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _load_data(path: str) -> D.Dataset:
    p = _require_file(path, "dataset directory")
    if not (p / D.MANIFEST_NAME).is_file():
        raise UsageError(f"{p} has no {D.MANIFEST_NAME}")
    return D.load(p)


def _load_checkpoint(path: str) -> M.ModelParams:
    return M.load(_require_file(path, "checkpoint"))


def load_config_file(path: Optional[str]):
    """Split one flat key/value file into ModelConfig and TrainConfig."""
    values = kvconfig.loads(Path(path).read_text()) if path else {}
    mkeys = {f.name for f in fields(M.ModelConfig)}
    tkeys = {f.name for f in fields(TR.TrainConfig)}
    unknown = set(values) - mkeys - tkeys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    mc = kvconfig.from_mapping(M.ModelConfig, {k: v for k, v in values.items() if k in mkeys})
    tc = kvconfig.from_mapping(TR.TrainConfig, {k: v for k, v in values.items() if k in tkeys})
    return mc, tc


def cmd_gen_data(args) -> int:
    out = _prepare_out(args.out, args.force)
    n_train = args.counts[0]
    n_val = args.counts[1] if len(args.counts) > 1 else max(1, n_train // 4)
    ds = D.generate(args.seed, n_train, n_val, args.chip, args.crop, args.imbalance)
    D.save(ds, out)
    _write_resolved(out, "gen-data", args, {"n_train": n_train, "n_val": n_val})
    for split, counts in ds.manifest.class_counts.items():
        print(f"{split}: " + ", ".join(f"{D.CLASS_NAMES[k]}={c}" for k, c in enumerate(counts)))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.config:
        _require_file(args.config, "config file")
    mc, tc = load_config_file(args.config)
    overrides = {}
    if args.no_ssp:
        overrides["use_ssp"] = False
    if args.no_sscp:
        overrides["use_sscp"] = False
    if args.despeckler:
        if not args.no_ssp and tc.use_ssp:
            raise UsageError("--despeckler replaces the enhancement network; combine it with --no-ssp")
        overrides["fixed_despeckler"] = args.despeckler
    if args.train_fraction is not None:
        overrides["train_fraction"] = args.train_fraction
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if args.patience is not None:
        overrides["patience"] = args.patience
    tc = replace(tc, **overrides)
    ds = _load_data(args.data)
    if mc.input_size != ds.crop:
        raise UsageError(f"model input_size {mc.input_size} does not match the dataset crop {ds.crop}")
    out = _prepare_out(args.out, args.force)
    (out / "model_config.txt").write_text(mc.to_text())
    (out / "train_config.txt").write_text(tc.to_text())

    def progress(rec):
        print(f"epoch {rec.epoch}: total={rec.total:.4f} focal={rec.focal:.4f} "
              f"val_aucpr={rec.val_aucpr:.4f}", flush=True)

    params, log = TR.train(mc, tc, ds, args.seed, on_epoch=progress)
    M.save(params, out / "checkpoint.bin")
    (out / "train_log.csv").write_text(log.to_csv())
    (out / "timing.csv").write_text(log.timing_csv())
    _write_resolved(out, "train", args, {**kvconfig.to_mapping(mc), **kvconfig.to_mapping(tc),
                                        "n_train": log.n_train, "best_epoch": log.best_epoch})
    print(f"{log.method}: n_train={log.n_train} best_epoch={log.best_epoch} "
          f"best_val_aucpr={log.best_aucpr:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    params = _load_checkpoint(args.checkpoint)
    if params.config.input_size != ds.crop:
        raise ShapeError(f"checkpoint expects {params.config.input_size}px crops, dataset has {ds.crop}")
    out = _prepare_out(args.out, args.force)
    report = E.evaluate(params, ds, args.split, nine_crops=args.nine_crops)
    E.write_pr_curve(out / "pr_curve.csv", report)
    E.write_confusion(out / "confusion.csv", report)
    E.write_range_aucpr(out / "range_aucpr.csv", report)
    if report.psi is not None:
        E.write_psi(out / "psi.csv", report.psi, report.labels[::9])
    _write_resolved(out, "eval", args, {"inferences": report.inferences, "aucpr": report.aucpr})
    print(f"inferences={report.inferences} aucpr={report.aucpr:.4f} accuracy={report.confusion.accuracy:.4f}")
    if report.psi is not None:
        print(f"mean_psi={float(report.psi.mean()):.6f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    ds = _load_data(args.data)
    params = _load_checkpoint(args.checkpoint)
    out = _prepare_out(args.out, args.force)
    rows = E.prune_sweep(params, ds, args.proportions)
    E.write_prune_sweep(out / "prune_sweep.csv", rows)
    _write_resolved(out, "prune", args, {})
    for r in rows:
        print(f"p={r['proportion']:.3f} zeroed={r['zeroed']} aucpr={r['aucpr']:.4f}")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    ds = _load_data(args.data)
    params = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    out = _prepare_out(args.out, args.force)
    spec = E.avg_spectrum(E.spectrum_images(ds, params))
    E.write_spectrum(out / "spectrum.csv", spec)
    _write_resolved(out, "spectrum", args, {})
    print(f"spectrum {spec.shape[0]}x{spec.shape[1]} written")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = G.run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max relative error {r.error:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "prune": cmd_prune,
    "spectrum": cmd_spectrum,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"spdrdl {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"spdrdl {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, ShapeError, SpdrdlError) as exc:
        print(f"spdrdl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
