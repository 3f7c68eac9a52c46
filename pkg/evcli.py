#!/usr/bin/env python3
"""
Command-line entry point for the Eigen-Value toolkit.

Usage:
    python evcli.py synth --output runs/pair --n-id 2000 --n-ood 1000 --d 32 --shift 0.3
    python evcli.py value --input runs/pair/id.evds --val runs/pair/val.evds --valuer knn-shapley --w 1 --output runs/v
    python evcli.py remove --train ... --val ... --ood ... --seeds 0 1 2 --output runs/removal
    python evcli.py timing --train runs/pair/id.evds --output runs/timing

Exit codes: 0 success, 2 input/parse or other failure, 3 singular covariance
without --ridge. Every run writes config.json before any result.
"""

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional

import datahub
from benchlab import (
    ClassifierConfig,
    ExperimentReport,
    MetricRow,
    ProtocolConfig,
    StabilityConfig,
    TimingConfig,
    run_addition,
    run_alignment,
    run_fidelity,
    run_pca_gap,
    run_removal,
    run_removal_sweep,
    run_stability,
    run_timing,
)
from ev_base import THREADS_ENV, SingularCovariance, say
from valuers import VALUERS, make_valuer, value_with_ev


EXIT_OK = 0
EXIT_FAILURE = 2
EXIT_SINGULAR = 3


class RunOutputs:
    """Tracks files written by one run so a failed run leaves nothing behind."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.created_dir = not self.directory.exists()
        self.files: List[Path] = []

    def prepare(self) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)

    def track(self, *paths: Path) -> None:
        self.files.extend(Path(p) for p in paths)

    def write_json(self, name: str, payload: Dict) -> Path:
        path = self.directory / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        self.track(path)
        return path

    def cleanup(self) -> None:
        for path in self.files:
            path.unlink(missing_ok=True)
        if self.created_dir and self.directory.exists() and not any(self.directory.iterdir()):
            self.directory.rmdir()


# ============================================================================
# Argument parsing
# ============================================================================

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--output", required=True, help="output directory (created if absent)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None, help=f"worker cap (falls back to {THREADS_ENV})")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--ridge", action="store_true", help="add eps*I to singular covariances")
    parser.add_argument("--format", choices=["evds", "csv"], default=None,
                        help="dataset format (default: by file extension)")


def _valuation(parser: argparse.ArgumentParser, default_valuer: str = "knn-shapley") -> None:
    parser.add_argument("--valuer", choices=sorted(VALUERS), default=default_valuer)
    parser.add_argument("--w", type=float, default=0.0, help="EV weight in [0, 1]; 0 disables EV")
    parser.add_argument("--k", type=int, default=100, help="KNN-Shapley neighborhood size")
    parser.add_argument("--num-models", type=int, default=800, help="Data-OOB bootstrap models")
    parser.add_argument("--oob-epochs", type=int, default=10)
    parser.add_argument("--epochs", type=int, default=30, help="classifier epochs")
    parser.add_argument("--lr", type=float, default=0.01, help="classifier learning rate")
    parser.add_argument("--seeds", type=int, nargs="+", default=None, help="protocol seeds (default: --seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evcli", description="Eigen-Value data valuation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("value", help="score every point of a dataset")
    _common(p)
    _valuation(p)
    p.add_argument("--input", required=True)
    p.add_argument("--val", default=None, help="validation set (needed by knn-shapley)")

    p = sub.add_parser("synth", help="generate a matching-marginal ID/OOD pair")
    _common(p)
    p.add_argument("--n-id", type=int, default=2000)
    p.add_argument("--n-ood", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=0, help="extra ID points written as val")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--shift", type=float, default=0.3)

    p = sub.add_parser("remove", help="data removal protocol")
    _common(p)
    _valuation(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--ood", required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--sweep", type=float, nargs="*", default=None,
                   help="run every listed w (e.g. 0.25 0.5 1.0) instead of --w")

    p = sub.add_parser("add", help="point addition protocol")
    _common(p)
    _valuation(p)
    p.add_argument("--initial", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--steps", type=int, nargs="+", default=[100, 300, 500])

    p = sub.add_parser("stability", help="rank stability protocol")
    _common(p)
    _valuation(p)
    p.add_argument("--source", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--pool", type=int, default=300)
    p.add_argument("--fixed", type=int, default=290)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--compare", nargs="*", default=["random"])

    p = sub.add_parser("timing", help="wall-clock of EV and baselines")
    _common(p)
    _valuation(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--baselines", nargs="*", default=["random", "knn-shapley", "data-oob"])
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("pca-gap", help="PCA variance of top- vs bottom-valued points")
    _common(p)
    _valuation(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--top-fraction", type=float, default=0.5)

    p = sub.add_parser("fidelity", help="predicted vs exact leave-one-out eigenvalue shifts")
    _common(p)
    p.add_argument("--train", required=True)

    p = sub.add_parser("align", help="matching-marginal check between two domains")
    _common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)

    return parser


def protocol_config(args: argparse.Namespace) -> ProtocolConfig:
    """Map parsed flags onto the protocol dataclasses; absent flags keep their defaults."""
    cfg = ProtocolConfig(seeds=list(getattr(args, "seeds", None) or [args.seed]),
                         ridge=args.ridge, threads=args.threads, verbose=args.verbose)
    if hasattr(args, "valuer"):
        cfg = ProtocolConfig(
            valuer=args.valuer,
            weight_w=args.w,
            seeds=cfg.seeds,
            classifier=ClassifierConfig(epochs=args.epochs, lr=args.lr),
            k_neighbors=args.k,
            num_models=args.num_models,
            oob_epochs=args.oob_epochs,
            ridge=args.ridge,
            threads=args.threads,
            verbose=args.verbose,
        )
    if args.command == "remove":
        cfg.removal_fraction = args.fraction
        if args.sweep:
            cfg.weight_sweep = list(args.sweep)
    elif args.command == "add":
        cfg.addition_steps = list(args.steps)
    elif args.command == "stability":
        cfg.stability = StabilityConfig(pool=args.pool, fixed=args.fixed, repeats=args.repeats)
        cfg.compare = list(args.compare)
    elif args.command == "timing":
        cfg.timing = TimingConfig(warmup=args.warmup, repeats=args.repeats)
    # re-run validation on the adjusted fields
    return ProtocolConfig(**{**cfg.__dict__})


# ============================================================================
# Subcommands
# ============================================================================

def _load(path: Optional[str], args: argparse.Namespace) -> Optional[datahub.EmbeddingDataset]:
    if path is None:
        return None
    return datahub.load(path, fmt=args.format)


def _finish(report: ExperimentReport, out: RunOutputs) -> int:
    out.track(*report.save(out.directory))
    print(report.headline())
    return EXIT_OK


def cmd_value(args, cfg: ProtocolConfig, out: RunOutputs) -> int:
    train = _load(args.input, args)
    val = _load(args.val, args)
    valuer = make_valuer(args.valuer, k_neighbors=args.k, num_models=args.num_models,
                         oob_epochs=args.oob_epochs, lr=args.lr, ridge=args.ridge, workers=cfg.workers)
    say(args.verbose, f"[value] {cfg.label()} on {train.n} points (d={train.d})")
    values = value_with_ev(valuer, train, val, w=args.w, seed=args.seed, ridge=args.ridge)
    path = out.directory / "values.csv"
    out.track(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "score", "method", "w"])
        for k, score in enumerate(values.scores):
            writer.writerow([k, repr(float(score)), values.method, repr(float(values.weight_w))])
    extra = ""
    if "never_oob" in values.notes:
        never = [int(i) for i in values.notes["never_oob"]]
        out.write_json("never_oob.json", {"never_oob": never})
        extra = f" never_oob={len(never)}"
    print(f"value: {values.method} w={values.weight_w:g} n={len(values)} "
          f"mean={values.scores.mean():.6g}{extra} -> {path}")
    return EXIT_OK


def cmd_synth(args, cfg: ProtocolConfig, out: RunOutputs) -> int:
    spec = datahub.ShiftSpec(n_id=args.n_id + args.n_val, n_ood=args.n_ood, d=args.d,
                             num_classes=args.classes, shift_strength=args.shift, seed=args.seed)
    say(args.verbose, f"[synth] {spec}")
    cov = datahub.build_shift_covariances(spec)
    id_set, ood_set, _ = datahub.synth_shift_pair(spec)
    ext = "csv" if args.format == "csv" else "evds"
    if args.n_val:
        val_set = id_set.subset(range(args.n_id, id_set.n), domain_tag="val")
        id_set = id_set.subset(range(args.n_id))
        out.track(datahub.save(val_set, out.directory / f"val.{ext}", fmt=ext))
    out.track(datahub.save(id_set, out.directory / f"id.{ext}", fmt=ext))
    out.track(datahub.save(ood_set, out.directory / f"ood.{ext}", fmt=ext))

    align = datahub.marginal_alignment(id_set, ood_set)
    rows = [
        MetricRow(args.seed, 0, "e_distortion", cov.e_distortion),
        MetricRow(args.seed, 0, "repair_rounds", float(cov.repair_rounds)),
        MetricRow(args.seed, 0, "population_diag_gap",
                  float(abs(cov.sigma_ood.diagonal() - cov.sigma_id.diagonal()).max())),
        MetricRow(args.seed, 0, "sample_diag_gap", align.diag_gap),
        MetricRow(args.seed, 0, "sample_offdiag_gap", align.offdiag_gap),
    ]
    return _finish(ExperimentReport("synth", cfg.to_dict(), rows, extras={"shift_spec": asdict(spec)}), out)


def cmd_remove(args, cfg, out):
    train, val, ood = _load(args.train, args), _load(args.val, args), _load(args.ood, args)
    if args.sweep is not None:
        return _finish(run_removal_sweep(train, val, ood, cfg), out)
    return _finish(run_removal(train, val, ood, cfg), out)


def cmd_add(args, cfg, out):
    initial, pool, ood = _load(args.initial, args), _load(args.pool, args), _load(args.ood, args)
    return _finish(run_addition(initial, pool, ood, cfg, val=_load(args.val, args)), out)


def cmd_stability(args, cfg, out):
    return _finish(run_stability(_load(args.source, args), cfg, val=_load(args.val, args)), out)


def cmd_timing(args, cfg, out):
    train = _load(args.train, args)
    return _finish(run_timing(train, cfg, baselines=args.baselines, val=_load(args.val, args)), out)


def cmd_pca_gap(args, cfg, out):
    train = _load(args.train, args)
    return _finish(run_pca_gap(train, cfg, val=_load(args.val, args), top_fraction=args.top_fraction), out)


def cmd_fidelity(args, cfg, out):
    return _finish(run_fidelity(_load(args.train, args), cfg), out)


def cmd_align(args, cfg, out):
    return _finish(run_alignment(_load(args.a, args), _load(args.b, args), cfg), out)


COMMANDS: Dict[str, Callable] = {
    "value": cmd_value,
    "synth": cmd_synth,
    "remove": cmd_remove,
    "add": cmd_add,
    "stability": cmd_stability,
    "timing": cmd_timing,
    "pca-gap": cmd_pca_gap,
    "fidelity": cmd_fidelity,
    "align": cmd_align,
}

INPUT_FLAGS = ("input", "val", "train", "ood", "initial", "pool", "source", "a", "b")


def _missing_inputs(args: argparse.Namespace) -> List[str]:
    missing = []
    for flag in INPUT_FLAGS:
        value = getattr(args, flag, None)
        if isinstance(value, str) and not Path(value).is_file():
            missing.append(value)
    return missing


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)

    missing = _missing_inputs(args)
    if missing:
        print(f"error: input file not found: {missing[0]}", file=sys.stderr)
        return EXIT_FAILURE

    out = RunOutputs(Path(args.output))
    try:
        cfg = protocol_config(args)
        out.prepare()
        out.write_json("config.json", {
            "argv": argv,
            "command": args.command,
            "arguments": vars(args),
            "protocol": cfg.to_dict(),
        })
        return COMMANDS[args.command](args, cfg, out)
    except SingularCovariance as exc:
        out.cleanup()
        print(f"error: {exc} (rerun with --ridge)", file=sys.stderr)
        return EXIT_SINGULAR
    except Exception as exc:
        out.cleanup()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
