"""Command line entry point: ``m2m <subcommand> --config cfg.json --out dir``.

Exit status: 0 on success, 1 on invalid input, 2 when training or a
solver aborts numerically.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from . import autodiff as ad
from .autoencoder import encode_dataset
from .gan import GanLossConfig, TrainingDiverged
from .io.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .io.config import ConfigError, ExperimentConfig, load_config
from .io.datasets import FormatError
from .io.report import (
    OutputLocked,
    ReportBundle,
    emit_report,
    history_csv,
    measure_csv,
    output_lock,
    read_report,
)
from .ot import ConvergenceError, SolverError
from .pipeline import (
    ComposedGenerator,
    Datasets,
    Evaluator,
    fit_autoencoder,
    run_experiment,
    run_method,
    sample,
    verify_bound,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

_NUMERICAL = (TrainingDiverged, SolverError, ConvergenceError, ad.NonFiniteError, FloatingPointError)
_INVALID = (ConfigError, FormatError, CheckpointError, OutputLocked, ValueError, KeyError,
            FileNotFoundError, json.JSONDecodeError)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                             n_critic=args.n_critic)
    if args.lambda_gp is not None or args.eps_drift is not None:
        loss = GanLossConfig(
            cfg.loss.lambda_gp if args.lambda_gp is None else args.lambda_gp,
            cfg.loss.eps_drift if args.eps_drift is None else args.eps_drift)
        cfg = replace(cfg, loss=loss)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    return Path(args.out)


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _autoencoder(args, cfg, data):
    """Load ``--ae`` if given, else train the configured autoencoder."""
    if getattr(args, "ae", None):
        nets = load_checkpoint(args.ae)
        return nets["encoder"], nets["decoder"]
    enc, dec, _ = fit_autoencoder(cfg, data)
    return enc, dec


def _write_run(out: Path, result, nets, record_wall_clock: bool):
    with output_lock(out):
        save_checkpoint(nets, out / "checkpoint")
        (out / f"history_{result.stem}.csv").write_text(
            history_csv(result.history, record_wall_clock))
        doc = {"method": result.method, "seed": result.seed, "metrics": result.metrics,
               "bound": result.bound}
        if record_wall_clock:
            doc["timing"] = result.timing
        (out / f"run_{result.stem}.json").write_text(_dump(doc))


# ------------------------------------------------------------ subcommands

def cmd_train_ae(args) -> int:
    cfg = _config(args)
    out = _out(args)
    data = Datasets.load(cfg)
    enc, dec, hist = fit_autoencoder(cfg, data)
    with output_lock(out):
        save_checkpoint({"encoder": enc, "decoder": dec}, out / "checkpoint")
        (out / "history_autoencoder.csv").write_text(history_csv(hist, args.record_wall_clock))
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _config(args)
    out = _out(args)
    data = Datasets.load(cfg)
    enc, _dec = _autoencoder(args, cfg, data)
    measure = data.source if args.which == "source" else data.target
    codes = encode_dataset(enc, measure)
    with output_lock(out):
        (out / f"encoded_{args.which}.csv").write_text(measure_csv(codes.atoms, codes.weights))
    return EXIT_OK


def _train(method: str):
    def cmd(args) -> int:
        cfg = _config(args)
        if method == "conditional":
            cfg = replace(cfg, methods=("conditional",))
        out = _out(args)
        data = Datasets.load(cfg)
        enc, dec = _autoencoder(args, cfg, data)
        result, nets = run_method(cfg, method, _seed(args, cfg), enc, dec, data,
                                  Evaluator.build(cfg, enc, data.target))
        if method in ("mind2mind", "conditional"):
            nets = {**nets, "encoder": enc, "decoder": dec}
        _write_run(out, result, nets, args.record_wall_clock)
        return EXIT_OK
    return cmd


def cmd_compose(args) -> int:
    out = _out(args)
    ae = load_checkpoint(args.ae)
    mind = load_checkpoint(args.mind)["mind_gen"]
    composed = ComposedGenerator(mind, ae["decoder"])
    with output_lock(out):
        save_checkpoint({"generator": composed.network()}, out / "checkpoint")
        if args.samples:
            cfg = _config(args) if args.config else None
            prior = cfg.mind_train.prior if cfg else None
            if prior is None:
                raise ConfigError("--samples needs --config for the prior")
            seed = args.seed if args.seed is not None else 0
            fake = sample(composed, prior, args.samples, seed)
            (out / "samples.csv").write_text(measure_csv(fake.atoms, fake.weights))
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    cfg = _config(args)
    out = _out(args)
    data = Datasets.load(cfg)
    ae = load_checkpoint(args.ae)
    mind = load_checkpoint(args.mind)["mind_gen"]
    prior = cfg.mind_train.prior
    mode = args.mode or ("exact" if prior.kind == "finite" else "sliced")
    report = verify_bound(ae["encoder"], ae["decoder"], data.source, data.target, mind, prior,
                          mode, seed=_seed(args, cfg))
    with output_lock(out):
        (out / "bound.json").write_text(_dump(report.to_dict()))
    print(f"holds={report.holds} slack={report.slack:.6g} certified={report.certified}")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else (Path(cfg.out_dir) if cfg.out_dir else None)
    if out is None:
        raise ConfigError("--out is required (or set out_dir in the config)")
    progress = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    bundle = run_experiment(cfg, progress)
    emit_report(bundle, out, args.record_wall_clock)
    return EXIT_OK


def summarize(bundle: ReportBundle) -> dict:
    """Per-method median/mean/std of every final metric over seeds."""
    summary = {}
    for method in bundle.config.get("methods", []):
        runs = bundle.by_method(method)
        if not runs:
            continue
        stats = {}
        for key in sorted(runs[0].metrics):
            vals = [r.metrics[key] for r in runs]
            stats[key] = {"median": statistics.median(vals), "mean": statistics.fmean(vals),
                          "std": statistics.pstdev(vals), "n": len(vals)}
        bounds = [r.bound for r in runs if r.bound]
        if bounds:
            stats["bound_holds"] = sum(bool(b["holds"]) for b in bounds)
        summary[method] = stats
    return summary


def cmd_report(args) -> int:
    src = Path(args.out if args.report_dir is None else args.report_dir)
    bundle = read_report(src)
    summary = summarize(bundle)
    dest = _out(args)
    with output_lock(dest):
        (dest / "summary.json").write_text(_dump(summary))
    for method, stats in summary.items():
        line = " ".join(f"{k}={v['median']:.4g}" for k, v in stats.items() if isinstance(v, dict))
        print(f"{method}: {line}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical aborts
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="m2m", description="Mind2Mind transfer experiments")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--n-critic", type=int)
    common.add_argument("--lambda-gp", type=float)
    common.add_argument("--eps-drift", type=float)
    common.add_argument("--record-wall-clock", action="store_true",
                        help="fill timing columns (output is then not reproducible)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    add("train-ae", cmd_train_ae, "train the autoencoder on the source dataset")
    p = add("encode", cmd_encode, "encode a dataset with a trained encoder")
    p.add_argument("--ae", help="autoencoder checkpoint directory")
    p.add_argument("--which", choices=("source", "target"), default="target")
    for name, method, help_ in (("train-mind", "mind2mind", "train a MindGAN on encoded target data"),
                                ("train-vanilla", "vanilla", "train the composed-architecture WGAN"),
                                ("finetune", "finetune", "pretrain on source, fine-tune on target"),
                                ("train-conditional", "conditional", "train a conditional MindGAN")):
        p = add(name, _train(method), help_)
        p.add_argument("--ae", help="autoencoder checkpoint directory (trained if omitted)")
    p = add("compose", cmd_compose, "compose decoder and MindGAN generator")
    p.add_argument("--ae", required=True)
    p.add_argument("--mind", required=True)
    p.add_argument("--samples", type=int, default=0, help="also write this many samples")
    p = add("verify-bound", cmd_verify_bound, "evaluate every term of the transfer error bound")
    p.add_argument("--ae", required=True)
    p.add_argument("--mind", required=True)
    p.add_argument("--mode", choices=("exact", "sliced"))
    p = add("run-experiment", cmd_run_experiment, "run all configured methods and seeds")
    p.add_argument("--quiet", action="store_true")
    p = add("report", cmd_report, "summarize an emitted report directory")
    p.add_argument("--report-dir", help="report to read (default: --out)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERICAL as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
