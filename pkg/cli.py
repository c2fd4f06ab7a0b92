"""
Command line for the ImpNovo sequencer: synth, train, predict, evaluate, analyze
"""

import argparse
import json
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import torch

import config
import evalx
import infer
import msio
import train as training
from config import ExperimentConfig
from errors import DataError, ImpnovoError, UsageError
from logger import detach_storage, flush_log_buffer, init_storage, log_event
from report_exporter import ReportExporter
from storage import Storage


@dataclass
class CommandOutcome:
    exit_code: int
    artifacts_written: list[Path] = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports bad usage as an exception instead of exiting"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="JSON experiment config; flags override its values")
    parser.add_argument("--seed", type=int, help="Random seed (default: train.seed of the config)")


def _bins(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bins must be comma-separated numbers: {e}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="impnovo", description="De novo peptide sequencing with latent imputation")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="Generate a synthetic annotated dataset")
    _common(p)
    p.add_argument("--n", type=int, dest="n_psms", help="Number of PSMs")
    p.add_argument("--missing", type=float, dest="missing_ratio", help="Probability of dropping each b/y ion")
    p.add_argument("--out", type=Path, required=True, help="Output directory for MGF files and manifest.json")

    p = sub.add_parser("train", help="Train a model on a dataset manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Run directory for checkpoints and metrics")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--lr", type=float, dest="peak_lr")
    p.add_argument("--warmup", type=int, dest="warmup_steps")
    p.add_argument("--no-imputation", action="store_true")
    p.add_argument("--no-theory-ce", action="store_true")
    p.add_argument("--no-complement", action="store_true")
    p.add_argument("--matched-baseline", action="store_true", dest="matched_baseline",
                   help="Train the parameter-matched plain baseline of the configured model")
    p.add_argument("--resume", action="store_true", help="Continue from the last completed epoch")
    p.add_argument("--lenient", action="store_true", help="Skip malformed MGF records")

    p = sub.add_parser("predict", help="Decode spectra with a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mgf", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Prediction TSV path")
    p.add_argument("--beam", type=int, dest="beam_width")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--oracle", action="store_true", help="Use the theoretical spectrum of SEQ as imputed memory")
    p.add_argument("--lenient", action="store_true")

    for name, text in (("evaluate", "Score predictions against annotations"),
                       ("analyze", "Stratified metrics and the precision-coverage curve")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--predictions", type=Path, required=True)
        p.add_argument("--mgf", type=Path, required=True, help="Annotated MGF")
        p.add_argument("--out", type=Path, required=True, help="Report directory")
        p.add_argument("--xlsx", action="store_true", help="Also write report.xlsx")
        p.add_argument("--lenient", action="store_true")
        if name == "analyze":
            p.add_argument("--bins", type=_bins, help="Missing-ratio bin edges, e.g. 0,0.2,0.4,0.6,0.8,1")
            p.add_argument("--checkpoint", type=Path, help="Adds imputation-loss quantile bins")
            p.add_argument("--imputation-bins", type=int, default=4, dest="imputation_bins")
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < config file < flags"""
    overrides: dict[str, dict[str, Any]] = {"train": {"seed": args.seed}}
    if args.command == "synth":
        overrides["synth"] = {"n_psms": args.n_psms, "missing_ratio": args.missing_ratio}
    elif args.command == "train":
        overrides["train"].update(
            epochs=args.epochs,
            batch_size=args.batch_size,
            max_steps=args.max_steps,
            peak_lr=args.peak_lr,
            warmup_steps=args.warmup_steps,
        )
        overrides["model"] = {
            "use_imputation": False if args.no_imputation else None,
            "use_theory_ce": False if args.no_theory_ce else None,
            "use_complement": False if args.no_complement else None,
        }
    elif args.command == "predict":
        overrides["infer"] = {"beam_width": 1 if args.greedy else args.beam_width}
    elif args.command == "analyze" and args.bins is not None:
        overrides["eval"] = {"bins": args.bins}
    return ExperimentConfig.load(args.config).merged(overrides)


def _attach_storage(directory: Path) -> Storage:
    storage = Storage(directory)
    init_storage(storage)
    flush_log_buffer()
    return storage


def cmd_synth(args, cfg: ExperimentConfig) -> list[Path]:
    storage = _attach_storage(args.out)
    split = msio.synth_dataset(cfg.synth, cfg.train.seed)
    return msio.write_dataset(split, storage, cfg.synth, cfg.train.seed)


def cmd_train(args, cfg: ExperimentConfig) -> list[Path]:
    storage = _attach_storage(args.out)
    dataset = msio.load_dataset(args.manifest, strict=not args.lenient)
    if args.matched_baseline:
        cfg = cfg.model_copy(update={"model": cfg.model.matched_baseline()})
    storage.write_json("config.json", cfg.model_dump(mode="json"))
    result = training.train(
        cfg.train, dataset, cfg.model, storage, cfg.preprocess, cfg.eval, cfg.infer, resume=args.resume
    )
    log_event(
        "cli",
        "info",
        f"Training finished at step {result.global_step}",
        {"best": result.best_metric, "n_parameters": result.n_parameters},
    )
    return [p for p in (result.best_checkpoint, result.last_checkpoint, result.metrics_path) if p is not None]


def cmd_predict(args, cfg: ExperimentConfig) -> list[Path]:
    storage = _attach_storage(args.out.parent)
    torch.manual_seed(cfg.train.seed)
    model, _ = training.load_model(args.checkpoint, config.settings.device)
    psms = msio.prepare(msio.read_mgf_file(args.mgf, strict=not args.lenient), cfg.preprocess)
    records = infer.predict(psms, model, cfg.infer, oracle=args.oracle)
    return [infer.write_predictions(records, storage, args.out.name)]


def _annotated(args):
    truths = [p for p in msio.read_mgf_file(args.mgf, strict=not args.lenient) if p.peptide is not None]
    if not truths:
        raise DataError(f"{args.mgf} has no annotated spectra")
    records = evalx.join_records(infer.read_predictions(args.predictions), truths)
    return truths, records


def cmd_evaluate(args, cfg: ExperimentConfig) -> list[Path]:
    storage = _attach_storage(args.out)
    truths, records = _annotated(args)
    report = evalx.evaluate(records, [p.spectrum for p in truths], cfg.eval)
    return ReportExporter(storage).export(report, excel=args.xlsx)


def cmd_analyze(args, cfg: ExperimentConfig) -> list[Path]:
    storage = _attach_storage(args.out)
    truths, records = _annotated(args)
    report = evalx.evaluate(records, [p.spectrum for p in truths], cfg.eval)
    if args.checkpoint is not None:
        model, _ = training.load_model(args.checkpoint, config.settings.device)
        prepared = msio.prepare(truths, cfg.preprocess)
        losses = dict(zip((p.source_id for p in prepared), infer.imputation_losses(model, prepared)))
        report.imputation_bins = evalx.stratify_by_imputation_loss(
            records, [losses.get(r.source_id) for r in records], args.imputation_bins, cfg.eval
        )
    return ReportExporter(storage).export(report, excel=args.xlsx)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def _report_error(error: BaseException, exit_code: int):
    line = {"error": type(error).__name__, "exit_code": exit_code, "message": str(error)}
    print(json.dumps(line), file=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> CommandOutcome:
    """
    Parse argv and run one subcommand

    Returns:
        CommandOutcome: exit code (0 ok, 1 usage/config, 2 data, 3 runtime) and written files
    """
    try:
        args = build_parser().parse_args(argv)
        cfg = _experiment(args)
        written = COMMANDS[args.command](args, cfg)
        log_event("cli", "info", f"{args.command} wrote {len(written)} files")
        return CommandOutcome(0, list(written))
    except SystemExit as e:
        # --help
        return CommandOutcome(e.code if isinstance(e.code, int) else 0)
    except ImpnovoError as e:
        log_event("cli", "error", str(e))
        _report_error(e, e.exit_code)
        return CommandOutcome(e.exit_code)
    except Exception as e:
        log_event("cli", "error", f"Unexpected error: {e}")
        log_event("cli", "debug", f"Stack trace: {traceback.format_exc()}")
        _report_error(e, 3)
        return CommandOutcome(3)
    finally:
        detach_storage()


def main():
    sys.exit(run().exit_code)


if __name__ == "__main__":
    main()
