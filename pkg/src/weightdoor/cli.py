from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional

from .datasets import write_packed
from .errors import IngestionError, StorageError, WeightdoorError
from .models import ExperimentConfig
from .pipeline import ExperimentPipeline, aggregate_traces, audit, best_exit_code
from .synth import make_digits

logger = logging.getLogger(__name__)

# key -> (argparse keyword arguments, help)
_FLAGS: dict[str, tuple[dict[str, Any], str]] = {
    "scenario": ({"choices": ["classification", "verification"]}, "Recognition setting"),
    "model_path": ({}, "Model file (BDNW)"),
    "system_path": ({}, "Verification system file (JSON)"),
    "train_path": ({}, "Training images (packed or IDX)"),
    "train_labels": ({}, "IDX labels for --train-path"),
    "test_path": ({}, "Held-out images for the fixture accuracy"),
    "test_labels": ({}, "IDX labels for --test-path"),
    "epochs": ({"type": int}, "Training epochs"),
    "learning_rate": ({"type": float}, "SGD learning rate"),
    "batch_size": ({"type": int}, "SGD minibatch size"),
    "train_limit": ({"type": int}, "Train on the first N records only"),
    "gallery_path": ({}, "Enrollment images"),
    "gallery_labels": ({}, "IDX labels for --gallery-path"),
    "calibration_path": ({}, "Calibration images (default: the gallery file, after each gallery)"),
    "calibration_labels": ({}, "IDX labels for --calibration-path"),
    "evaluation_path": ({}, "Probe images scored during the search"),
    "evaluation_labels": ({}, "IDX labels for --evaluation-path"),
    "label_count": ({"type": int}, "Number of labels in the data; every label must lie below it"),
    "known_labels": ({"type": int, "nargs": "+"}, "Known classes / enrolled identities"),
    "gallery_size": ({"type": int}, "Images per identity used for enrollment"),
    "calibration_size": ({"type": int}, "Images per identity used for calibration"),
    "max_probes": ({"type": int}, "Upper bound on evaluation probes"),
    "impostor": ({"type": int}, "Attacker identity"),
    "target": ({"type": int}, "Claimed identity (verification only)"),
    "pairs": ({"nargs": "+"}, "Batch of IMPOSTOR[:TARGET] pairs"),
    "layer_index": ({"type": int}, "Index of the attacked layer"),
    "layers": ({"type": int, "nargs": "+"}, "Batch of attacked layers, run for every pair"),
    "subset_fraction": ({"type": float}, "Share of the layer's weights perturbed per round"),
    "sets": ({"type": int}, "Number of subset rounds"),
    "iterations": ({"type": int}, "Candidates sampled per round"),
    "epsilon": ({"type": float}, "Tolerated accuracy drop"),
    "metric": ({"choices": ["ACC_all", "ACC_2xIfalse", "ACC_all_plus_I", "ACC_combo"]}, "Candidate metric"),
    "selection_mode": ({"choices": ["tfp_max", "metric_min"]}, "Rule picking a round's winner"),
    "perturbation": ({"choices": ["additive", "multiplicative", "uniform"]}, "Perturbation kind"),
    "baseline_accuracy": ({"type": float}, "Override the measured baseline accuracy A_0"),
    "master_seed": ({"type": int}, "Seed every random draw derives from"),
    "workers": ({"type": int}, "Threads evaluating candidates"),
    "output_dir": ({}, "Directory receiving the outputs"),
}

_TRAIN_KEYS = ["train_path", "train_labels", "test_path", "test_labels", "label_count", "known_labels", "epochs",
               "learning_rate", "batch_size", "train_limit", "master_seed", "model_path", "output_dir"]
_ENROLL_KEYS = ["model_path", "system_path", "gallery_path", "gallery_labels", "calibration_path",
                "calibration_labels", "label_count", "known_labels", "gallery_size", "calibration_size", "output_dir"]
_ATTACK_KEYS = [k for k in _FLAGS if k not in {"train_path", "train_labels", "test_path", "test_labels", "epochs",
                                                "learning_rate", "batch_size", "train_limit"}]

_DATASET_KEYS = ("train_path", "test_path", "gallery_path", "calibration_path", "evaluation_path",
                 "train_labels", "test_labels", "gallery_labels", "calibration_labels", "evaluation_labels")


def _add_config_flags(parser: argparse.ArgumentParser, keys: list[str]) -> None:
    parser.add_argument("--config", type=Path, default=None, help="Flat JSON configuration file")
    for key in keys:
        kwargs, help_text = _FLAGS[key]
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=help_text, **kwargs)


def load_config(args: argparse.Namespace, keys: list[str]) -> ExperimentConfig:
    """``--config`` file first, then every flag that was given."""
    config = ExperimentConfig.from_file(args.config) if args.config is not None else ExperimentConfig()
    return config.merge({key: getattr(args, key) for key in keys})


def check_inputs(config: ExperimentConfig, keys: tuple[str, ...]) -> None:
    """Fail before any work starts when a configured input file is missing."""
    for key in keys:
        value = getattr(config, key)
        if value is None:
            continue
        path = Path(value)
        error = IngestionError if key in _DATASET_KEYS else StorageError
        if not path.exists():
            raise error(f"file not found: {path}")
        if not path.is_file():
            raise error(f"not a regular file: {path}")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Search for weight-perturbation backdoors in small recognizers.")
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        default=False,
        help="Enable verbose (debug) logging",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    digits = commands.add_parser("make-digits", help="Write a synthetic seven-segment digit dataset")
    digits.add_argument("output", type=Path, help="Packed-tensor file to write")
    digits.add_argument("--count", type=int, default=6000, help="Number of images (default: 6000)")
    digits.add_argument("--seed", type=int, default=0, help="Generator seed (default: 0)")
    digits.add_argument("--size", type=int, default=16, help="Image side in pixels (default: 16)")
    digits.add_argument("--noise", type=float, default=0.15, help="Pixel noise level (default: 0.15)")

    _add_config_flags(commands.add_parser("train-fixture", help="Train the 6-class fixture model"), _TRAIN_KEYS)
    _add_config_flags(commands.add_parser("enroll", help="Enroll identities and calibrate a threshold"), _ENROLL_KEYS)
    _add_config_flags(commands.add_parser("attack", help="Run the backdoor search"), _ATTACK_KEYS)

    audit_cmd = commands.add_parser("audit", help="Compare a model file with a known-good digest")
    audit_cmd.add_argument("model", type=Path, help="Model file")
    audit_cmd.add_argument("digest", help="Expected digest, 'sha256:<hex>' or bare hex")

    report = commands.add_parser("report", help="Aggregate attack traces into plotting tables")
    report.add_argument("traces", type=Path, nargs="+", help="trace.csv files (summary.json must sit beside each)")
    report.add_argument("--output-dir", type=Path, default=Path("."), help="Where the tables go (default: .)")
    return parser


def cmd_make_digits(args: argparse.Namespace) -> int:
    dataset = make_digits(args.count, args.seed, size=args.size, noise=args.noise)
    path = write_packed(dataset, args.output)
    print(f"Wrote {len(dataset)} digits to {path}")
    return 0


def cmd_train_fixture(args: argparse.Namespace) -> int:
    config = load_config(args, _TRAIN_KEYS)
    check_inputs(config, ("train_path", "train_labels", "test_path", "test_labels"))
    result = ExperimentPipeline(config).train_fixture()
    print(f"Model: {result.model.path}")
    print(f"  Digest: {result.model.digest}")
    if result.heldout_accuracy is not None:
        print(f"  Held-out accuracy: {result.heldout_accuracy:.4f}")
    return 0


def cmd_enroll(args: argparse.Namespace) -> int:
    config = load_config(args, _ENROLL_KEYS)
    config.require("model_path")
    check_inputs(config, ("model_path", "gallery_path", "gallery_labels", "calibration_path", "calibration_labels"))
    result = ExperimentPipeline(config).enroll()
    print(f"System: {result.system_path}")
    print(f"  Identities: {', '.join(str(i) for i in result.identities)}")
    print(f"  Threshold: {result.threshold!r}")
    print(f"  Calibration accuracy: {result.calibration_accuracy:.4f}")
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    config = load_config(args, _ATTACK_KEYS)
    check_inputs(config, ("model_path", "system_path", "evaluation_path", "evaluation_labels"))
    results = ExperimentPipeline(config).attack()
    for result in results:
        report = result.report
        print(f"Pair {report.impostor} -> {report.target if report.target is not None else 'any known class'}:")
        print(f"  T_fp: {report.baseline_tfp:.4f} -> {report.final_tfp:.4f}")
        print(f"  A_1: {report.baseline_a1:.4f} -> {report.final_a1:.4f} (A_0 {report.baseline_accuracy:.4f})")
        print(f"  Outcome: {report.outcome}")
        print(f"  Output: {result.output_dir}")
    return best_exit_code(results)


def cmd_audit(args: argparse.Namespace) -> int:
    if audit(args.model, args.digest):
        print(f"match: {args.model}")
        return 0
    print(f"MISMATCH: {args.model} does not hash to {args.digest}")
    return 1


def cmd_report(args: argparse.Namespace) -> int:
    result = aggregate_traces(args.traces, args.output_dir)
    print(f"Kept {result.kept} of {len(args.traces)} runs")
    print(f"  {result.fp_pairs_path}")
    print(f"  {result.averages_path}")
    print(f"  {result.best_by_layer_path}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "make-digits": cmd_make_digits,
    "train-fixture": cmd_train_fixture,
    "enroll": cmd_enroll,
    "attack": cmd_attack,
    "audit": cmd_audit,
    "report": cmd_report,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(name)s %(levelname)s: %(message)s",
    )

    try:
        return COMMANDS[args.command](args)
    except WeightdoorError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
