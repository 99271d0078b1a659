from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .datasets import Dataset, load_dataset
from .errors import ConfigurationError, ParseError, StorageError
from .models import ExperimentConfig, Report, Scenario
from .nn import Network
from .recognizer import (
    NO_MATCH,
    ClassificationSystem,
    Recognizer,
    VerificationSystem,
    calibrate_threshold,
    calibration_accuracy,
    enroll,
    genuine_impostor_scores,
    load_system,
    save_system,
)
from .scoring import PLAUSIBLE_TFP, EvaluationSet, Outcome, ProbeGroup
from .search import TRACE_COLUMNS, SearchResult, child_rng, search_backdoor, write_trace_csv
from .store import Digest, ModelFileInfo, hash_model, load_model, save_model, verify_model
from .training import default_architecture, remap_labels, train_fixture

logger = logging.getLogger(__name__)

PROBE_STREAM = 2
OUTCOME_EXIT_CODES = {Outcome.SUCCESSFUL: 0, Outcome.PLAUSIBLE: 10, Outcome.FAILED: 20}
PAIR_COLUMNS = ("impostor", "target", "layer_index", "fp_before", "fp_after", "a1_before", "a1_after", "outcome")
FP_PAIR_COLUMNS = ("impostor", "target", "layer_index", "fp_before", "fp_after")
BEST_LAYER_COLUMNS = ("impostor", "target", "layer_index", "runs", "fp_before", "fp_after_best", "a1_after")
FIXTURE_ACCURACY_BAND = (0.80, 0.92)
AVERAGE_COLUMNS = ("n_models", "fp_before_mean", "fp_after_mean", "a1_before_mean", "a1_after_mean")


@dataclass
class FixtureResult:
    model: ModelFileInfo
    heldout_accuracy: Optional[float]
    fixture_path: Path


@dataclass
class EnrollmentResult:
    system_path: Path
    threshold: float
    calibration_accuracy: float
    identities: List[int]


@dataclass
class AttackResult:
    report: Report
    search: SearchResult
    output_dir: Path

    @property
    def exit_code(self) -> int:
        return OUTCOME_EXIT_CODES[self.search.outcome]


@dataclass
class AggregateResult:
    fp_pairs_path: Path
    averages_path: Path
    best_by_layer_path: Path
    rows: List[List[str]] = field(default_factory=list)
    kept: int = 0


# ----------------------------------------------------------------------
# Probe partitions
# ----------------------------------------------------------------------


def _draw(candidates: np.ndarray, max_probes: int, master_seed: int) -> np.ndarray:
    """At most ``max_probes`` of ``candidates``, kept in file order."""
    if len(candidates) <= max_probes:
        return candidates
    rng = child_rng(master_seed, PROBE_STREAM, 0)
    return np.sort(rng.permutation(candidates)[:max_probes])


def classification_probes(
    dataset: Dataset, known_labels: Sequence[int], impostor: int, max_probes: int, master_seed: int = 0
) -> EvaluationSet:
    """Impostor digits should land in the "other" class; known digits in their own class; the rest in "other"."""
    chosen = _draw(np.arange(len(dataset)), max_probes, master_seed)
    images, labels = dataset.images[chosen], dataset.labels[chosen]
    classes = remap_labels(labels, known_labels)
    attacker = labels == impostor
    known = np.isin(labels, known_labels)
    unknown = ~attacker & ~known
    return EvaluationSet(
        attacker=ProbeGroup(images[attacker], np.full(attacker.sum(), NO_MATCH), labels[attacker]),
        known=ProbeGroup(images[known], classes[known], labels[known]),
        unknown=ProbeGroup(images[unknown], np.full(unknown.sum(), NO_MATCH), labels[unknown]),
    )


def verification_probes(
    dataset: Dataset, enrolled: Sequence[int], impostor: int, target: int, max_probes: int, master_seed: int = 0
) -> EvaluationSet:
    """Impostor probes claim ``target``; enrolled probes claim themselves; everyone else claims a random enrollee."""
    enrolled = sorted(enrolled)
    if target not in enrolled:
        raise ConfigurationError(f"target {target} is not enrolled (enrolled: {enrolled})")
    if impostor in enrolled:
        raise ConfigurationError(f"impostor {impostor} is enrolled")
    chosen = _draw(np.arange(len(dataset)), max_probes, master_seed)
    images, labels = dataset.images[chosen], dataset.labels[chosen]
    attacker = labels == impostor
    known = np.isin(labels, enrolled)
    unknown = ~attacker & ~known
    claim_rng = child_rng(master_seed, PROBE_STREAM, 1)
    unknown_claims = np.asarray(enrolled)[claim_rng.integers(0, len(enrolled), int(unknown.sum()))]
    return EvaluationSet(
        attacker=ProbeGroup(images[attacker], np.full(attacker.sum(), target), labels[attacker]),
        known=ProbeGroup(images[known], labels[known], labels[known]),
        unknown=ProbeGroup(images[unknown], unknown_claims, labels[unknown]),
    )


# ----------------------------------------------------------------------
# CSV helpers
# ----------------------------------------------------------------------


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def _target_text(target: Optional[int]) -> str:
    return "" if target is None else str(target)


def pair_row(report: Report) -> list[str]:
    return [
        str(report.impostor),
        _target_text(report.target),
        str(report.layer_index),
        repr(report.baseline_tfp),
        repr(report.final_tfp),
        repr(report.baseline_a1),
        repr(report.final_a1),
        report.outcome,
    ]


def write_pairs_csv(reports: Sequence[Report], path: str | Path) -> Path:
    return _write_csv(Path(path), PAIR_COLUMNS, [pair_row(r) for r in reports])


# ----------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------


class ExperimentPipeline:
    """Runs one configured experiment step: fixture training, enrollment, or attack."""

    def __init__(self, config: ExperimentConfig) -> None:
        self.config = config
        self.output_dir = Path(config.output_dir)

    def train_fixture(self) -> FixtureResult:
        cfg = self.config
        cfg.require("train_path")
        train = load_dataset(cfg.train_path, cfg.train_labels, cfg.label_count)  # type: ignore[arg-type]
        if cfg.train_limit is not None:
            train = train.take(np.arange(min(cfg.train_limit, len(train))))
        heldout = None
        if cfg.test_path is not None:
            test = load_dataset(cfg.test_path, cfg.test_labels, cfg.label_count)
            heldout = (test.images, remap_labels(test.labels, cfg.known_labels))

        arch = default_architecture(train.input_shape, len(cfg.known_labels) + 1)
        result = train_fixture(
            arch,
            train.images,
            remap_labels(train.labels, cfg.known_labels),
            epochs=cfg.epochs,
            lr=cfg.learning_rate,
            seed=cfg.master_seed,
            batch_size=cfg.batch_size,
            heldout=heldout,
        )
        model = save_model(result.network, Path(cfg.model_path or self.output_dir / "model.bdnw"))
        fixture = {
            "model_path": str(model.path),
            "digest": str(model.digest),
            "heldout_accuracy": result.heldout_accuracy,
            "epoch_losses": result.epoch_losses,
            "seed": cfg.master_seed,
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "known_labels": list(cfg.known_labels),
            "train_records": len(train),
        }
        fixture_path = model.path.parent / "fixture.json"
        try:
            fixture_path.write_text(json.dumps(fixture, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write {fixture_path}: {exc}") from exc
        logger.info("fixture trained on %d records, digest %s", len(train), model.digest)
        check_fixture_accuracy(result.heldout_accuracy)
        return FixtureResult(model=model, heldout_accuracy=result.heldout_accuracy, fixture_path=fixture_path)

    def enroll(self) -> EnrollmentResult:
        cfg = self.config
        cfg.require("model_path", "gallery_path")
        net = load_model(cfg.model_path)  # type: ignore[arg-type]
        extractor = net.feature_extractor()
        gallery = load_dataset(cfg.gallery_path, cfg.gallery_labels, cfg.label_count)  # type: ignore[arg-type]
        if cfg.calibration_path is None:
            # calibrate on the images that follow each gallery in the same file
            calibration, offset = gallery, cfg.gallery_size
        else:
            calibration, offset = load_dataset(cfg.calibration_path, cfg.calibration_labels, cfg.label_count), 0

        galleries = {i: gallery.images[gallery.indices_of(i, 0, cfg.gallery_size)] for i in cfg.known_labels}
        enrollments = enroll(extractor, galleries)
        picked = np.concatenate([calibration.indices_of(i, offset, cfg.calibration_size) for i in cfg.known_labels])
        picked = np.sort(picked)
        genuine, impostor = genuine_impostor_scores(extractor, enrollments, calibration.images[picked], calibration.labels[picked])
        threshold = calibrate_threshold(genuine, impostor)
        accuracy = calibration_accuracy(genuine, impostor, threshold)

        system = VerificationSystem(extractor, enrollments, threshold)
        path = Path(cfg.system_path or self.output_dir / "system.json")
        save_system(
            system,
            path,
            model_digest=str(hash_model(cfg.model_path)),  # type: ignore[arg-type]
            feature_layers=len(extractor.layers),
            calibration_accuracy=accuracy,
        )
        logger.info("threshold %.6f, calibration accuracy %.4f", threshold, accuracy)
        return EnrollmentResult(path, threshold, accuracy, list(system.identities))

    # ------------------------------------------------------------------

    def attack(self) -> list[AttackResult]:
        cfg = self.config
        cfg.validate()
        model_path = Path(cfg.model_path)  # type: ignore[arg-type]
        net = load_model(model_path)
        digest_before = hash_model(model_path)
        evaluation = load_dataset(cfg.evaluation_path, cfg.evaluation_labels, cfg.label_count)  # type: ignore[arg-type]

        system: Recognizer
        if cfg.scenario_kind is Scenario.VERIFICATION:
            system, stored = load_system(cfg.system_path, net)  # type: ignore[arg-type]
            if stored.get("model_digest") != str(digest_before):
                logger.warning("%s was enrolled against a different model file", cfg.system_path)
        else:
            system = ClassificationSystem(net)

        jobs = cfg.jobs()
        results = []
        for impostor, target, layer in jobs:
            out = self.output_dir
            if len(jobs) > 1:
                name = f"pair_{impostor}_{_target_text(target) or 'other'}"
                out = out / (f"{name}_layer{layer}" if cfg.layers else name)
            results.append(
                self._attack_pair(system, net, model_path, digest_before, evaluation, impostor, target, layer, out)
            )
        if len(jobs) > 1:
            write_pairs_csv([r.report for r in results], self.output_dir / "pairs.csv")
        return results

    def _attack_pair(
        self,
        system: Recognizer,
        net: Network,
        model_path: Path,
        digest_before: Digest,
        evaluation: Dataset,
        impostor: int,
        target: Optional[int],
        layer: int,
        out: Path,
    ) -> AttackResult:
        cfg = self.config
        if isinstance(system, VerificationSystem):
            assert target is not None
            eval_set = verification_probes(evaluation, system.identities, impostor, target, cfg.max_probes, cfg.master_seed)
        else:
            eval_set = classification_probes(evaluation, cfg.known_labels, impostor, cfg.max_probes, cfg.master_seed)
        eval_set.validate()
        logger.info(
            "pair %s->%s: %d attacker, %d known, %d unknown probes",
            impostor,
            target,
            len(eval_set.attacker),
            len(eval_set.known),
            len(eval_set.unknown),
        )

        search_cfg = cfg.search_config(impostor, target, layer)
        result = search_backdoor(system, search_cfg, eval_set)

        model_out = out / "backdoored.bdnw"
        if result.modified:
            backdoored = net.with_layer_weights(layer, result.final_network.layer_weights(layer))
            digest_after = save_model(backdoored, model_out).digest
        else:
            try:
                out.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(model_path, model_out)
            except OSError as exc:
                raise StorageError(f"cannot write {model_out}: {exc}") from exc
            digest_after = hash_model(model_out)

        trace_path = write_trace_csv(result, out / "trace.csv")
        report = Report(
            scenario=cfg.scenario_kind.value,
            impostor=impostor,
            target=target,
            layer_index=search_cfg.layer_index,
            subset_fraction=search_cfg.subset_fraction,
            sets=search_cfg.sets,
            iterations=search_cfg.iterations,
            epsilon=search_cfg.epsilon,
            metric=search_cfg.metric.value,
            selection_mode=search_cfg.selection_mode.value,
            perturbation=search_cfg.perturbation.value,
            master_seed=search_cfg.master_seed,
            seed_scheme=result.seed_scheme,
            baseline_accuracy=result.baseline_accuracy,
            baseline_tfp=result.baseline_score.t_fp,
            final_tfp=result.final_score.t_fp,
            baseline_a1=result.baseline_score.a_1,
            final_a1=result.final_score.a_1,
            outcome=result.outcome.value,
            digest_before=str(digest_before),
            digest_after=str(digest_after),
            model_path=str(model_path),
            trace_path=trace_path.name,
            pairs_path="pairs.csv",
            baseline_score=result.baseline_score.csv_row(),
            final_score=result.final_score.csv_row(),
        )
        write_pairs_csv([report], out / report.pairs_path)
        summary_path = out / "summary.json"
        try:
            summary_path.write_text(report.to_json(), encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write {summary_path}: {exc}") from exc
        return AttackResult(report=report, search=result, output_dir=out)


def check_fixture_accuracy(accuracy: Optional[float]) -> bool:
    """True when the held-out accuracy lies in the fixture band; a warning otherwise."""
    if accuracy is None:
        return True
    low, high = FIXTURE_ACCURACY_BAND
    if low <= accuracy <= high:
        return True
    logger.warning("held-out accuracy %.4f lies outside the fixture band [%.2f, %.2f]", accuracy, low, high)
    return False


def best_exit_code(results: Sequence[AttackResult]) -> int:
    return min(r.exit_code for r in results)


def audit(model_path: str | Path, expected: str) -> bool:
    return verify_model(model_path, Digest.parse(expected))


# ----------------------------------------------------------------------
# Aggregation over finished runs
# ----------------------------------------------------------------------


def read_summary(path: str | Path) -> Report:
    path = Path(path)
    try:
        return Report.from_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError, TypeError) as exc:
        raise ParseError(f"cannot read run summary {path}: {exc}") from exc


def final_point(trace_path: str | Path, report: Report) -> tuple[float, float]:
    """(T_fp, A_1) of the last adopted candidate in a trace, or the baseline when none was adopted."""
    trace_path = Path(trace_path)
    point = (report.baseline_tfp, report.baseline_a1)
    try:
        with trace_path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or tuple(header) != TRACE_COLUMNS:
                raise ParseError(f"{trace_path}: unexpected trace header {header}")
            for line, row in enumerate(reader, start=2):
                if len(row) != len(TRACE_COLUMNS):
                    raise ParseError(f"{trace_path}:{line}: expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
                try:
                    t_fp, a_1, adopted = float(row[2]), float(row[3]), int(row[6])
                except ValueError as exc:
                    raise ParseError(f"{trace_path}:{line}: {exc}") from exc
                if adopted:
                    point = (t_fp, a_1)
    except OSError as exc:
        raise ParseError(f"cannot read trace {trace_path}: {exc}") from exc
    return point


def aggregate_traces(trace_paths: Sequence[str | Path], output_dir: str | Path) -> AggregateResult:
    """Before/after false-positive pairs at or above the plausible rate, their averages,
    and the best run per (impostor, target, layer) over every trace.
    """
    if not trace_paths:
        raise ConfigurationError("report needs at least one trace")
    output_dir = Path(output_dir)
    rows = []
    points = []
    best: dict[tuple[int, int, int], list] = {}
    for trace_path in trace_paths:
        trace_path = Path(trace_path)
        report = read_summary(trace_path.parent / "summary.json")
        fp_after, a1_after = final_point(trace_path, report)
        key = (report.impostor, NO_MATCH if report.target is None else report.target, report.layer_index)
        entry = best.setdefault(key, [0, report, fp_after, a1_after])
        entry[0] += 1
        if fp_after > entry[2]:
            entry[1:] = [report, fp_after, a1_after]
        if fp_after < PLAUSIBLE_TFP:
            logger.debug("%s: after-FP %.4f below the plausible rate, left out", trace_path, fp_after)
            continue
        rows.append(
            [
                str(report.impostor),
                _target_text(report.target),
                str(report.layer_index),
                repr(report.baseline_tfp),
                repr(fp_after),
            ]
        )
        points.append((report.baseline_tfp, fp_after, report.baseline_a1, a1_after))

    fp_pairs = _write_csv(output_dir / "fp_pairs.csv", FP_PAIR_COLUMNS, rows)
    averages: list[list[str]] = []
    if points:
        means = np.mean(np.asarray(points, dtype=np.float64), axis=0)
        averages.append([str(len(points))] + [repr(float(m)) for m in means])
    averages_path = _write_csv(output_dir / "averages.csv", AVERAGE_COLUMNS, averages)
    best_rows = [
        [
            str(r.impostor),
            _target_text(r.target),
            str(r.layer_index),
            str(runs),
            repr(r.baseline_tfp),
            repr(fp),
            repr(a1),
        ]
        for _, (runs, r, fp, a1) in sorted(best.items(), key=lambda item: item[0])
    ]
    best_path = _write_csv(output_dir / "best_by_layer.csv", BEST_LAYER_COLUMNS, best_rows)
    logger.info("kept %d of %d runs at or above T_fp %.2f", len(rows), len(trace_paths), PLAUSIBLE_TFP)
    return AggregateResult(
        fp_pairs_path=fp_pairs, averages_path=averages_path, best_by_layer_path=best_path, rows=rows, kept=len(rows)
    )
