from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, StorageError
from .nn import Network
from .recognizer import Recognizer
from .scoring import EvaluationSet, MetricChoice, Outcome, ScoreBundle, classify_outcome, evaluate, objective_accept

logger = logging.getLogger(__name__)

SUBSET_STREAM = 0
PERTURBATION_STREAM = 1
SEED_SCHEME = (
    "numpy.random.SeedSequence([master_seed, stream, round, sample]); "
    "stream 0 = subset, 1 = perturbation, 2 = probe draw"
)

TRACE_COLUMNS = ("round", "sample", "T_fp", "A_1", "metric_value", "accepted", "adopted")


class SelectionMode(str, Enum):
    TFP_MAX = "tfp_max"
    METRIC_MIN = "metric_min"


class PerturbationKind(str, Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"
    UNIFORM = "uniform"


def child_rng(master_seed: int, stream: int, round_index: int, sample: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, stream, round_index, sample]))


@dataclass(frozen=True)
class SearchConfig:
    layer_index: int = 0
    subset_fraction: float = 0.01
    sets: int = 1
    iterations: int = 1
    epsilon: float = 0.005
    metric: MetricChoice = MetricChoice.ACC_ALL
    selection_mode: SelectionMode = SelectionMode.TFP_MAX
    baseline_accuracy: float | None = None
    master_seed: int = 0
    impostor: int | None = None
    target: int | None = None
    perturbation: PerturbationKind = PerturbationKind.ADDITIVE
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", MetricChoice(self.metric))
        object.__setattr__(self, "selection_mode", SelectionMode(self.selection_mode))
        object.__setattr__(self, "perturbation", PerturbationKind(self.perturbation))
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigurationError(f"subset_fraction must lie in (0, 1], got {self.subset_fraction}")
        if self.sets < 0:
            raise ConfigurationError(f"sets must be >= 0, got {self.sets}")
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.baseline_accuracy is not None and not 0.0 <= self.baseline_accuracy <= 1.0:
            raise ConfigurationError(f"baseline_accuracy must lie in [0, 1], got {self.baseline_accuracy}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigurationError("master_seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True, eq=False)
class Candidate:
    layer_weights: np.ndarray
    score: ScoreBundle
    round: int
    sample: int
    accepted: bool


@dataclass(frozen=True)
class TraceRecord:
    round: int
    sample: int
    t_fp: float
    a_1: float
    metric_value: float
    accepted: bool
    adopted: bool

    def csv_row(self) -> list[str]:
        return [
            str(self.round),
            str(self.sample),
            repr(self.t_fp),
            repr(self.a_1),
            repr(self.metric_value),
            str(int(self.accepted)),
            str(int(self.adopted)),
        ]


@dataclass(eq=False)
class SearchResult:
    final_network: Network
    baseline_score: ScoreBundle
    final_score: ScoreBundle
    outcome: Outcome
    baseline_accuracy: float
    bound: float
    config: SearchConfig
    trace: list[TraceRecord] = field(default_factory=list)
    adopted_subsets: list[tuple[int, np.ndarray]] = field(default_factory=list)
    seed_scheme: str = SEED_SCHEME

    @property
    def modified(self) -> bool:
        return bool(self.adopted_subsets)


# ----------------------------------------------------------------------
# Building blocks
# ----------------------------------------------------------------------


def max_abs_weight(layer_weights: np.ndarray) -> float:
    """Largest magnitude among the original weights; caps every perturbation."""
    layer_weights = np.asarray(layer_weights)
    if layer_weights.size == 0:
        raise ConfigurationError("cannot bound perturbations of an empty weight tensor")
    return float(np.max(np.abs(layer_weights.astype(np.float64))))


def subset_size(weight_count: int, fraction: float) -> int:
    return max(1, int(round(fraction * weight_count)))


def sample_subset(weight_count: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted, distinct flat indices drawn uniformly without replacement."""
    if weight_count < 1:
        raise ConfigurationError("cannot sample from an empty layer")
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"subset fraction must lie in (0, 1], got {fraction}")
    size = min(weight_count, subset_size(weight_count, fraction))
    return np.sort(rng.choice(weight_count, size=size, replace=False))


def perturb_subset(
    base_weights: np.ndarray,
    subset: np.ndarray,
    bound: float,
    rng: np.random.Generator,
    kind: PerturbationKind = PerturbationKind.ADDITIVE,
) -> np.ndarray:
    """Copy of ``base_weights`` with the subset moved by at most ``bound``.

    Entries outside the subset are copied bit for bit.
    """
    out = np.array(base_weights, dtype=np.float32, copy=True)
    subset = np.asarray(subset, dtype=np.int64)
    if bound < 0:
        raise ConfigurationError(f"perturbation bound must be >= 0, got {bound}")
    if subset.size == 0 or bound == 0:
        return out
    flat = out.reshape(-1)
    base = flat[subset].astype(np.float64)
    kind = PerturbationKind(kind)
    if kind is PerturbationKind.ADDITIVE:
        delta = rng.uniform(-bound, bound, subset.size)
    elif kind is PerturbationKind.UNIFORM:
        delta = np.full(subset.size, rng.uniform(-bound, bound))
    else:
        delta = np.clip(base * rng.uniform(-1.0, 1.0, subset.size), -bound, bound)
    moved = (base + delta).astype(np.float32)
    # float32 rounding may overshoot the bound by half an ulp; pull those back one step.
    overshoot = np.abs(moved.astype(np.float64) - base) > bound
    moved[overshoot] = np.nextafter(moved[overshoot], base[overshoot].astype(np.float32))
    flat[subset] = moved
    return out


def _selection_value(score: ScoreBundle, mode: SelectionMode) -> float:
    return score.t_fp if mode is SelectionMode.TFP_MAX else score.metric_value


def _better(value: float, incumbent: float, mode: SelectionMode) -> bool:
    return value > incumbent if mode is SelectionMode.TFP_MAX else value < incumbent


def select_candidate(candidates: list[Candidate], mode: SelectionMode) -> Candidate | None:
    """Best budget-respecting candidate; earlier samples win ties."""
    winner: Candidate | None = None
    for candidate in sorted(candidates, key=lambda c: c.sample):
        if not candidate.accepted:
            continue
        if winner is None or _better(_selection_value(candidate.score, mode), _selection_value(winner.score, mode), mode):
            winner = candidate
    return winner


# ----------------------------------------------------------------------
# Search
# ----------------------------------------------------------------------


def search_backdoor(system: Recognizer, cfg: SearchConfig, eval_set: EvaluationSet) -> SearchResult:
    """Greedy stochastic search over random weight subsets of one layer.

    Each round draws one subset, scores ``cfg.iterations`` fresh perturbations
    of the round-start weights, and carries the best budget-respecting
    candidate forward when it beats everything adopted so far.
    """
    net = system.network
    layer = cfg.layer_index
    original = net.layer_weights(layer)
    bound = max_abs_weight(original)
    if bound == 0.0:
        logger.warning("layer %d is all zeros: every perturbation is zero", layer)

    baseline = evaluate(system, eval_set, cfg.metric)
    a_0 = baseline.a_1 if cfg.baseline_accuracy is None else cfg.baseline_accuracy
    staged = eval_set.advance(net, layer)
    logger.info(
        "baseline: T_fp=%.4f A_0=%.4f %s=%.4f (bound %.4g, %d weights)",
        baseline.t_fp,
        a_0,
        cfg.metric.value,
        baseline.metric_value,
        bound,
        original.size,
    )

    current = original
    best_value = _selection_value(baseline, cfg.selection_mode)
    final_score = baseline
    trace: list[TraceRecord] = []
    adopted: list[tuple[int, np.ndarray]] = []

    def run(round_index: int, subset: np.ndarray, start: np.ndarray, sample: int) -> Candidate:
        rng = child_rng(cfg.master_seed, PERTURBATION_STREAM, round_index, sample)
        weights = perturb_subset(start, subset, bound, rng, cfg.perturbation)
        candidate_system = system.with_network(net.with_layer_weights(layer, weights))
        score = evaluate(candidate_system, staged, cfg.metric)
        return Candidate(weights, score, round_index, sample, objective_accept(score, a_0, cfg.epsilon))

    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for round_index in range(cfg.sets):
            subset = sample_subset(original.size, cfg.subset_fraction, child_rng(cfg.master_seed, SUBSET_STREAM, round_index))
            samples = range(cfg.iterations)
            start = current
            if executor is not None:
                candidates = list(executor.map(lambda s: run(round_index, subset, start, s), samples))
            else:
                candidates = [run(round_index, subset, start, s) for s in samples]

            winner = select_candidate(candidates, cfg.selection_mode)
            adopt = winner is not None and _better(
                _selection_value(winner.score, cfg.selection_mode), best_value, cfg.selection_mode
            )
            if adopt:
                assert winner is not None
                current = winner.layer_weights
                best_value = _selection_value(winner.score, cfg.selection_mode)
                final_score = winner.score
                adopted.append((round_index, subset))
                logger.info(
                    "round %d: adopted sample %d (T_fp=%.4f A_1=%.4f)",
                    round_index,
                    winner.sample,
                    winner.score.t_fp,
                    winner.score.a_1,
                )
            else:
                logger.debug("round %d: no improving candidate", round_index)
            for c in candidates:
                trace.append(
                    TraceRecord(
                        round=c.round,
                        sample=c.sample,
                        t_fp=c.score.t_fp,
                        a_1=c.score.a_1,
                        metric_value=c.score.metric_value,
                        accepted=c.accepted,
                        adopted=adopt and c is winner,
                    )
                )
    finally:
        if executor is not None:
            executor.shutdown()

    if cfg.sets and not any(record.accepted for record in trace):
        logger.warning("no candidate stayed within the accuracy budget of %.4f", cfg.epsilon)

    final_network = net.with_layer_weights(layer, current) if adopted else net
    outcome = classify_outcome(final_score, a_0, cfg.epsilon) if adopted else Outcome.FAILED
    logger.info("search finished: %s (T_fp %.4f -> %.4f)", outcome.value, baseline.t_fp, final_score.t_fp)
    return SearchResult(
        final_network=final_network,
        baseline_score=baseline,
        final_score=final_score,
        outcome=outcome,
        baseline_accuracy=a_0,
        bound=bound,
        config=cfg,
        trace=trace,
        adopted_subsets=adopted,
    )


def write_trace_csv(result: SearchResult, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            writer.writerows(record.csv_row() for record in result.trace)
    except OSError as exc:
        raise StorageError(f"cannot write trace {path}: {exc}") from exc
    return path
