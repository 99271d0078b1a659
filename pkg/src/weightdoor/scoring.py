from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ConfigurationError, EvaluationError, MetricError
from .nn import Network, forward_batch
from .recognizer import Recognizer

logger = logging.getLogger(__name__)

PLAUSIBLE_TFP = 0.15
SUCCESSFUL_TFP = 0.40

CSV_COLUMNS = ("I_false", "I_total", "K_false", "K_total", "U_true", "U_total", "wrong", "total", "T_fp", "A_1", "metric_value")


class MetricChoice(str, Enum):
    """Candidate metrics; lower is better for all four."""

    ACC_ALL = "ACC_all"
    ACC_2X_IFALSE = "ACC_2xIfalse"
    ACC_ALL_PLUS_I = "ACC_all_plus_I"
    ACC_COMBO = "ACC_combo"


class Outcome(str, Enum):
    FAILED = "failed"
    PLAUSIBLE = "plausible"
    SUCCESSFUL = "successful"


@dataclass(frozen=True, eq=False)
class ProbeGroup:
    """Stacked probes with the identity each one claims and the identity it really is."""

    inputs: np.ndarray
    claims: np.ndarray
    identities: np.ndarray

    def __post_init__(self) -> None:
        claims = np.asarray(self.claims, dtype=np.int64)
        identities = np.asarray(self.identities, dtype=np.int64)
        if not len(self.inputs) == len(claims) == len(identities):
            raise EvaluationError("probe group arrays differ in length")
        object.__setattr__(self, "claims", claims)
        object.__setattr__(self, "identities", identities)

    def __len__(self) -> int:
        return len(self.inputs)

    def with_inputs(self, inputs: np.ndarray) -> "ProbeGroup":
        return ProbeGroup(inputs, self.claims, self.identities)


@dataclass(frozen=True, eq=False)
class EvaluationSet:
    """Attacker (I), known (K) and unknown (U) probes.

    ``layer`` is the index of the layer the stored inputs enter; 0 means raw probes.
    """

    attacker: ProbeGroup
    known: ProbeGroup
    unknown: ProbeGroup
    layer: int = 0

    def groups(self) -> tuple[ProbeGroup, ProbeGroup, ProbeGroup]:
        return self.attacker, self.known, self.unknown

    def validate(self) -> None:
        for name, group in zip(("attacker", "known", "unknown"), self.groups()):
            if len(group) == 0:
                raise EvaluationError(f"{name} probe partition is empty")
        attacker_ids = set(self.attacker.identities.tolist())
        known_ids = set(self.known.identities.tolist())
        unknown_ids = set(self.unknown.identities.tolist())
        if attacker_ids & known_ids:
            raise EvaluationError(f"attacker identities {sorted(attacker_ids & known_ids)} are also known")
        if unknown_ids & (known_ids | attacker_ids):
            raise EvaluationError("unknown probes overlap known or attacker identities")

    def advance(self, net: Network, layer_index: int) -> "EvaluationSet":
        """Replace stored inputs with the activations entering ``layer_index``."""
        if layer_index < self.layer:
            raise ConfigurationError(f"cannot rewind evaluation set from layer {self.layer} to {layer_index}")
        if layer_index == self.layer:
            return self
        staged = [g.with_inputs(forward_batch(net, g.inputs, start=self.layer, stop=layer_index)) for g in self.groups()]
        return EvaluationSet(*staged, layer=layer_index)

    @property
    def size(self) -> int:
        return sum(len(g) for g in self.groups())


@dataclass(frozen=True)
class ScoreBundle:
    i_false: int
    i_total: int
    k_false: int
    k_total: int
    u_true: int
    u_total: int
    metric: MetricChoice = MetricChoice.ACC_ALL

    def __post_init__(self) -> None:
        for errors, total in ((self.i_false, self.i_total), (self.k_false, self.k_total), (self.u_true, self.u_total)):
            if not 0 <= errors <= total:
                raise MetricError(f"inconsistent counters: {errors} errors out of {total}")
        object.__setattr__(self, "metric", MetricChoice(self.metric))

    @property
    def wrong(self) -> int:
        return self.i_false + self.k_false + self.u_true

    @property
    def total(self) -> int:
        return self.i_total + self.k_total + self.u_total

    @property
    def t_fp(self) -> float:
        """Share of attacker probes accepted as the target."""
        if self.i_total == 0:
            raise MetricError("T_fp needs at least one attacker probe")
        return 1.0 - self.i_false / self.i_total

    @property
    def a_1(self) -> float:
        """Accuracy on everything that is not the attacker."""
        others = self.k_total + self.u_total
        if others == 0:
            raise MetricError("A_1 needs known or unknown probes")
        return (others - self.k_false - self.u_true) / others

    @property
    def metric_value(self) -> float:
        return metric_value(self, self.metric)

    def with_metric(self, metric: MetricChoice) -> "ScoreBundle":
        return replace(self, metric=MetricChoice(metric))

    def merge(self, other: "ScoreBundle") -> "ScoreBundle":
        """Counter-wise sum; associative and order independent."""
        return ScoreBundle(
            self.i_false + other.i_false,
            self.i_total + other.i_total,
            self.k_false + other.k_false,
            self.k_total + other.k_total,
            self.u_true + other.u_true,
            self.u_total + other.u_total,
            self.metric,
        )

    @staticmethod
    def csv_header() -> list[str]:
        return list(CSV_COLUMNS)

    def csv_row(self) -> list[str]:
        counters = [self.i_false, self.i_total, self.k_false, self.k_total, self.u_true, self.u_total, self.wrong, self.total]
        return [str(c) for c in counters] + [repr(self.t_fp), repr(self.a_1), repr(self.metric_value)]


def metric_value(b: ScoreBundle, metric: MetricChoice) -> float:
    metric = MetricChoice(metric)
    try:
        if metric is MetricChoice.ACC_ALL:
            return b.wrong / b.total
        if metric is MetricChoice.ACC_2X_IFALSE:
            return (b.wrong + b.i_false) / b.total
        if metric is MetricChoice.ACC_ALL_PLUS_I:
            return b.wrong / b.total + b.i_false / b.i_total
        return b.i_false / b.i_total + b.k_false / b.k_total + b.u_true / b.u_total
    except ZeroDivisionError as exc:
        raise MetricError(f"{metric.value} is undefined for these counters: {b}") from exc


def tally(
    attacker_accepted: np.ndarray,
    known_correct: np.ndarray,
    unknown_accepted: np.ndarray,
    metric: MetricChoice = MetricChoice.ACC_ALL,
) -> ScoreBundle:
    """Count errors: rejected attackers, missed knowns, accepted unknowns."""
    attacker_accepted = np.asarray(attacker_accepted, dtype=bool)
    known_correct = np.asarray(known_correct, dtype=bool)
    unknown_accepted = np.asarray(unknown_accepted, dtype=bool)
    return ScoreBundle(
        i_false=int(np.count_nonzero(~attacker_accepted)),
        i_total=len(attacker_accepted),
        k_false=int(np.count_nonzero(~known_correct)),
        k_total=len(known_correct),
        u_true=int(np.count_nonzero(unknown_accepted)),
        u_total=len(unknown_accepted),
        metric=metric,
    )


def evaluate(
    system: Recognizer,
    eval_set: EvaluationSet,
    metric: MetricChoice = MetricChoice.ACC_ALL,
    executor: Executor | None = None,
) -> ScoreBundle:
    """Run every probe through ``system.network`` and tally the I/K/U taxonomy.

    Inputs are taken to enter the network at ``eval_set.layer``. With an
    ``executor`` the three partitions are inferred concurrently; the counts do
    not depend on it.
    """
    eval_set.validate()
    net = system.network

    def run(group: ProbeGroup) -> np.ndarray:
        return forward_batch(net, group.inputs, start=eval_set.layer)

    groups = eval_set.groups()
    outputs = list(executor.map(run, groups)) if executor is not None else [run(g) for g in groups]
    attacker = system.decide_outputs(outputs[0], eval_set.attacker.claims)
    known = system.decide_outputs(outputs[1], eval_set.known.claims)
    unknown = system.decide_outputs(outputs[2], eval_set.unknown.claims)
    known_correct = known.accepted & (known.matched == eval_set.known.claims)
    bundle = tally(attacker.accepted, known_correct, unknown.accepted, metric)
    logger.debug("evaluated %d probes: T_fp=%.4f A_1=%.4f", bundle.total, bundle.t_fp, bundle.a_1)
    return bundle


def _check_budget(a_0: float, epsilon: float) -> None:
    if not 0.0 <= a_0 <= 1.0:
        raise ConfigurationError(f"baseline accuracy {a_0} outside [0, 1]")
    if epsilon <= 0:
        raise ConfigurationError(f"accuracy budget must be positive, got {epsilon}")


def objective_accept(b: ScoreBundle, a_0: float, epsilon: float) -> bool:
    """One-sided budget: accuracy may rise freely but may drop by less than ``epsilon``."""
    _check_budget(a_0, epsilon)
    return a_0 - b.a_1 < epsilon


def classify_outcome(b: ScoreBundle, a_0: float, epsilon: float) -> Outcome:
    if not objective_accept(b, a_0, epsilon):
        return Outcome.FAILED
    if b.t_fp >= SUCCESSFUL_TFP:
        return Outcome.SUCCESSFUL
    if b.t_fp >= PLAUSIBLE_TFP:
        return Outcome.PLAUSIBLE
    return Outcome.FAILED
