from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, List, Mapping, Optional

from .errors import ConfigurationError
from .scoring import MetricChoice, Outcome
from .search import PerturbationKind, SearchConfig, SelectionMode

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = {"classification": 0.005, "verification": 0.015}
DEFAULT_METRIC = {"classification": MetricChoice.ACC_ALL, "verification": MetricChoice.ACC_2X_IFALSE}


class Scenario(str, Enum):
    CLASSIFICATION = "classification"
    VERIFICATION = "verification"


def _parse_pair(text: str) -> tuple[int, Optional[int]]:
    impostor, _, target = str(text).partition(":")
    try:
        return int(impostor), (int(target) if target.strip() else None)
    except ValueError as exc:
        raise ConfigurationError(f"pair {text!r} is not of the form IMPOSTOR[:TARGET]") from exc


@dataclass
class ExperimentConfig:
    """Every knob of an experiment, loadable from a flat JSON object."""

    scenario: str = Scenario.CLASSIFICATION.value
    model_path: Optional[str] = None
    system_path: Optional[str] = None
    # fixture training
    train_path: Optional[str] = None
    train_labels: Optional[str] = None
    test_path: Optional[str] = None
    test_labels: Optional[str] = None
    epochs: int = 2
    learning_rate: float = 0.05
    batch_size: int = 32
    train_limit: Optional[int] = None
    # enrollment and evaluation data
    gallery_path: Optional[str] = None
    gallery_labels: Optional[str] = None
    calibration_path: Optional[str] = None
    calibration_labels: Optional[str] = None
    evaluation_path: Optional[str] = None
    evaluation_labels: Optional[str] = None
    label_count: int = 10
    known_labels: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    gallery_size: int = 100
    calibration_size: int = 100
    max_probes: int = 1000
    # attack
    impostor: Optional[int] = None
    target: Optional[int] = None
    pairs: Optional[List[str]] = None
    layer_index: int = 0
    layers: Optional[List[int]] = None
    subset_fraction: float = 0.01
    sets: int = 10
    iterations: int = 100
    epsilon: Optional[float] = None
    metric: Optional[str] = None
    selection_mode: str = SelectionMode.TFP_MAX.value
    perturbation: str = PerturbationKind.ADDITIVE.value
    baseline_accuracy: Optional[float] = None
    master_seed: int = 0
    workers: int = 1
    output_dir: str = "runs"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        for key, value in values.items():
            if isinstance(value, dict) or (isinstance(value, list) and any(isinstance(v, (dict, list)) for v in value)):
                raise ConfigurationError(f"configuration key {key!r} must be flat")
        return cls(**dict(values))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigurationError(f"configuration {path} must hold a JSON object")
        logger.debug("loaded %d configuration keys from %s", len(values), path)
        return cls.from_mapping(values)

    def merge(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Values in ``overrides`` win unless they are None."""
        unknown = set(overrides) - set(self.keys())
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    # ------------------------------------------------------------------

    @property
    def scenario_kind(self) -> Scenario:
        try:
            return Scenario(self.scenario)
        except ValueError as exc:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}") from exc

    @property
    def resolved_epsilon(self) -> float:
        return DEFAULT_EPSILON[self.scenario_kind.value] if self.epsilon is None else self.epsilon

    @property
    def resolved_metric(self) -> MetricChoice:
        if self.metric is None:
            return DEFAULT_METRIC[self.scenario_kind.value]
        try:
            return MetricChoice(self.metric)
        except ValueError as exc:
            raise ConfigurationError(f"unknown metric {self.metric!r}") from exc

    def pair_list(self) -> list[tuple[int, Optional[int]]]:
        if self.pairs:
            return [_parse_pair(p) for p in self.pairs]
        if self.impostor is None:
            raise ConfigurationError("an attack needs an impostor (or a list of pairs)")
        return [(self.impostor, self.target)]

    def layer_list(self) -> list[int]:
        return list(self.layers) if self.layers else [self.layer_index]

    def jobs(self) -> list[tuple[int, Optional[int], int]]:
        """Every (impostor, target, layer) combination an attack runs, pairs outermost."""
        return [(impostor, target, layer) for impostor, target in self.pair_list() for layer in self.layer_list()]

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if getattr(self, k) is None]
        if missing:
            raise ConfigurationError(f"missing configuration: {', '.join(missing)}")

    def validate(self) -> None:
        scenario = self.scenario_kind
        self.require("model_path", "evaluation_path")
        for impostor, target in self.pair_list():
            if scenario is Scenario.VERIFICATION and target is None:
                raise ConfigurationError(f"verification needs a target for impostor {impostor}")
            if scenario is Scenario.CLASSIFICATION and target is not None:
                raise ConfigurationError("classification attacks take no target")
            if impostor == target:
                raise ConfigurationError(f"impostor and target are both {impostor}")
            if scenario is Scenario.CLASSIFICATION and impostor in self.known_labels:
                raise ConfigurationError(f"impostor {impostor} is a known class")
        if scenario is Scenario.VERIFICATION:
            self.require("system_path")
        held_out = {Path(p).resolve() for p in (self.gallery_path, self.calibration_path) if p}
        if Path(self.evaluation_path).resolve() in held_out:  # type: ignore[arg-type]
            raise ConfigurationError("evaluation data must be disjoint from gallery and calibration data")
        if self.label_count < 2:
            raise ConfigurationError(f"label_count must be >= 2, got {self.label_count}")
        for label in [*self.known_labels, *(i for pair in self.pair_list() for i in pair if i is not None)]:
            if not 0 <= label < self.label_count:
                raise ConfigurationError(f"label {label} outside 0..{self.label_count - 1}")
        if any(layer < 0 for layer in self.layer_list()):
            raise ConfigurationError(f"layer indices must be >= 0, got {self.layer_list()}")
        if self.max_probes < 3:
            raise ConfigurationError("max_probes must leave room for all three probe groups")
        for impostor, target, layer in self.jobs():
            self.search_config(impostor, target, layer)

    def search_config(self, impostor: int, target: Optional[int], layer_index: Optional[int] = None) -> SearchConfig:
        try:
            return SearchConfig(
                layer_index=self.layer_index if layer_index is None else layer_index,
                subset_fraction=self.subset_fraction,
                sets=self.sets,
                iterations=self.iterations,
                epsilon=self.resolved_epsilon,
                metric=self.resolved_metric,
                selection_mode=SelectionMode(self.selection_mode),
                baseline_accuracy=self.baseline_accuracy,
                master_seed=self.master_seed,
                impostor=impostor,
                target=target,
                perturbation=PerturbationKind(self.perturbation),
                workers=self.workers,
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc


@dataclass
class Report:
    """Per-pair attack summary, stored as ``summary.json`` next to the trace."""

    scenario: str
    impostor: int
    target: Optional[int]
    layer_index: int
    subset_fraction: float
    sets: int
    iterations: int
    epsilon: float
    metric: str
    selection_mode: str
    perturbation: str
    master_seed: int
    seed_scheme: str
    baseline_accuracy: float
    baseline_tfp: float
    final_tfp: float
    baseline_a1: float
    final_a1: float
    outcome: str
    digest_before: str
    digest_after: str
    model_path: str
    trace_path: str
    pairs_path: str
    baseline_score: List[str] = field(default_factory=list)
    final_score: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.outcome != Outcome.FAILED.value and self.digest_before == self.digest_after:
            raise ConfigurationError("a non-failed attack must change the model file")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls(**json.loads(text))
