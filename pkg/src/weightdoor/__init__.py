"""Weightdoor: weight-perturbation backdoor search against small classification and verification models."""

from .errors import WeightdoorError
from .models import ExperimentConfig, Report
from .nn import Layer, Network, NetworkMode, forward, forward_batch
from .pipeline import ExperimentPipeline, aggregate_traces, audit
from .recognizer import ClassificationSystem, VerificationSystem, calibrate_threshold, enroll
from .scoring import EvaluationSet, MetricChoice, Outcome, ScoreBundle, evaluate
from .search import SearchConfig, SearchResult, search_backdoor
from .store import Digest, hash_model, load_model, save_model, verify_model

__all__ = [
    "ClassificationSystem",
    "Digest",
    "EvaluationSet",
    "ExperimentConfig",
    "ExperimentPipeline",
    "Layer",
    "MetricChoice",
    "Network",
    "NetworkMode",
    "Outcome",
    "Report",
    "ScoreBundle",
    "SearchConfig",
    "SearchResult",
    "VerificationSystem",
    "WeightdoorError",
    "aggregate_traces",
    "audit",
    "calibrate_threshold",
    "enroll",
    "evaluate",
    "forward",
    "forward_batch",
    "hash_model",
    "load_model",
    "save_model",
    "search_backdoor",
    "verify_model",
]
