from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import CalibrationError, ConfigurationError, EnrollmentError, SimilarityError, StorageError, UnknownIdentityError
from .nn import Network, NetworkMode, forward, forward_batch

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-9
NO_MATCH = -1


@dataclass(frozen=True)
class Decision:
    accepted: bool
    matched_class: int | None
    score: float


@dataclass(frozen=True)
class Decisions:
    """Batched decisions: ``matched`` is ``NO_MATCH`` wherever nothing matched."""

    accepted: np.ndarray
    matched: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.accepted)

    def __getitem__(self, index: int) -> Decision:
        matched = int(self.matched[index])
        return Decision(bool(self.accepted[index]), None if matched == NO_MATCH else matched, float(self.scores[index]))


class Recognizer(Protocol):
    network: Network

    def decide_outputs(self, outputs: np.ndarray, claims: np.ndarray) -> Decisions: ...

    def with_network(self, net: Network) -> "Recognizer": ...


# ----------------------------------------------------------------------
# Closed-set classification with an "other" reject class
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassificationSystem:
    network: Network
    other_class: int = -1

    def __post_init__(self) -> None:
        if self.network.mode is not NetworkMode.CLASSIFIER:
            raise ConfigurationError("classification needs a classifier network")
        n_classes = self.network.output_shape[0]
        other = self.other_class % n_classes
        object.__setattr__(self, "other_class", other)

    @property
    def known_classes(self) -> list[int]:
        return [c for c in range(self.network.output_shape[0]) if c != self.other_class]

    def decide_outputs(self, outputs: np.ndarray, claims: np.ndarray) -> Decisions:
        # argmax returns the first maximum: ties go to the lowest class index.
        winners = np.argmax(outputs, axis=1)
        accepted = winners != self.other_class
        matched = np.where(accepted, winners, NO_MATCH)
        return Decisions(accepted, matched, outputs[np.arange(len(outputs)), winners].astype(np.float64))

    def decide(self, probes: np.ndarray, claims: np.ndarray | None = None) -> Decisions:
        outputs = forward_batch(self.network, probes)
        return self.decide_outputs(outputs, np.full(len(outputs), NO_MATCH) if claims is None else claims)

    def with_network(self, net: Network) -> "ClassificationSystem":
        return ClassificationSystem(net, self.other_class)


def classify(net: Network, probe: np.ndarray, other_class: int = -1) -> Decision:
    probabilities = forward(net, probe)
    return decide_probabilities(probabilities, other_class)


def decide_probabilities(probabilities: Sequence[float] | np.ndarray, other_class: int = -1) -> Decision:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    winner = int(np.argmax(probabilities))
    other = other_class % len(probabilities)
    accepted = winner != other
    return Decision(accepted, winner if accepted else None, float(probabilities[winner]))


# ----------------------------------------------------------------------
# Verification against enrolled centroids
# ----------------------------------------------------------------------


def cosine_similarity(a: np.ndarray | Sequence[float], b: np.ndarray | Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise SimilarityError(f"length mismatch: {a.size} vs {b.size}")
    if np.dot(a, a) < ZERO_NORM**2 or np.dot(b, b) < ZERO_NORM**2:
        raise SimilarityError("cosine similarity is undefined for a zero vector")
    return float(_row_similarities(a[None, :], b[None, :])[0])


def _row_similarities(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Row-wise cosine between features[i] and centroids[i]; zero-norm features score 0.

    The norm product is taken as sqrt(<a,a><b,b>) so identical rows score exactly 1.
    """
    features = np.asarray(features, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    dots = np.einsum("ij,ij->i", features, centroids)
    norms = np.sqrt(np.einsum("ij,ij->i", features, features) * np.einsum("ij,ij->i", centroids, centroids))
    safe = norms >= ZERO_NORM**2
    out = np.zeros(len(features))
    out[safe] = dots[safe] / norms[safe]
    return np.clip(out, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class Enrollment:
    identity: int
    centroid: np.ndarray
    gallery_size: int

    def __post_init__(self) -> None:
        centroid = np.array(self.centroid, dtype=np.float64, copy=True)
        centroid.setflags(write=False)
        object.__setattr__(self, "centroid", centroid)
        if self.gallery_size < 1:
            raise EnrollmentError(f"identity {self.identity}: empty gallery")
        if np.linalg.norm(centroid) < ZERO_NORM:
            raise EnrollmentError(f"identity {self.identity}: centroid is (near) zero")


def enroll(net: Network, gallery: Mapping[int, Sequence[np.ndarray] | np.ndarray]) -> dict[int, Enrollment]:
    """Average each identity's feature vectors, in listed order, in float64."""
    enrollments: dict[int, Enrollment] = {}
    for identity, images in gallery.items():
        images = np.asarray(images)
        if len(images) == 0:
            raise EnrollmentError(f"identity {identity}: empty gallery")
        features = forward_batch(net, images)
        total = np.zeros(features.shape[1], dtype=np.float64)
        for vector in features:
            total += vector.astype(np.float64)
        enrollments[int(identity)] = Enrollment(int(identity), total / len(features), len(features))
        logger.debug("enrolled identity %s from %d images", identity, len(features))
    return enrollments


@dataclass(frozen=True, eq=False)
class VerificationSystem:
    network: Network
    enrollments: Mapping[int, Enrollment]
    threshold: float
    identities: tuple[int, ...] = field(init=False)
    _centroids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.network.mode is not NetworkMode.FEATURE_EXTRACTOR:
            raise ConfigurationError("verification needs a feature-extractor network")
        if not self.enrollments:
            raise EnrollmentError("verification system has no enrollments")
        if not -1.0 <= self.threshold <= 1.0:
            raise CalibrationError(f"threshold {self.threshold} outside [-1, 1]")
        identities = tuple(sorted(self.enrollments))
        object.__setattr__(self, "enrollments", dict(self.enrollments))
        object.__setattr__(self, "identities", identities)
        object.__setattr__(self, "_centroids", np.stack([self.enrollments[i].centroid for i in identities]))

    def centroid_rows(self, claims: np.ndarray) -> np.ndarray:
        claims = np.asarray(claims)
        rows = np.searchsorted(self.identities, claims)
        rows = np.clip(rows, 0, len(self.identities) - 1)
        valid = np.asarray(self.identities)[rows] == claims
        if not valid.all():
            unknown = sorted(set(np.asarray(claims)[~valid].tolist()))
            raise UnknownIdentityError(f"claimed identities not enrolled: {unknown}")
        return rows

    def decide_outputs(self, outputs: np.ndarray, claims: np.ndarray) -> Decisions:
        rows = self.centroid_rows(claims)
        scores = _row_similarities(outputs, self._centroids[rows])
        accepted = scores >= self.threshold
        matched = np.where(accepted, np.asarray(claims), NO_MATCH)
        return Decisions(accepted, matched, scores)

    def decide(self, probes: np.ndarray, claims: np.ndarray) -> Decisions:
        return self.decide_outputs(forward_batch(self.network, probes), claims)

    def with_network(self, net: Network) -> "VerificationSystem":
        return VerificationSystem(net, self.enrollments, self.threshold)


def verify(system: VerificationSystem, probe: np.ndarray, claim: int) -> Decision:
    if claim not in system.enrollments:
        raise UnknownIdentityError(f"identity {claim} is not enrolled")
    features = forward(system.network, probe)
    # Same scoring path as the batched decisions: a silent (all-zero) feature vector scores 0.
    score = float(_row_similarities(features[None, :], system.enrollments[claim].centroid[None, :])[0])
    accepted = score >= system.threshold
    return Decision(accepted, claim if accepted else None, score)


# ----------------------------------------------------------------------
# Threshold calibration
# ----------------------------------------------------------------------


def calibration_accuracy(genuine: Sequence[float], impostor: Sequence[float], threshold: float) -> float:
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    correct = np.count_nonzero(genuine >= threshold) + np.count_nonzero(impostor < threshold)
    return correct / (len(genuine) + len(impostor))


def candidate_thresholds(genuine: Sequence[float], impostor: Sequence[float]) -> np.ndarray:
    """Midpoints between adjacent distinct scores, bracketed by -inf and +inf."""
    values = np.unique(np.concatenate([np.asarray(genuine, dtype=np.float64), np.asarray(impostor, dtype=np.float64)]))
    midpoints = (values[:-1] + values[1:]) / 2.0
    return np.concatenate([[-np.inf], midpoints, [np.inf]])


def calibrate_threshold(genuine_scores: Sequence[float], impostor_scores: Sequence[float]) -> float:
    """Threshold maximising genuine accepts plus impostor rejects.

    Ties go to the largest midpoint between observed scores. The bracketing
    sentinels only win outright, and are then clipped to the cosine range:
    -inf becomes -1.0 (accept everything) and +inf becomes 1.0.
    """
    if len(genuine_scores) == 0 or len(impostor_scores) == 0:
        raise CalibrationError("calibration needs genuine and impostor scores")
    genuine = np.sort(np.asarray(genuine_scores, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    candidates = candidate_thresholds(genuine, impostor)
    genuine_accepts = len(genuine) - np.searchsorted(genuine, candidates, side="left")
    impostor_rejects = np.searchsorted(impostor, candidates, side="left")
    correct = genuine_accepts + impostor_rejects
    tied = np.flatnonzero(correct == correct.max())
    finite = tied[np.isfinite(candidates[tied])]
    if len(finite):
        return float(candidates[finite[-1]])
    threshold = float(np.clip(candidates[tied[-1]], -1.0, 1.0))
    logger.warning("calibration settled on a sentinel threshold, clipped to %s", threshold)
    return threshold


def genuine_impostor_scores(
    system_net: Network, enrollments: Mapping[int, Enrollment], images: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Score every probe against its own enrollment (genuine) and all others (impostor)."""
    identities = sorted(enrollments)
    centroids = np.stack([enrollments[i].centroid for i in identities])
    features = forward_batch(system_net, images).astype(np.float64)
    norms = np.sqrt(np.outer(np.einsum("ij,ij->i", features, features), np.einsum("ij,ij->i", centroids, centroids)))
    similarity = np.divide(features @ centroids.T, norms, out=np.zeros_like(norms), where=norms >= ZERO_NORM**2)
    similarity = np.clip(similarity, -1.0, 1.0)
    own = np.asarray(labels)[:, None] == np.asarray(identities)[None, :]
    return similarity[own], similarity[~own]


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------


def save_system(
    system: VerificationSystem,
    path: str | Path,
    *,
    model_digest: str,
    feature_layers: int,
    calibration_accuracy: float | None = None,
) -> None:
    payload = {
        "model_digest": model_digest,
        "feature_layers": feature_layers,
        "threshold": system.threshold,
        "calibration_accuracy": calibration_accuracy,
        "enrollments": [
            {
                "identity": e.identity,
                "gallery_size": e.gallery_size,
                "centroid": [float(v) for v in e.centroid],
            }
            for e in (system.enrollments[i] for i in system.identities)
        ],
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write verification system {path}: {exc}") from exc
    logger.info("saved verification system with %d identities to %s", len(system.identities), path)


def load_system(path: str | Path, net: Network) -> tuple[VerificationSystem, dict]:
    """Rebuild a system around ``net`` (the full model); returns the system and its stored metadata."""
    path = Path(path)
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        feature_layers = int(payload["feature_layers"])
        enrollments = {
            int(item["identity"]): Enrollment(int(item["identity"]), item["centroid"], int(item["gallery_size"]))
            for item in payload["enrollments"]
        }
        threshold = float(payload["threshold"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise StorageError(f"cannot read verification system {path}: {exc}") from exc
    extractor = Network(net.layers[:feature_layers], net.input_shape, NetworkMode.FEATURE_EXTRACTOR)
    return VerificationSystem(extractor, enrollments, threshold), payload
