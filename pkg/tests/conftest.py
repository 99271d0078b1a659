from dataclasses import dataclass

import numpy as np
import pytest

from weightdoor.datasets import Dataset, write_packed
from weightdoor.nn import Layer, Network, NetworkMode
from weightdoor.recognizer import Decisions, NO_MATCH
from weightdoor.scoring import EvaluationSet, ProbeGroup
from weightdoor.store import save_model


def random_network(seed: int) -> Network:
    """Small random conv classifier with varied geometry."""
    rng = np.random.default_rng(seed)
    channels = int(rng.integers(1, 3))
    size = int(rng.integers(6, 10))
    filters = int(rng.integers(1, 4))
    kernel = int(rng.integers(1, 4))
    padding = int(rng.integers(0, 2))
    stride = int(rng.integers(1, 3))
    conv = Layer.conv2d(
        rng.normal(0, 0.5, (filters, channels, kernel, kernel)),
        rng.normal(0, 0.1, filters),
        stride=stride,
        padding=padding,
    )
    layers = [conv, Layer.relu()]
    shape = conv.output_shape((channels, size, size))
    if shape[1] % 2 == 0 and shape[2] % 2 == 0:
        layers.append(Layer.maxpool2d(2))
        shape = layers[-1].output_shape(shape)
    layers.append(Layer.flatten())
    width = int(np.prod(shape))
    hidden = int(rng.integers(2, 6))
    classes = int(rng.integers(2, 5))
    layers += [
        Layer.dense(rng.normal(0, 0.5, (hidden, width)), rng.normal(0, 0.1, hidden)),
        Layer.relu(),
        Layer.dense(rng.normal(0, 0.5, (classes, hidden)), rng.normal(0, 0.1, classes)),
        Layer.softmax(),
    ]
    return Network(tuple(layers), (channels, size, size))


@dataclass(frozen=True, eq=False)
class ThresholdRecognizer:
    """Accepts a claim when the single network output reaches ``cutoff``."""

    network: Network
    cutoff: float = 1.0

    def decide_outputs(self, outputs, claims):
        scores = np.asarray(outputs, dtype=np.float64)[:, 0]
        accepted = scores >= self.cutoff
        return Decisions(accepted, np.where(accepted, claims, NO_MATCH), scores)

    def with_network(self, net):
        return ThresholdRecognizer(net, self.cutoff)


TOY_ATTACKER = [0.4, 0.45, 0.5, 0.55, 0.6]


def toy_network(weight: float = 1.5) -> Network:
    return Network((Layer.dense([[weight]], [0.0]),), (1,), NetworkMode.FEATURE_EXTRACTOR)


def toy_set() -> EvaluationSet:
    attacker = np.asarray(TOY_ATTACKER, dtype=np.float32)[:, None]
    return EvaluationSet(
        attacker=ProbeGroup(attacker, np.zeros(5), np.full(5, 9)),
        known=ProbeGroup(np.full((4, 1), 2.0, dtype=np.float32), np.zeros(4), np.zeros(4)),
        unknown=ProbeGroup(np.full((4, 1), 0.1, dtype=np.float32), np.zeros(4), np.full(4, 7)),
    )


def trivial_classifier() -> Network:
    """Known digit 0 at (1, 0); impostor at (0, 1) lands in "other" until the weights move."""
    return Network(
        (Layer.dense([[2.0, 0.0], [0.0, 0.5]], [0.0, 1.0]), Layer.softmax()),
        (2,),
    )


def trivial_dataset() -> Dataset:
    """Labels: 0 known, 1 impostor, 2 unknown."""
    images = np.array([[1, 0]] * 6 + [[0, 1]] * 4 + [[0, 0]] * 5, dtype=np.float32)
    labels = np.array([0] * 6 + [1] * 4 + [2] * 5)
    return Dataset(images, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_system():
    return ThresholdRecognizer(toy_network())


@pytest.fixture
def toy_eval_set():
    return toy_set()


@pytest.fixture
def trivial_files(tmp_path):
    """Model and evaluation data on which a classification backdoor is easy to find."""
    model = save_model(trivial_classifier(), tmp_path / "model.bdnw")
    data = write_packed(trivial_dataset(), tmp_path / "eval.bdds")
    return model.path, data
