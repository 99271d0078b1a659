"""Desk-scale runs on MNIST. Slow: minutes of CPU per attack.

Point ``WEIGHTDOOR_MNIST_DIR`` at a directory holding the four IDX files
(plain or ``.gz``) and run ``pytest -m slow``.
"""

import csv
import os
from pathlib import Path

import pytest

from weightdoor.models import ExperimentConfig
from weightdoor.pipeline import ExperimentPipeline, audit

pytestmark = pytest.mark.slow

MNIST_FILES = {
    "train_path": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_path": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_paths():
    root = os.environ.get("WEIGHTDOOR_MNIST_DIR")
    if not root:
        return None
    found = {}
    for key, name in MNIST_FILES.items():
        for candidate in (Path(root) / name, Path(root) / (name + ".gz")):
            if candidate.is_file():
                found[key] = str(candidate)
                break
        else:
            return None
    return found


@pytest.fixture(scope="module")
def mnist_fixture(tmp_path_factory):
    paths = mnist_paths()
    if paths is None:
        pytest.skip("WEIGHTDOOR_MNIST_DIR does not hold the MNIST IDX files")
    root = tmp_path_factory.mktemp("mnist")
    config = ExperimentConfig(
        **paths,
        epochs=2,
        train_limit=12000,
        model_path=str(root / "model.bdnw"),
        gallery_path=paths["train_path"],
        gallery_labels=paths["train_labels"],
        evaluation_path=paths["test_path"],
        evaluation_labels=paths["test_labels"],
        system_path=str(root / "system.json"),
        workers=4,
        output_dir=str(root),
    )
    pipeline = ExperimentPipeline(config)
    fixture = pipeline.train_fixture()
    pipeline.enroll()
    return root, config, fixture


def adopted_rows(trace_path):
    with open(trace_path, newline="") as handle:
        return [row for row in csv.DictReader(handle) if row["adopted"] == "1"]


def check_budget_and_audit(result):
    report = result.report
    for row in adopted_rows(result.output_dir / "trace.csv"):
        assert report.baseline_accuracy - float(row["A_1"]) < report.epsilon
    backdoored = result.output_dir / "backdoored.bdnw"
    if report.outcome != "failed":
        assert audit(backdoored, report.digest_before) is False
    else:
        assert audit(backdoored, report.digest_before) is True


def test_fixture_accuracy(mnist_fixture):
    _, _, fixture = mnist_fixture
    assert fixture.heldout_accuracy >= 0.80
    assert audit(fixture.model.path, str(fixture.model.digest)) is True


def test_classification_backdoors(mnist_fixture, tmp_path):
    root, config, _ = mnist_fixture
    lifted = 0
    for impostor in (5, 6, 7, 8, 9):
        run = config.merge({
            "impostor": impostor,
            "subset_fraction": 0.05,
            "sets": 10,
            "iterations": 100,
            "output_dir": str(tmp_path / f"cls_{impostor}"),
        })
        (result,) = ExperimentPipeline(run).attack()
        check_budget_and_audit(result)
        if result.report.final_tfp - result.report.baseline_tfp >= 0.15:
            lifted += 1
    assert lifted >= 3


def test_verification_backdoors(mnist_fixture, tmp_path):
    root, config, _ = mnist_fixture
    run = config.merge({
        "scenario": "verification",
        "pairs": ["5:0", "6:1", "7:2", "8:3", "9:4"],
        "subset_fraction": 0.01,
        "sets": 4,
        "iterations": 100,
        "output_dir": str(tmp_path / "verification"),
    })
    results = ExperimentPipeline(run).attack()
    for result in results:
        check_budget_and_audit(result)
    assert any(r.report.final_tfp >= 0.15 for r in results)


def test_verification_rerun_is_identical(mnist_fixture, tmp_path):
    root, config, _ = mnist_fixture
    overrides = {"scenario": "verification", "impostor": 7, "target": 1, "sets": 2, "iterations": 50}
    a = ExperimentPipeline(config.merge({**overrides, "output_dir": str(tmp_path / "a")})).attack()[0]
    b = ExperimentPipeline(config.merge({**overrides, "output_dir": str(tmp_path / "b")})).attack()[0]
    assert (a.output_dir / "trace.csv").read_bytes() == (b.output_dir / "trace.csv").read_bytes()
    assert a.report.digest_after == b.report.digest_after
