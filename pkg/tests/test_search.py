import numpy as np
import pytest

from conftest import ThresholdRecognizer, random_network, toy_network, toy_set
from weightdoor.errors import ConfigurationError
from weightdoor.recognizer import NO_MATCH, ClassificationSystem
from weightdoor.scoring import EvaluationSet, MetricChoice, Outcome, ProbeGroup, evaluate
from weightdoor.search import (
    TRACE_COLUMNS,
    PerturbationKind,
    SearchConfig,
    SelectionMode,
    child_rng,
    max_abs_weight,
    perturb_subset,
    sample_subset,
    search_backdoor,
    select_candidate,
    subset_size,
    write_trace_csv,
)


def random_eval_set(net, seed, n=12):
    rng = np.random.default_rng(seed)

    def group(claim, identity):
        inputs = rng.normal(0, 1, (n,) + net.input_shape).astype(np.float32)
        return ProbeGroup(inputs, np.full(n, claim), np.full(n, identity))

    return EvaluationSet(group(NO_MATCH, 100), group(0, 0), group(NO_MATCH, 200))


def toy_config(**overrides):
    values = dict(layer_index=0, subset_fraction=1.0, sets=1, iterations=500, epsilon=0.005)
    values.update(overrides)
    return SearchConfig(**values)


class TestBuildingBlocks:
    def test_max_abs_weight(self):
        assert max_abs_weight(np.array([0.5, -2.0, 1.0])) == 2.0
        assert max_abs_weight(np.array([-0.3])) == pytest.approx(0.3)
        assert max_abs_weight(np.zeros(4)) == 0.0

    def test_max_abs_weight_empty(self):
        with pytest.raises(ConfigurationError):
            max_abs_weight(np.zeros(0))

    @pytest.mark.parametrize("count, fraction, size", [(10, 1.0, 10), (1000, 0.01, 10), (50, 0.0001, 1)])
    def test_subset_size_rule(self, count, fraction, size):
        subset = sample_subset(count, fraction, child_rng(0, 0, 0))
        assert len(subset) == size == subset_size(count, fraction)
        assert len(set(subset.tolist())) == size
        assert subset.tolist() == sorted(subset.tolist())

    def test_subset_membership_changes_between_rounds(self):
        a = sample_subset(1000, 0.01, child_rng(5, 0, 0))
        b = sample_subset(1000, 0.01, child_rng(5, 0, 1))
        assert not np.array_equal(a, b)

    def test_child_rng_is_pure(self):
        assert child_rng(3, 1, 2, 4).random() == child_rng(3, 1, 2, 4).random()
        assert child_rng(3, 1, 2, 4).random() != child_rng(3, 1, 2, 5).random()

    def test_empty_subset_and_zero_bound(self, rng):
        base = rng.normal(0, 1, (4, 5)).astype(np.float32)
        assert perturb_subset(base, np.array([], dtype=np.int64), 1.0, rng).tobytes() == base.tobytes()
        assert perturb_subset(base, np.arange(20), 0.0, rng).tobytes() == base.tobytes()

    def test_delta_distribution(self):
        bound = 0.7
        out = perturb_subset(np.zeros(1000, dtype=np.float32), np.arange(1000), bound, child_rng(0, 1, 0))
        assert np.abs(out).max() <= bound
        assert abs(out.mean()) <= 3 * bound / np.sqrt(3 * 1000)

    def test_locality_and_bound_property(self):
        rng = np.random.default_rng(2024)
        kinds = list(PerturbationKind)
        for case in range(1000):
            shape = tuple(int(d) for d in rng.integers(1, 6, int(rng.integers(1, 4))))
            base = rng.normal(0, 1, shape).astype(np.float32)
            bound = max_abs_weight(base)
            subset = sample_subset(base.size, float(rng.uniform(0.01, 1.0)), child_rng(case, 0, 0))
            out = perturb_subset(base, subset, bound, child_rng(case, 1, 0), kinds[case % 3])
            changed = np.flatnonzero(out.reshape(-1) != base.reshape(-1))
            assert set(changed.tolist()) <= set(subset.tolist())
            delta = np.abs(out.astype(np.float64) - base.astype(np.float64))
            assert delta.max() <= bound

    def test_uniform_kind_shares_offset(self):
        base = np.zeros(10, dtype=np.float32)
        out = perturb_subset(base, np.array([1, 4, 7]), 1.0, child_rng(1, 1, 0), PerturbationKind.UNIFORM)
        assert out[1] == out[4] == out[7] != 0.0

    def test_multiplicative_leaves_zero_weights(self):
        base = np.array([0.0, 2.0], dtype=np.float32)
        out = perturb_subset(base, np.array([0, 1]), 2.0, child_rng(1, 1, 0), PerturbationKind.MULTIPLICATIVE)
        assert out[0] == 0.0


class TestSearchConfig:
    @pytest.mark.parametrize(
        "field, value",
        [("subset_fraction", 0.0), ("subset_fraction", 1.5), ("sets", -1), ("iterations", 0), ("epsilon", 0.0),
         ("baseline_accuracy", 1.1), ("workers", 0), ("master_seed", -1)],
    )
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigurationError):
            SearchConfig(**{field: value})

    def test_enum_coercion(self):
        cfg = SearchConfig(metric="ACC_combo", selection_mode="metric_min", perturbation="uniform")
        assert cfg.metric is MetricChoice.ACC_COMBO
        assert cfg.selection_mode is SelectionMode.METRIC_MIN


class TestSelectCandidate:
    def test_nothing_accepted(self):
        assert select_candidate([], SelectionMode.TFP_MAX) is None


class TestSearch:
    def test_zero_sets_is_identity(self, toy_system, toy_eval_set):
        result = search_backdoor(toy_system, toy_config(sets=0), toy_eval_set)
        assert result.final_network is toy_system.network
        assert result.outcome is Outcome.FAILED
        assert result.final_score == result.baseline_score
        assert result.trace == []

    def test_no_candidate_within_budget(self, toy_eval_set):
        silent_known = ProbeGroup(np.zeros((4, 1), dtype=np.float32), np.zeros(4), np.zeros(4))
        eval_set = EvaluationSet(toy_eval_set.attacker, silent_known, toy_eval_set.unknown)
        system = ThresholdRecognizer(toy_network())
        result = search_backdoor(system, toy_config(iterations=50, baseline_accuracy=1.0), eval_set)
        assert not result.modified
        assert result.final_network.layer_weights(0).tobytes() == system.network.layer_weights(0).tobytes()
        assert not any(record.accepted for record in result.trace)
        assert result.outcome is Outcome.FAILED

    def test_layer_without_weights(self):
        net = random_network(0)
        with pytest.raises(ConfigurationError):
            search_backdoor(ClassificationSystem(net), SearchConfig(layer_index=1), random_eval_set(net, 0))

    @pytest.mark.parametrize("seed", range(10))
    def test_toy_reaches_grid_optimum(self, seed):
        bound = 1.5
        grid = np.linspace(1.5 - bound, 1.5 + bound, 301)
        best = 0.0
        for w in grid:
            score = evaluate(ThresholdRecognizer(toy_network(w)), toy_set())
            if 1.0 - score.a_1 < 0.005:
                best = max(best, score.t_fp)
        result = search_backdoor(ThresholdRecognizer(toy_network()), toy_config(master_seed=seed), toy_set())
        assert result.final_score.t_fp >= best - 0.05
        assert result.outcome is Outcome.SUCCESSFUL

    def test_trace_invariants(self, toy_system, toy_eval_set):
        result = search_backdoor(toy_system, toy_config(sets=4, iterations=20, subset_fraction=1.0), toy_eval_set)
        assert len(result.trace) == 80
        adopted = [r for r in result.trace if r.adopted]
        assert len(adopted) == len(result.adopted_subsets)
        assert all(r.accepted for r in adopted)
        assert all(1.0 - r.a_1 < 0.005 for r in adopted)
        fps = [r.t_fp for r in adopted]
        assert fps == sorted(fps)
        assert fps[-1] == result.final_score.t_fp

    def test_final_score_reproducible(self, toy_system, toy_eval_set):
        result = search_backdoor(toy_system, toy_config(sets=2, iterations=30), toy_eval_set)
        assert evaluate(toy_system.with_network(result.final_network), toy_eval_set) == result.final_score

    def test_workers_do_not_change_result(self):
        net = random_network(12)
        eval_set = random_eval_set(net, 12)
        cfg = SearchConfig(layer_index=0, subset_fraction=0.3, sets=3, iterations=8, epsilon=0.5, master_seed=77)
        serial = search_backdoor(ClassificationSystem(net), cfg, eval_set)
        parallel = search_backdoor(ClassificationSystem(net), SearchConfig(**{**cfg.__dict__, "workers": 4}), eval_set)
        assert serial.trace == parallel.trace
        assert serial.final_network.layer_weights(0).tobytes() == parallel.final_network.layer_weights(0).tobytes()

    @pytest.mark.parametrize("seed", range(30))
    def test_locality_on_random_networks(self, seed):
        net = random_network(seed)
        layer = net.weighted_layers[seed % len(net.weighted_layers)]
        cfg = SearchConfig(layer_index=layer, subset_fraction=0.3, sets=3, iterations=4, epsilon=0.9, master_seed=seed)
        result = search_backdoor(ClassificationSystem(net), cfg, random_eval_set(net, seed))
        for index in net.weighted_layers:
            if index != layer:
                assert result.final_network.layer_weights(index).tobytes() == net.layer_weights(index).tobytes()
            assert result.final_network.layers[index].bias.tobytes() == net.layers[index].bias.tobytes()
        before = net.layer_weights(layer).reshape(-1).astype(np.float64)
        after = result.final_network.layer_weights(layer).reshape(-1).astype(np.float64)
        allowed = set()
        for _, subset in result.adopted_subsets:
            allowed |= set(subset.tolist())
        assert set(np.flatnonzero(after != before).tolist()) <= allowed
        assert np.abs(after - before).max(initial=0.0) <= result.bound * max(1, len(result.adopted_subsets))

    def test_metric_min_mode(self, toy_system, toy_eval_set):
        cfg = toy_config(iterations=100, selection_mode="metric_min")
        result = search_backdoor(toy_system, cfg, toy_eval_set)
        assert result.final_score.metric_value < result.baseline_score.metric_value

    def test_seed_scheme_recorded(self, toy_system, toy_eval_set):
        assert "SeedSequence" in search_backdoor(toy_system, toy_config(sets=0), toy_eval_set).seed_scheme


class TestTraceCsv:
    def test_header_and_rows(self, tmp_path, toy_system, toy_eval_set):
        result = search_backdoor(toy_system, toy_config(sets=2, iterations=3), toy_eval_set)
        path = write_trace_csv(result, tmp_path / "trace.csv")
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == list(TRACE_COLUMNS)
        assert len(lines) == 1 + 6
        assert lines[1].startswith("0,0,")

    def test_byte_identical_reruns(self, tmp_path, toy_system, toy_eval_set):
        cfg = toy_config(sets=3, iterations=10, master_seed=5)
        a = write_trace_csv(search_backdoor(toy_system, cfg, toy_eval_set), tmp_path / "a.csv")
        b = write_trace_csv(search_backdoor(toy_system, cfg, toy_eval_set), tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()
