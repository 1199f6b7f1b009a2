import numpy as np
import pytest

from taskprune.errors import ValidationError
from taskprune.importance import GroupScores, LayerUnitScores, NeuronScores, neuron_scores
from taskprune.sensitivity import (
    Ranking,
    count_inversions,
    divergence_csv,
    importance_ranking,
    kendall_tau,
    layer_profile_compare,
    save_divergence,
    task_divergence_matrix,
)

from conftest import make_patches


def _inversions_oracle(seq):
    seq = list(seq)
    return sum(
        1
        for i in range(len(seq))
        for j in range(i + 1, len(seq))
        if seq[i] > seq[j]
    )


def _scores_from_composites(per_layer):
    layers = []
    for l, (ffn, mha) in enumerate(per_layer):
        groups = {}
        for kind, vals in (("ffn", ffn), ("mha", mha)):
            arr = np.asarray(vals, dtype=np.float64)
            groups[kind] = GroupScores(
                kind=kind, activeness=arr, redundancy=arr, relevance=arr, composite=arr
            )
        layers.append(LayerUnitScores(layer=l, ffn=groups["ffn"], mha=groups["mha"]))
    return NeuronScores(weights=(1.0, 0.0, 0.0), layers=layers, warnings=[])


class TestInversions:
    def test_sorted_and_reversed(self):
        assert count_inversions(range(10)) == 0
        assert count_inversions(range(9, -1, -1)) == 45

    def test_matches_quadratic_oracle(self, rng):
        for _ in range(50):
            seq = rng.permutation(int(rng.integers(2, 40)))
            assert count_inversions(seq) == _inversions_oracle(seq)

    def test_short_sequences(self):
        assert count_inversions([]) == 0
        assert count_inversions([3]) == 0
        assert count_inversions([2, 1]) == 1


class TestKendallTau:
    def test_identical_rankings(self):
        assert kendall_tau([4, 2, 7, 1], [4, 2, 7, 1]) == 1.0

    def test_reversed_rankings(self):
        assert kendall_tau([0, 1, 2, 3, 4], [4, 3, 2, 1, 0]) == -1.0

    def test_single_swap_worked_example(self):
        # one discordant pair of six: tau = (6 - 2) / 6 = 2/3
        assert kendall_tau([0, 1, 2, 3], [0, 1, 3, 2]) == pytest.approx(2.0 / 3.0)

    def test_symmetry_is_exact(self, rng):
        for _ in range(10):
            a = rng.permutation(30)
            b = rng.permutation(30)
            assert kendall_tau(a, b) == kendall_tau(b, a)

    def test_matches_scipy(self, rng):
        from scipy import stats

        for _ in range(10):
            n = int(rng.integers(3, 25))
            a, b = rng.permutation(n), rng.permutation(n)
            # scipy correlates score vectors; convert orderings to per-item positions
            pos_a, pos_b = np.empty(n), np.empty(n)
            pos_a[a] = np.arange(n)
            pos_b[b] = np.arange(n)
            expected = stats.kendalltau(pos_a, pos_b).statistic
            assert kendall_tau(a, b) == pytest.approx(expected, abs=1e-12)

    def test_mismatched_sets_rejected(self):
        with pytest.raises(ValidationError):
            kendall_tau([0, 1, 2], [0, 1, 3])
        with pytest.raises(ValidationError):
            kendall_tau([0, 1, 2], [0, 1])
        with pytest.raises(ValidationError):
            kendall_tau([5], [5])
        with pytest.raises(ValidationError):
            kendall_tau([1, 1, 2], [1, 2, 1])


class TestRankingExtraction:
    def test_global_identifier_layout(self):
        scores = _scores_from_composites(
            [
                ([0.9, 0.1], [0.5]),  # ids 0, 1 (ffn), 2 (mha)
                ([0.7], [0.3, 0.8]),  # ids 3 (ffn), 4, 5 (mha)
            ]
        )
        ranking = importance_ranking(scores)
        np.testing.assert_array_equal(ranking.order, [0, 5, 3, 2, 4, 1])

    def test_ties_resolve_to_lower_identifier(self):
        scores = _scores_from_composites([([0.5, 0.5], [0.5])])
        ranking = importance_ranking(scores)
        np.testing.assert_array_equal(ranking.order, [0, 1, 2])

    def test_layer_and_kind_filters(self):
        scores = _scores_from_composites(
            [([0.9, 0.1], [0.5]), ([0.7], [0.3, 0.8])]
        )
        ffn_only = importance_ranking(scores, kind="ffn")
        np.testing.assert_array_equal(ffn_only.order, [0, 3, 1])
        layer1 = importance_ranking(scores, layer=1)
        np.testing.assert_array_equal(layer1.order, [5, 3, 4])
        with pytest.raises(ValidationError):
            importance_ranking(scores, layer=7)


class TestDivergenceMatrix:
    def _random_sets(self, rng, m, widths=((6, 4), (5, 3))):
        sets = []
        for _ in range(m):
            sets.append(
                _scores_from_composites(
                    [(rng.normal(size=f), rng.normal(size=c)) for f, c in widths]
                )
            )
        return sets

    def test_matrix_properties(self, rng):
        result = task_divergence_matrix(self._random_sets(rng, 4))
        np.testing.assert_array_equal(result.tau, result.tau.T)
        np.testing.assert_array_equal(np.diag(result.divergence), 0.0)
        assert result.divergence.min() >= 0.0
        assert result.divergence.max() <= 1.0
        np.testing.assert_allclose(result.divergence, (1.0 - result.tau) / 2.0, atol=1e-15)

    def test_ten_task_symmetry_exact(self, rng):
        result = task_divergence_matrix(self._random_sets(rng, 10))
        assert np.abs(result.tau - result.tau.T).max() <= 1e-12

    def test_identical_tasks_diverge_zero(self, rng):
        one = self._random_sets(rng, 1)[0]
        result = task_divergence_matrix([one, one, one])
        np.testing.assert_array_equal(result.divergence, 0.0)
        np.testing.assert_array_equal(result.tau, 1.0)

    def test_breakdown_covers_groups(self, rng):
        result = task_divergence_matrix(self._random_sets(rng, 3))
        keys = {(b["layer"], b["kind"]) for b in result.breakdown}
        assert keys == {(0, "ffn"), (0, "mha"), (1, "ffn"), (1, "mha")}
        for b in result.breakdown:
            assert -1.0 <= b["mean_tau"] <= 1.0

    def test_single_unit_group_skipped(self, rng):
        sets = self._random_sets(rng, 2, widths=((4, 1),))
        result = task_divergence_matrix(sets)
        assert {(b["layer"], b["kind"]) for b in result.breakdown} == {(0, "ffn")}

    def test_structure_mismatch_rejected(self, rng):
        a = self._random_sets(rng, 1)[0]
        b = self._random_sets(rng, 1, widths=((6, 4), (5, 2)))[0]
        with pytest.raises(ValidationError):
            task_divergence_matrix([a, b])
        with pytest.raises(ValidationError):
            task_divergence_matrix([a])

    def test_csv_and_json_outputs(self, rng, tmp_path):
        result = task_divergence_matrix(self._random_sets(rng, 3), ["a", "b", "c"])
        csv = divergence_csv(result)
        lines = csv.strip().split("\n")
        assert lines[0] == "task,a,b,c"
        assert len(lines) == 4
        cells = [line.split(",") for line in lines[1:]]
        assert float(cells[0][1]) == 0.0
        assert float(cells[1][2]) == 0.0
        assert float(cells[0][2]) == result.divergence[0, 1]
        save_divergence(tmp_path / "d.csv", tmp_path / "d.json", result)
        from taskprune import jsonio

        doc = jsonio.load(tmp_path / "d.json")
        assert doc["task_ids"] == ["a", "b", "c"]
        np.testing.assert_array_equal(np.asarray(doc["tau"]), result.tau)


class TestLayerProfiles:
    def test_profile_comparison(self, tiny_model, rng):
        a = make_patches(rng, 10)
        b = make_patches(rng, 10) + 1.0
        cmp = layer_profile_compare(tiny_model, a, b)
        assert sorted(cmp.layer_rank_a) == [0, 1]
        assert cmp.tau in (-1.0, 1.0)
        assert abs(cmp.profile_a.delta.sum() - 1.0) < 1e-9

    def test_same_metric_gives_perfect_agreement(self, tiny_model, rng):
        a = make_patches(rng, 10)
        cmp = layer_profile_compare(tiny_model, a, a.copy())
        assert cmp.tau == 1.0
        assert cmp.layer_rank_a == cmp.layer_rank_b

    def test_single_layer_tau_undefined(self, rng):
        from taskprune.nn.model import build_model

        model = build_model(4, 4, 8, 1, 2, 12, 3, seed=6)
        a = make_patches(rng, 8)
        b = make_patches(rng, 8)
        cmp = layer_profile_compare(model, a, b)
        assert cmp.tau is None
        assert cmp.layer_rank_a == [0]
