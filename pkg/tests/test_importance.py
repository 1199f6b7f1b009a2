import math

import numpy as np
import pytest

from taskprune.errors import ValidationError
from taskprune.importance import (
    DEFAULT_WEIGHTS,
    EstimatorConfig,
    hsic_scores,
    histogram_mi_matrix,
    kl_divergence,
    layer_importance,
    layer_scores_from_raw,
    load_scores,
    minmax_normalize,
    neuron_scores,
    recompose,
    save_scores,
    validate_weights,
)

from conftest import make_patches


def _discretize(x, bins):
    # equal-width bins over the sample min-max, top edge closed
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(len(x), dtype=np.int64)
    ids = ((x - lo) * (bins / (hi - lo))).astype(np.int64)
    return np.minimum(ids, bins - 1)


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _mi_oracle(x, y, bins):
    ix, iy = _discretize(x, bins), _discretize(y, bins)
    joint = np.zeros((bins, bins))
    for a, b in zip(ix, iy):
        joint[a, b] += 1.0
    joint /= len(x)
    return _entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0)) - _entropy(joint.ravel())


def _hsic_oracle(x_col, logits, floor=1e-6):
    n = len(logits)
    h = np.eye(n) - np.ones((n, n)) / n

    def gram(d2):
        upper = d2[np.triu_indices(n, k=1)]
        sigma_sq = max(float(np.median(upper)), floor)
        return np.exp(-d2 / (2.0 * sigma_sq))

    dx = (x_col[:, None] - x_col[None, :]) ** 2
    sq = (logits * logits).sum(axis=1)
    dl = np.maximum(sq[:, None] + sq[None, :] - 2.0 * logits @ logits.T, 0.0)
    return float(np.trace(gram(dx) @ h @ gram(dl) @ h)) / (n * n)


class TestMutualInformation:
    def test_matches_pairwise_oracle(self, rng):
        acts = rng.normal(size=(60, 5))
        mi = histogram_mi_matrix(acts, bins=8)
        for i in range(5):
            for j in range(5):
                assert abs(mi[i, j] - _mi_oracle(acts[:, i], acts[:, j], 8)) < 1e-10

    def test_duplicate_exceeds_independent(self, rng):
        base = rng.normal(size=200)
        acts = np.column_stack([base, base, rng.normal(size=200)])
        mi = histogram_mi_matrix(acts, bins=16)
        assert mi[0, 1] > 3.0 * mi[0, 2]
        assert mi[0, 1] == pytest.approx(mi[0, 0], abs=1e-12)  # copy carries full entropy

    def test_symmetric(self, rng):
        acts = rng.normal(size=(80, 4))
        mi = histogram_mi_matrix(acts, bins=8)
        np.testing.assert_allclose(mi, mi.T, atol=1e-12)


class TestHsic:
    def test_matches_naive_centering_oracle(self, rng):
        acts = rng.normal(size=(40, 3))
        logits = rng.normal(size=(40, 4))
        got = hsic_scores(acts, logits)
        for j in range(3):
            assert abs(got[j] - _hsic_oracle(acts[:, j], logits)) < 1e-12

    def test_dependent_beats_independent(self, rng):
        logits = rng.normal(size=(100, 3))
        acts = np.column_stack([logits[:, 0] * 2.0 + 0.5, rng.normal(size=100)])
        got = hsic_scores(acts, logits)
        assert got[0] > 5.0 * abs(got[1])


class TestNormalization:
    def test_minmax_endpoints(self):
        out = minmax_normalize(np.array([2.0, 4.0, 3.0]))
        np.testing.assert_allclose(out, [0.0, 1.0, 0.5], atol=1e-15)

    def test_constant_maps_to_half(self):
        np.testing.assert_array_equal(minmax_normalize(np.full(4, 7.0)), 0.5)

    def test_positive_affine_invariance(self, rng):
        x = rng.normal(size=20)
        np.testing.assert_allclose(
            minmax_normalize(3.0 * x + 11.0), minmax_normalize(x), atol=1e-12
        )

    def test_weight_validation(self):
        assert validate_weights((0.1, 0.1, 0.8)) == (0.1, 0.1, 0.8)
        assert validate_weights((0.0, 0.0, 1.0)) == (0.0, 0.0, 1.0)
        with pytest.raises(ValidationError):
            validate_weights((0.5, 0.5, 0.5))
        with pytest.raises(ValidationError):
            validate_weights((-0.1, 0.3, 0.8))


class TestUnitScores:
    def test_shapes_follow_model(self, tiny_model, rng):
        patches = make_patches(rng, 24)
        scores = neuron_scores(tiny_model, patches)
        assert scores.weights == DEFAULT_WEIGHTS
        assert len(scores.layers) == tiny_model.num_layers
        for entry, blk in zip(scores.layers, tiny_model.blocks):
            assert entry.ffn.width == blk.ffn_width
            assert entry.mha.width == blk.channels
            assert entry.ffn.composite.min() >= 0.0
            assert entry.ffn.composite.max() <= 1.0

    def test_deterministic(self, tiny_model, rng):
        patches = make_patches(rng, 16)
        a = neuron_scores(tiny_model, patches)
        b = neuron_scores(tiny_model, patches)
        assert a.layers[1].ffn.composite.tobytes() == b.layers[1].ffn.composite.tobytes()

    def test_dead_unit_scores_minimum_activeness(self, tiny_model, rng):
        tiny_model.blocks[0].w1[:, 3] = 0.0
        tiny_model.blocks[0].b1[3] = 0.0
        patches = make_patches(rng, 24)
        scores = neuron_scores(tiny_model, patches, weights=(1.0, 0.0, 0.0))
        group = scores.layers[0].ffn
        assert group.activeness[3] == 0.0
        assert group.composite[3] == 0.0
        assert group.composite.max() == 1.0

    def test_activeness_only_weights_reduce_to_normalized_a(self, tiny_model, rng):
        patches = make_patches(rng, 16)
        scores = neuron_scores(tiny_model, patches, weights=(1.0, 0.0, 0.0))
        for entry in scores.layers:
            for group in (entry.ffn, entry.mha):
                np.testing.assert_array_equal(
                    group.composite, minmax_normalize(group.activeness)
                )

    def test_group_normalization_is_local(self, tiny_model, rng):
        patches = make_patches(rng, 16)
        scores = neuron_scores(tiny_model, patches, weights=(1.0, 0.0, 0.0))
        for entry in scores.layers:
            for group in (entry.ffn, entry.mha):
                assert group.composite.min() == 0.0
                assert group.composite.max() == 1.0

    def test_single_unit_group_scores_half(self, rng):
        from taskprune.nn.model import build_model

        model = build_model(4, 4, 8, 1, 1, 1, 3, seed=2)
        patches = make_patches(rng, 12)
        scores = neuron_scores(model, patches)
        ffn = scores.layers[0].ffn
        assert ffn.width == 1
        assert ffn.redundancy[0] == 0.0
        assert ffn.composite[0] == 0.5

    def test_requires_live_blocks_and_samples(self, tiny_model, rng):
        patches = make_patches(rng, 8)
        with pytest.raises(ValidationError):
            neuron_scores(tiny_model, patches[:0])
        tiny_model.blocks[1].enabled = False
        with pytest.raises(ValidationError):
            neuron_scores(tiny_model, patches)

    def test_recompose_matches_direct_scoring(self, tiny_model, rng):
        patches = make_patches(rng, 16)
        base = neuron_scores(tiny_model, patches)
        direct = neuron_scores(tiny_model, patches, weights=(0.3, 0.3, 0.4))
        rebuilt = recompose(base, (0.3, 0.3, 0.4))
        for l in range(tiny_model.num_layers):
            np.testing.assert_array_equal(
                rebuilt.layers[l].ffn.composite, direct.layers[l].ffn.composite
            )
            np.testing.assert_array_equal(
                rebuilt.layers[l].mha.composite, direct.layers[l].mha.composite
            )
        identity = recompose(base, base.weights)
        np.testing.assert_array_equal(
            identity.layers[0].ffn.composite, base.layers[0].ffn.composite
        )


class TestKl:
    def test_hand_worked_pair(self):
        got = kl_divergence(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert abs(got - expected) < 1e-15
        assert abs(got - 0.14384) < 1e-4

    def test_self_divergence_is_zero(self, rng):
        p = rng.dirichlet(np.ones(5), size=10)
        np.testing.assert_array_equal(kl_divergence(p, p), 0.0)

    def test_asymmetric(self):
        p = np.array([0.9, 0.1])
        q = np.array([0.5, 0.5])
        assert kl_divergence(p, q) != kl_divergence(q, p)

    def test_rowwise(self, rng):
        p = rng.dirichlet(np.ones(4), size=6)
        q = rng.dirichlet(np.ones(4), size=6)
        out = kl_divergence(p, q)
        assert out.shape == (6,)
        assert out.min() >= 0.0


class TestLayerScores:
    def test_softmax_shift_invariance(self):
        raw = np.array([0.02, 0.4, 0.11])
        a = layer_scores_from_raw(raw)
        b = layer_scores_from_raw(raw + 5.0)
        np.testing.assert_allclose(a.delta, b.delta, atol=1e-12)
        assert abs(a.delta.sum() - 1.0) < 1e-12

    def test_invert_flips_preference(self):
        raw = np.array([0.1, 0.9])
        normal = layer_scores_from_raw(raw)
        flipped = layer_scores_from_raw(raw, invert=True)
        assert normal.delta[1] > normal.delta[0]
        assert flipped.delta[0] > flipped.delta[1]
        np.testing.assert_allclose(flipped.delta, normal.delta[::-1], atol=1e-12)

    def test_identity_block_contributes_zero(self, tiny_model, rng):
        blk = tiny_model.blocks[0]
        blk.wo[:] = 0.0
        blk.bo[:] = 0.0
        blk.w1[:] = 0.0  # keeps hidden constant; output path below is what matters
        blk.w2[:] = 0.0
        blk.b2[:] = 0.0
        patches = make_patches(rng, 10)
        result = layer_importance(tiny_model, patches)
        assert result.delta_raw[0] == 0.0
        assert result.delta_raw[1] > 0.0
        assert result.delta[1] > result.delta[0]

    def test_restores_enabled_flags(self, tiny_model, rng):
        patches = make_patches(rng, 8)
        layer_importance(tiny_model, patches)
        assert all(blk.enabled for blk in tiny_model.blocks)

    def test_input_validation(self, tiny_model, rng):
        with pytest.raises(ValidationError):
            layer_importance(tiny_model, make_patches(rng, 4)[:0])


class TestScoreFile:
    def test_round_trip_bit_exact(self, tiny_model, rng, tmp_path):
        patches = make_patches(rng, 16)
        scores = neuron_scores(tiny_model, patches, config=EstimatorConfig(mi_bins=8))
        layer_scores = layer_importance(tiny_model, patches)
        path = tmp_path / "scores.json"
        save_scores(path, scores, layer_scores)
        loaded, loaded_layers = load_scores(path)
        assert loaded.weights == scores.weights
        assert loaded.warnings == scores.warnings
        for l in range(tiny_model.num_layers):
            for kind in ("ffn", "mha"):
                a = scores.group(l, kind)
                b = loaded.group(l, kind)
                assert a.activeness.tobytes() == b.activeness.tobytes()
                assert a.redundancy.tobytes() == b.redundancy.tobytes()
                assert a.relevance.tobytes() == b.relevance.tobytes()
                assert a.composite.tobytes() == b.composite.tobytes()
        assert loaded_layers.delta_raw.tobytes() == layer_scores.delta_raw.tobytes()
        assert loaded_layers.delta.tobytes() == layer_scores.delta.tobytes()

    def test_layer_scores_optional(self, tiny_model, rng, tmp_path):
        patches = make_patches(rng, 12)
        scores = neuron_scores(tiny_model, patches)
        path = tmp_path / "scores.json"
        save_scores(path, scores)
        _, layer_scores = load_scores(path)
        assert layer_scores is None
