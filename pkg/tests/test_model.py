import numpy as np
import pytest

from pairzsl.errors import ShapeError
from pairzsl.layers import DomainTag, LinearLayer
from pairzsl.model import (
    AlignmentMode,
    PairBatch,
    TwoLayerMlp,
    build_model,
    build_source_pairs,
    build_target_pairs,
    decode,
    encode,
    metric_backward,
    metric_forward,
)
from pairzsl.numerics import finite_diff_grad, vec_sum
from pairzsl.rng import RngState


def _zero_mlp(n_in, n_hidden, n_out):
    return TwoLayerMlp(
        lin1=LinearLayer(np.zeros((n_hidden, n_in)), np.zeros(n_hidden)),
        lin2=LinearLayer(np.zeros((n_out, n_hidden)), np.zeros(n_out)),
    )


class TestEncodeDecode:
    def test_zero_weight_encoder_maps_to_zero(self):
        out, _ = encode(_zero_mlp(4, 6, 5), np.ones((3, 4)))
        assert np.array_equal(out, np.zeros((3, 5)))

    def test_single_row_shape_contract(self):
        model = build_model(d=5, r=4, mode=AlignmentMode.DSBN, seed=0, hidden=6)
        out, _ = encode(model.encoder, np.ones((1, 4)))
        assert out.shape == (1, 5)

    def test_zero_weight_decoder_reconstruction_distance(self):
        from pairzsl.losses import reconstruction_loss

        a = np.array([[1.0, 2.0], [0.0, 3.0]])
        ahat, _ = decode(_zero_mlp(5, 6, 2), np.ones((2, 5)))
        value, _ = reconstruction_loss(a, ahat)
        norms = (a**2).sum(axis=1)
        assert abs(value - norms.mean()) < 1e-12

    def test_passthrough_configuration(self):
        # positive inputs, identity-embedding layers: decode(x) == x
        n = 3
        lift = np.vstack([np.eye(n), np.zeros((2, n))])  # r -> hidden
        drop = np.hstack([np.eye(n), np.zeros((n, 2))])  # hidden -> r
        mlp = TwoLayerMlp(
            lin1=LinearLayer(lift, np.zeros(n + 2)),
            lin2=LinearLayer(drop, np.zeros(n)),
        )
        x = np.abs(RngState(0).normals((4, n))) + 0.1
        out, _ = decode(mlp, x)
        assert np.abs(out - x).max() < 1e-12

    def test_encoder_gradient_matches_finite_differences(self):
        rng = RngState(1)
        model = build_model(d=4, r=3, mode=AlignmentMode.NONE, seed=1, hidden=5)
        a = rng.uniforms((3, 3))
        weights = rng.normals((3, 4))

        out, cache = encode(model.encoder, a)
        from pairzsl.model import mlp_backward

        grads, _ = mlp_backward(model.encoder, cache, weights, "encoder")
        w0 = model.encoder.lin1.weight.copy()

        def loss(wm):
            model.encoder.lin1.weight = wm
            try:
                return vec_sum((encode(model.encoder, a)[0] * weights).reshape(-1))
            finally:
                model.encoder.lin1.weight = w0

        fd = finite_diff_grad(loss, w0)
        scale = max(np.abs(fd).max(), 1e-8)
        assert np.abs(grads["encoder.lin1.weight"] - fd).max() / scale < 1e-4


class TestBuildSourcePairs:
    def test_counting_by_definition(self):
        x = RngState(2).normals((3, 4))
        y = np.array([3, 5, 3])
        enc = RngState(3).normals((6, 2))
        batch = build_source_pairs(x, y, enc)
        assert batch.n_pairs == 6  # 3 images x 2 distinct categories
        assert batch.labels.sum() == 3.0  # one positive per image
        assert batch.tag == DomainTag.SOURCE
        assert np.array_equal(np.unique(batch.category_index), [3, 5])

    def test_all_images_same_class(self):
        x = np.ones((4, 2))
        batch = build_source_pairs(x, np.zeros(4, dtype=int), np.ones((1, 3)))
        assert batch.n_pairs == 4
        assert (batch.labels == 1.0).all()

    def test_single_image(self):
        batch = build_source_pairs(np.ones((1, 2)), [0], np.ones((2, 3)))
        assert batch.n_pairs == 1
        assert batch.labels[0] == 1.0

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            build_source_pairs(np.ones((2, 2)), [0, 7], np.ones((3, 2)))

    def test_pair_rows_are_feature_then_attribute(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        y = np.array([1, 0])
        enc = np.array([[10.0], [20.0]])
        batch = build_source_pairs(x, y, enc)
        # image-major, categories ascending: (img0,cat0), (img0,cat1), ...
        expected = np.array(
            [
                [1.0, 2.0, 10.0],
                [1.0, 2.0, 20.0],
                [3.0, 4.0, 10.0],
                [3.0, 4.0, 20.0],
            ]
        )
        assert np.array_equal(batch.pairs, expected)
        assert np.array_equal(batch.labels, [0.0, 1.0, 1.0, 0.0])


class TestBuildTargetPairs:
    def test_image_group_layout(self):
        batch = build_target_pairs(np.ones((2, 4)), np.ones((3, 2)))
        assert batch.n_pairs == 6
        assert np.array_equal(batch.image_group, [0, 0, 0, 1, 1, 1])
        assert np.array_equal(batch.category_index, [0, 1, 2, 0, 1, 2])
        assert batch.labels is None

    def test_single_pair(self):
        batch = build_target_pairs(np.ones((1, 2)), np.ones((1, 3)))
        assert batch.n_pairs == 1

    def test_rows_match_concatenation_entrywise(self):
        rng = RngState(4)
        x = rng.normals((2, 3))
        enc = rng.normals((2, 2))
        batch = build_target_pairs(x, enc)
        for i in range(2):
            for j in range(2):
                row = batch.pairs[i * 2 + j]
                assert np.array_equal(row[:3], x[i])
                assert np.array_equal(row[3:], enc[j])

    def test_empty_category_set(self):
        with pytest.raises(ShapeError, match="empty"):
            build_target_pairs(np.ones((2, 3)), np.zeros((0, 2)))


class TestMetricForward:
    def _batch(self, net_width, n=4, tag=DomainTag.SOURCE):
        return PairBatch(
            pairs=RngState(5).normals((n, net_width)),
            tag=tag,
            category_index=np.zeros(n, dtype=np.int64),
        )

    def test_zero_weights_give_half_scores(self):
        model = build_model(d=2, r=2, mode=AlignmentMode.NONE, seed=0, hidden=4)
        for _, param in model.parameters():
            param[...] = 0.0
        batch = self._batch(4)
        z, scores, _ = metric_forward(model.metric, batch, train=False)
        assert np.array_equal(z, np.zeros(4))
        assert np.array_equal(scores, np.full(4, 0.5))

    def test_scores_strictly_inside_unit_interval(self):
        model = build_model(d=3, r=2, mode=AlignmentMode.DSBN, seed=1, hidden=4)
        batch = self._batch(6)
        _, scores, _ = metric_forward(model.metric, batch, train=True)
        assert (scores > 0.0).all() and (scores < 1.0).all()

    def test_source_forward_leaves_target_stats_bitwise(self):
        model = build_model(d=3, r=2, mode=AlignmentMode.DSBN, seed=2, hidden=4)
        norm = model.metric.norm1
        before = norm.running_mean[DomainTag.TARGET].copy()
        metric_forward(model.metric, self._batch(6, n=5), train=True)
        assert np.array_equal(norm.running_mean[DomainTag.TARGET], before)
        assert norm.seen[DomainTag.SOURCE] and not norm.seen[DomainTag.TARGET]

    def test_eval_permutation_equivariance(self):
        model = build_model(d=3, r=2, mode=AlignmentMode.DSBN, seed=3, hidden=4)
        metric_forward(model.metric, self._batch(6, n=6), train=True)  # seed stats
        batch = self._batch(6, n=6)
        z, _, _ = metric_forward(model.metric, batch, train=False)
        perm = np.array([3, 0, 5, 1, 4, 2])
        permuted = PairBatch(
            pairs=batch.pairs[perm],
            tag=batch.tag,
            category_index=batch.category_index[perm],
        )
        z_perm, _, _ = metric_forward(model.metric, permuted, train=False)
        assert np.array_equal(z_perm, z[perm])

    def test_metric_gradient_matches_finite_differences(self):
        model = build_model(d=2, r=2, mode=AlignmentMode.NONE, seed=4, hidden=4)
        batch = self._batch(4, n=5)
        weights = RngState(6).normals(5)

        z, _, cache = metric_forward(model.metric, batch, train=True)
        grads, dpairs = metric_backward(model.metric, cache, weights)
        fd = finite_diff_grad(
            lambda pm: vec_sum(
                metric_forward(
                    model.metric,
                    PairBatch(pairs=pm, tag=batch.tag, category_index=batch.category_index),
                    train=True,
                )[0]
                * weights
            ),
            batch.pairs,
        )
        scale = max(np.abs(fd).max(), 1e-8)
        assert np.abs(dpairs - fd).max() / scale < 1e-4

    def test_backward_requires_train_cache(self):
        model = build_model(d=2, r=2, mode=AlignmentMode.NONE, seed=5, hidden=4)
        _, _, cache = metric_forward(model.metric, self._batch(4, n=3), train=False)
        with pytest.raises(ValueError, match="train-mode"):
            metric_backward(model.metric, cache, np.zeros(3))


class TestPairCountProperties:
    def test_source_pair_counts_random(self):
        rng = RngState(7)
        for trial in range(10):
            m = 2 + trial
            k_s = 5
            y = (rng.uniforms(m) * k_s).astype(np.int64)
            batch = build_source_pairs(rng.normals((m, 3)), y, rng.normals((k_s, 2)))
            n_cats = np.unique(y).shape[0]
            assert batch.n_pairs == m * n_cats
            assert batch.labels.sum() == float(m)

    def test_target_pair_counts_random(self):
        rng = RngState(8)
        for m, k_t in [(1, 1), (2, 3), (7, 4)]:
            batch = build_target_pairs(rng.normals((m, 3)), rng.normals((k_t, 2)))
            assert batch.n_pairs == m * k_t


class TestModelAssembly:
    @pytest.mark.parametrize(
        "mode,norm_type",
        [
            (AlignmentMode.DSBN, "DsbnLayer"),
            (AlignmentMode.SINGLE_BN, "BnLayer"),
            (AlignmentMode.MMD, "BnLayer"),
            (AlignmentMode.DANN, "BnLayer"),
            (AlignmentMode.NONE, "NoneType"),
        ],
    )
    def test_norm_layer_flavor_per_mode(self, mode, norm_type):
        model = build_model(d=3, r=2, mode=mode, seed=0, hidden=4)
        assert type(model.metric.norm1).__name__ == norm_type
        assert type(model.metric.norm2).__name__ == norm_type
        assert (model.domain_classifier is not None) == (mode == AlignmentMode.DANN)

    def test_parameter_names_are_stable_and_shared(self):
        model = build_model(d=3, r=2, mode=AlignmentMode.DSBN, seed=0, hidden=4)
        names = [name for name, _ in model.parameters()]
        assert names[0] == "encoder.lin1.weight"
        assert "metric.norm1.gamma" in names and "metric.norm2.beta" in names
        assert len(names) == len(set(names))

    def test_equal_seeds_give_identical_initialization(self):
        a = build_model(d=3, r=2, mode=AlignmentMode.DSBN, seed=9, hidden=4)
        b = build_model(d=3, r=2, mode=AlignmentMode.DSBN, seed=9, hidden=4)
        for (n1, p1), (n2, p2) in zip(a.parameters(), b.parameters()):
            assert n1 == n2 and np.array_equal(p1, p2)

    def test_r_prime_defaults_to_d(self):
        model = build_model(d=7, r=3, mode=AlignmentMode.NONE, seed=0, hidden=4)
        assert model.dims.r_prime == 7
        assert model.metric.lin1.in_dim == 14
