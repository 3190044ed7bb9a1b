import numpy as np
import pytest

from pairzsl.errors import ShapeError, StatsNotSeenError
from pairzsl.layers import (
    DomainTag,
    DsbnLayer,
    LinearLayer,
    bn_backward,
    bn_forward_eval,
    bn_forward_train,
    bn_init,
    dsbn_backward,
    dsbn_forward_eval,
    dsbn_forward_train,
    dsbn_init,
    linear_backward,
    linear_forward,
    linear_init,
    relu_backward,
    relu_forward,
)
from pairzsl.numerics import finite_diff_grad, row_stats, vec_sum
from pairzsl.rng import RngState

SOURCE = DomainTag.SOURCE
TARGET = DomainTag.TARGET


def _wsum(y, weights):
    return vec_sum((y * weights).reshape(-1))


class TestLinear:
    def test_identity_layer(self):
        layer = LinearLayer(weight=np.eye(3), bias=np.zeros(3))
        x = np.arange(6.0).reshape(2, 3)
        y, _ = linear_forward(layer, x)
        assert np.array_equal(y, x)

    def test_dbias_is_column_sums(self):
        layer = linear_init(RngState(0), 4, 3)
        x = RngState(1).normals((5, 4))
        _, cache = linear_forward(layer, x)
        _, _, dbias = linear_backward(layer, cache, np.ones((5, 3)))
        assert np.array_equal(dbias, np.full(3, 5.0))

    def test_gradients_match_finite_differences(self):
        rng = RngState(2)
        layer = linear_init(rng, 4, 3)
        x = rng.normals((5, 4))
        weights = rng.normals((5, 3))
        _, cache = linear_forward(layer, x)
        dx, dw, db = linear_backward(layer, cache, weights)
        fd_x = finite_diff_grad(lambda m: _wsum(linear_forward(layer, m)[0], weights), x)
        assert np.abs(dx - fd_x).max() < 1e-4 * max(1.0, np.abs(fd_x).max())
        fd_w = finite_diff_grad(
            lambda m: _wsum(linear_forward(LinearLayer(m, layer.bias), x)[0], weights),
            layer.weight,
        )
        assert np.abs(dw - fd_w).max() < 1e-4 * max(1.0, np.abs(fd_w).max())

    def test_shape_errors(self):
        layer = linear_init(RngState(0), 4, 3)
        with pytest.raises(ShapeError):
            linear_forward(layer, np.zeros((2, 5)))
        _, cache = linear_forward(layer, np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            linear_backward(layer, cache, np.zeros((2, 4)))


class TestRelu:
    def test_backward_masks_negative_inputs(self):
        x = np.array([[-1.0, 2.0, 0.0]])
        _, cache = relu_forward(x)
        dx = relu_backward(cache, np.ones((1, 3)))
        assert np.array_equal(dx, np.array([[0.0, 1.0, 0.0]]))


class TestDsbnTrain:
    def test_symmetric_two_point_batch(self):
        layer = dsbn_init(1)
        z, _ = dsbn_forward_train(layer, np.array([[0.0], [2.0]]), SOURCE)
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        assert abs(z[0, 0] + expected) < 1e-15
        assert abs(z[1, 0] - expected) < 1e-15

    def test_constant_batch_returns_beta(self):
        layer = dsbn_init(2)
        layer.beta[...] = [0.7, -0.3]
        x = np.full((3, 2), 4.2)
        z, _ = dsbn_forward_train(layer, x, TARGET)
        assert np.array_equal(z, np.tile(layer.beta, (3, 1)))

    def test_running_mean_update_hand_evaluated(self):
        layer = dsbn_init(1, momentum=0.9)
        x = np.array([[0.5], [1.5]])  # batch mean exactly 1
        dsbn_forward_train(layer, x, SOURCE)
        assert abs(layer.running_mean[SOURCE][0] - 0.1) < 1e-15

    def test_single_row_batch_rejected(self):
        layer = dsbn_init(2)
        with pytest.raises(ShapeError, match="at least 2"):
            dsbn_forward_train(layer, np.ones((1, 2)), SOURCE)

    def test_source_batches_never_touch_target_stats(self):
        layer = dsbn_init(3)
        before_mean = layer.running_mean[TARGET].copy()
        before_std = layer.running_std[TARGET].copy()
        rng = RngState(4)
        for _ in range(5):
            dsbn_forward_train(layer, rng.normals((6, 3)), SOURCE)
        assert np.array_equal(layer.running_mean[TARGET], before_mean)
        assert np.array_equal(layer.running_std[TARGET], before_std)
        assert not np.array_equal(layer.running_mean[SOURCE], np.zeros(3))

    def test_normalized_output_statistics(self):
        rng = RngState(9)
        layer = dsbn_init(4)
        x = rng.normals((8, 4)) * 3.0 + 1.0
        z, _ = dsbn_forward_train(layer, x, SOURCE)
        _, batch_var = row_stats(x)
        mean_z, var_z = row_stats(z)
        assert np.abs(mean_z).max() <= 1e-10
        expected_var = batch_var / (batch_var + layer.epsilon)
        assert np.abs(var_z - expected_var).max() < 1e-6

    def test_update_stats_flag_keeps_layer_pure(self):
        layer = dsbn_init(2)
        dsbn_forward_train(layer, RngState(1).normals((4, 2)), SOURCE, update_stats=False)
        assert not layer.seen[SOURCE]
        assert np.array_equal(layer.running_mean[SOURCE], np.zeros(2))


class TestDsbnEval:
    def test_identity_statistics(self):
        layer = dsbn_init(2)
        layer.seen[SOURCE] = True  # running stats remain (0, 1)
        x = RngState(2).normals((5, 2))
        out = dsbn_forward_eval(layer, x, SOURCE)
        assert np.abs(out - x).max() < 1e-5  # epsilon-only deviation

    def test_hand_evaluated_statistics(self):
        layer = DsbnLayer(
            gamma=np.ones(1),
            beta=np.zeros(1),
            running_mean={SOURCE: np.array([5.0]), TARGET: np.zeros(1)},
            running_std={SOURCE: np.array([2.0]), TARGET: np.ones(1)},
            seen={SOURCE: True, TARGET: False},
            momentum=0.9,
            epsilon=0.0,
        )
        out = dsbn_forward_eval(layer, np.array([[9.0]]), SOURCE)
        assert out[0, 0] == 2.0

    def test_eval_before_any_batch_errors(self):
        layer = dsbn_init(2)
        dsbn_forward_train(layer, RngState(0).normals((4, 2)), SOURCE)
        with pytest.raises(StatsNotSeenError, match="target"):
            dsbn_forward_eval(layer, np.ones((1, 2)), TARGET)

    def test_eval_accepts_single_row_and_is_pure(self):
        layer = dsbn_init(3)
        dsbn_forward_train(layer, RngState(1).normals((4, 3)), TARGET)
        x = np.ones((1, 3))
        first = dsbn_forward_eval(layer, x, TARGET)
        second = dsbn_forward_eval(layer, x, TARGET)
        assert np.array_equal(first, second)

    def test_stationary_stream_converges_geometrically(self):
        layer = dsbn_init(1, momentum=0.9)
        x = np.array([[1.0], [3.0]])  # mean 2
        target_mean = 2.0
        err0 = abs(0.0 - target_mean)
        n_done = 0
        for n in (1, 10, 100):
            for _ in range(n - n_done):
                dsbn_forward_train(layer, x, SOURCE)
            n_done = n
            err = abs(layer.running_mean[SOURCE][0] - target_mean)
            assert err <= 0.9**n * err0 + 1e-12


class TestDsbnBackward:
    def test_linear_head_gradients(self):
        rng = RngState(5)
        layer = dsbn_init(3)
        x = rng.normals((6, 3))
        z, cache = dsbn_forward_train(layer, x, SOURCE)
        dx, dgamma, dbeta = dsbn_backward(layer, cache, np.ones((6, 3)))
        xhat = cache[2]
        assert np.abs(dgamma - xhat.sum(axis=0)).max() < 1e-12
        assert np.array_equal(dbeta, np.full(3, 6.0))
        # normalization removes the mean direction
        assert np.abs(dx.sum(axis=0)).max() < 1e-10

    def test_matches_finite_differences_on_random_batches(self):
        rng = RngState(6)
        layer = dsbn_init(4)
        layer.gamma[...] = 1.0 + 0.2 * rng.normals(4)
        x = rng.normals((8, 4))
        weights = rng.normals((8, 4))
        _, cache = dsbn_forward_train(layer, x, TARGET, update_stats=False)
        dx, _, _ = dsbn_backward(layer, cache, weights)

        def loss(m):
            z, _ = dsbn_forward_train(layer, m, TARGET, update_stats=False)
            return _wsum(z, weights)

        fd = finite_diff_grad(loss, x)
        scale = max(np.abs(fd).max(), np.abs(dx).max(), 1e-8)
        assert np.abs(dx - fd).max() / scale < 1e-4

    def test_backward_shape_mismatch(self):
        layer = dsbn_init(2)
        _, cache = dsbn_forward_train(layer, np.ones((3, 2)) + np.eye(3, 2), SOURCE)
        with pytest.raises(ShapeError):
            dsbn_backward(layer, cache, np.ones((3, 3)))


class TestSingleBn:
    def test_mixed_batch_normalized_jointly(self):
        layer = bn_init(2)
        rng = RngState(7)
        mixed = np.vstack([rng.normals((4, 2)), rng.normals((4, 2)) + 3.0])
        z, _ = bn_forward_train(layer, mixed)
        mean_z, var_z = row_stats(z)
        assert np.abs(mean_z).max() <= 1e-10
        _, batch_var = row_stats(mixed)
        assert np.abs(var_z - batch_var / (batch_var + layer.epsilon)).max() < 1e-6

    def test_equals_dsbn_when_batch_statistics_coincide(self):
        rng = RngState(8)
        x = rng.normals((6, 3))
        x_permuted = x[::-1].copy()  # identical batch statistics
        bn = bn_init(3)
        dsbn = dsbn_init(3)
        z_bn, _ = bn_forward_train(bn, x_permuted)
        z_dsbn, _ = dsbn_forward_train(dsbn, x_permuted, TARGET)
        assert np.array_equal(z_bn, z_dsbn)

    def test_eval_identity_statistics(self):
        layer = bn_init(2, epsilon=1e-5)
        layer.seen = True
        x = RngState(9).normals((4, 2))
        assert np.abs(bn_forward_eval(layer, x) - x).max() < 1e-4

    def test_eval_before_training_errors(self):
        with pytest.raises(StatsNotSeenError):
            bn_forward_eval(bn_init(2), np.ones((1, 2)))

    def test_both_tags_update_the_single_statistics(self):
        layer = bn_init(2)
        rng = RngState(10)
        bn_forward_train(layer, rng.normals((4, 2)), tag=SOURCE)
        after_source = layer.running_mean.copy()
        bn_forward_train(layer, rng.normals((4, 2)) + 5.0, tag=TARGET)
        assert not np.array_equal(layer.running_mean, after_source)

    def test_backward_matches_finite_differences(self):
        rng = RngState(11)
        layer = bn_init(3)
        x = rng.normals((5, 3))
        weights = rng.normals((5, 3))
        _, cache = bn_forward_train(layer, x, update_stats=False)
        dx, _, _ = bn_backward(layer, cache, weights)
        fd = finite_diff_grad(
            lambda m: _wsum(bn_forward_train(layer, m, update_stats=False)[0], weights),
            x,
        )
        scale = max(np.abs(fd).max(), np.abs(dx).max(), 1e-8)
        assert np.abs(dx - fd).max() / scale < 1e-4


def test_init_validates_hyperparameters():
    with pytest.raises(ValueError):
        dsbn_init(2, momentum=1.0)
    with pytest.raises(ValueError):
        bn_init(2, epsilon=0.0)
