import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advspace.data import SyntheticSpec, make_synthetic
from advspace.model import (AdvTrainConfig, Dataset, DenseNet, InputDimensionError, TrainConfig, accuracy,
                            adversarially_train, backprop_input, cross_entropy, forward_logits, init_net, jacobian,
                            load_checkpoint, loss_gradient_wrt_input, pgd_accuracy, save_checkpoint, softmax, train)
from advspace.surface import cw_loss, dlr_loss, identity_loss

from conftest import random_net
from oracles import central_difference, forward_loops

finite = st.floats(-50, 50, allow_nan=False)


def linear(w, b):
    return DenseNet(((np.asarray(w, float), np.asarray(b, float)),))


class TestForward:
    def test_identity_layer(self):
        net = linear(np.eye(2), [0, 0])
        np.testing.assert_array_equal(forward_logits(net, [0.3, 0.7]), [0.3, 0.7])

    def test_constant_network(self):
        net = linear(np.zeros((2, 3)), [1, 2])
        np.testing.assert_array_equal(forward_logits(net, [0.9, 0.1, 0.4]), [1, 2])

    def test_matches_loop_oracle(self, rng):
        for _ in range(20):
            net = random_net(rng, hidden=[6, 5])
            x = rng.uniform(size=net.input_dim)
            np.testing.assert_allclose(forward_logits(net, x), forward_loops(net.layers, x), rtol=1e-12, atol=1e-12)

    def test_batch_matches_rows(self, rng):
        net = random_net(rng)
        x = rng.uniform(size=(7, net.input_dim))
        batch = forward_logits(net, x)
        for i in range(7):
            np.testing.assert_allclose(batch[i], forward_logits(net, x[i]), rtol=0, atol=1e-14)

    def test_dimension_mismatch(self, rng):
        net = random_net(rng, d=4)
        with pytest.raises(InputDimensionError):
            forward_logits(net, np.zeros(5))


class TestNetValidation:
    def test_layers_must_chain(self):
        with pytest.raises(ValueError):
            DenseNet(((np.zeros((3, 2)), np.zeros(3)), (np.zeros((2, 4)), np.zeros(2))))

    def test_non_finite_weights(self):
        with pytest.raises(ValueError):
            linear([[np.nan, 0], [0, 1]], [0, 0])

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            linear([[1.0, 2.0]], [0.0])

    def test_weights_read_only(self, rng):
        net = random_net(rng)
        with pytest.raises(ValueError):
            net.layers[0][0][0, 0] = 1.0


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert p[0] == pytest.approx(1.0) and p[1] < 1e-300 + 1e-12
        assert np.all(np.isfinite(p))

    def test_two_logits(self):
        # exp ratios evaluated by hand: 1 / (1 + e) and e / (1 + e)
        np.testing.assert_allclose(softmax([1.0, 2.0]), [0.2689414213699951, 0.7310585786300049], atol=1e-5)

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            softmax([np.inf, 0.0])

    @given(arrays(np.float64, st.integers(2, 8), elements=finite), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, z, shift):
        p = softmax(z)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(softmax(z + shift), p, atol=1e-12)


class TestJacobian:
    def test_linear_is_weight(self, rng):
        w = rng.normal(size=(3, 5))
        net = linear(w, rng.normal(size=3))
        np.testing.assert_array_equal(jacobian(net, rng.uniform(size=5)), w)

    def test_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            net = random_net(rng, hidden=[int(rng.integers(3, 9)), int(rng.integers(3, 9))])
            x = rng.uniform(size=net.input_dim)
            exact = jacobian(net, x)
            approx = central_difference(lambda v: forward_logits(net, v), x)
            scale = np.maximum(np.abs(exact), 1e-3)
            worst = max(worst, float(np.max(np.abs(exact - approx) / scale)))
        assert worst < 1e-4

    def test_kink_uses_zero_slope(self):
        # hidden unit 0 sits exactly at 0 for x = (0.5, 0.5)
        w1 = np.array([[1.0, -1.0], [1.0, 1.0]])
        w2 = np.array([[2.0, 3.0], [-1.0, 1.0]])
        net = DenseNet(((w1, np.zeros(2)), (w2, np.zeros(2))))
        expected = w2[:, 1:] @ w1[1:, :]
        np.testing.assert_array_equal(jacobian(net, [0.5, 0.5]), expected)

    def test_batch_shape(self, rng):
        net = random_net(rng, d=4, c=3)
        assert jacobian(net, rng.uniform(size=(6, 4))).shape == (6, 3, 4)


class TestLossGradient:
    def test_confident_prediction_has_near_zero_gradient(self):
        net = linear([[50.0, 0.0], [-50.0, 0.0]], [0, 0])
        g = loss_gradient_wrt_input(net, cross_entropy, [1.0, 0.5], 0)
        assert np.max(np.abs(g)) < 1e-20

    def test_finite_differences_ce(self, rng):
        for _ in range(30):
            net = random_net(rng)
            x = rng.uniform(size=net.input_dim)
            y = int(rng.integers(net.class_count))
            g = loss_gradient_wrt_input(net, cross_entropy, x, y)
            fd = central_difference(lambda v: cross_entropy(forward_logits(net, v), y)[0], x)
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)

    def test_binary_logistic_closed_form(self, rng):
        w = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        net = linear(w, b)
        x = rng.uniform(size=3)
        z = w @ x + b
        p1 = 1.0 / (1.0 + math.exp(z[0] - z[1]))
        for y in (0, 1):
            expected = (p1 - y) * (w[1] - w[0])
            np.testing.assert_allclose(loss_gradient_wrt_input(net, cross_entropy, x, y), expected, atol=1e-12)

    def test_single_pass_matches_composed_form(self, rng):
        losses = [cross_entropy, dlr_loss, identity_loss,
                  lambda z, y: cw_loss(z, y, np.zeros((np.atleast_2d(z).shape[0], 1)))[:2]]
        for _ in range(20):
            net = random_net(rng, c=int(rng.integers(2, 5)))
            x = rng.uniform(size=(5, net.input_dim))
            y = rng.integers(net.class_count, size=5)
            for loss in losses:
                g_logits = loss(forward_logits(net, x), y)[1]
                composed = np.einsum("nc,ncd->nd", g_logits, jacobian(net, x))
                np.testing.assert_allclose(loss_gradient_wrt_input(net, loss, x, y), composed, atol=1e-10)
                np.testing.assert_allclose(backprop_input(net, x, g_logits), composed, atol=1e-10)


def _blobs(separation, seed=0, samples=200, features=2, classes=2):
    return make_synthetic(SyntheticSpec(samples=samples, features=features, classes=classes,
                                        separation=separation, seed=seed))


class TestTraining:
    def test_separable_blobs(self):
        data = _blobs(6.0)
        net, history = train(init_net([2, 16, 2], 0), data, TrainConfig(epochs=40))
        assert accuracy(net, data.features, data.labels) >= 0.99
        assert len(history) == 40

    def test_zero_epochs_returns_initialisation(self):
        start = init_net([2, 8, 2], 3)
        net, history = train(start, _blobs(4.0), TrainConfig(epochs=0))
        assert net is start and history == []

    def test_bit_deterministic(self):
        data = _blobs(3.0)
        a, _ = train(init_net([2, 8, 2], 1), data, TrainConfig(epochs=5, seed=9))
        b, _ = train(init_net([2, 8, 2], 1), data, TrainConfig(epochs=5, seed=9))
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            assert wa.tobytes() == wb.tobytes() and ba.tobytes() == bb.tobytes()

    def test_plain_gradient_descent(self):
        data = _blobs(6.0)
        net, _ = train(init_net([2, 16, 2], 0), data, TrainConfig(epochs=60, optimizer="gd", learning_rate=0.5))
        assert accuracy(net, data.features, data.labels) >= 0.95

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            AdvTrainConfig(inner_step_size=0)


class TestAdversarialTraining:
    def test_degenerate_attack_equals_plain_training(self):
        data = _blobs(3.0)
        cfg = AdvTrainConfig(epochs=5, inner_attack_iterations=0, rr_epsilon=0.0, seed=4)
        plain, _ = train(init_net([2, 8, 2], 2), data, cfg.base())
        robust, _ = adversarially_train(init_net([2, 8, 2], 2), data, cfg)
        for (wa, _), (wb, _) in zip(plain.layers, robust.layers):
            assert wa.tobytes() == wb.tobytes()

    def test_default_inner_step(self):
        assert AdvTrainConfig().inner_step_size == 0.01

    def test_robust_beats_standard_under_training_attack(self):
        data = make_synthetic(SyntheticSpec())
        eps = 0.1
        std, _ = train(init_net([20, 32, 3], 0), data, TrainConfig(epochs=30))
        rob, _ = adversarially_train(init_net([20, 32, 3], 0), data, AdvTrainConfig(epochs=30, rr_epsilon=eps))
        assert pgd_accuracy(rob, data, eps) >= pgd_accuracy(std, data, eps)
        assert rob.metadata["adversarial"] is True


class TestAccuracy:
    def test_counting(self):
        net = linear(np.eye(2), [0, 0])
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        assert accuracy(net, x, [0, 1, 0, 1]) == 1.0
        assert accuracy(net, x, [1, 0, 1, 0]) == 0.0
        assert accuracy(net, x, [0, 1, 0, 0]) == 0.75

    def test_ties_go_to_lowest_class(self):
        net = linear(np.zeros((3, 2)), [1.0, 1.0, 1.0])
        assert accuracy(net, [[0.5, 0.5]], [0]) == 1.0

    def test_matches_brute_force(self, rng):
        net = random_net(rng, c=4)
        x = rng.uniform(size=(40, net.input_dim))
        y = rng.integers(4, size=40)
        hits = 0
        for xi, yi in zip(x, y):
            z = list(forward_logits(net, xi))
            hits += z.index(max(z)) == yi
        assert accuracy(net, x, y) == hits / 40


class TestDataset:
    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[1.5, 0.0]]), np.array([0]), 2)
        with pytest.raises(ValueError):
            Dataset(np.array([[0.5, 0.0]]), np.array([2]), 2)


def test_checkpoint_round_trip(tmp_path, rng):
    net = random_net(rng, hidden=[5, 4])
    path = tmp_path / "net.json"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    x = rng.uniform(size=(3, net.input_dim))
    assert forward_logits(back, x).tobytes() == forward_logits(net, x).tobytes()
    assert back.dims == net.dims and back.seed == net.seed


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
