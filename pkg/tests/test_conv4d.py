import numpy as np
import pytest

from aeroloc.conv4d import (
    Conv4dModel,
    conv4d,
    neighborhood_consensus,
    transpose4d,
)
from aeroloc.errors import ContractViolationError, DimensionMismatchError
from oracles import conv4d_bruteforce


def identity_kernel(c_out=1, c_in=1):
    w = np.zeros((c_out, c_in, 3, 3, 3, 3))
    w[0, 0, 1, 1, 1, 1] = 1.0
    return w


class TestConv4d:
    def test_identity_kernel_preserves_input(self, rng):
        x = rng.normal(size=(1, 3, 4, 3, 2))
        y = conv4d(x, identity_kernel(), np.zeros(1))
        assert np.allclose(y, x)

    def test_all_ones_kernel_on_interior_one_hot(self):
        x = np.zeros((1, 5, 5, 5, 5))
        x[0, 2, 2, 2, 2] = 1.0
        y = conv4d(x, np.ones((1, 1, 3, 3, 3, 3)), np.zeros(1))
        inside = y[0, 1:4, 1:4, 1:4, 1:4]
        assert np.all(inside == 1.0)
        assert y.sum() == 81.0

    def test_linearity(self, rng):
        a = rng.normal(size=(2, 4, 4, 4, 4))
        b = rng.normal(size=(2, 4, 4, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3, 3, 3))
        bias = np.zeros(3)
        alpha, beta = 0.7, -1.3
        lhs = conv4d(alpha * a + beta * b, w, bias)
        rhs = alpha * conv4d(a, w, bias) + beta * conv4d(b, w, bias)
        assert np.allclose(lhs, rhs, atol=1e-6)

    def test_matches_bruteforce(self, rng):
        x = rng.normal(size=(2, 3, 2, 3, 2))
        w = rng.normal(size=(2, 2, 3, 3, 3, 3))
        b = rng.normal(size=2)
        assert np.allclose(conv4d(x, w, b), conv4d_bruteforce(x, w, b), atol=1e-10)

    def test_translation_equivariance_interior(self, rng):
        x = rng.normal(size=(1, 6, 4, 6, 4))
        w = rng.normal(size=(1, 1, 3, 3, 3, 3))
        b = np.zeros(1)
        shifted = np.zeros_like(x)
        shifted[:, 1:, :, 1:, :] = x[:, :-1, :, :-1, :]
        y = conv4d(x, w, b)
        ys = conv4d(shifted, w, b)
        # interior (away from both borders along the shifted axes)
        assert np.allclose(ys[:, 2:-1, :, 2:-1, :], y[:, 1:-2, :, 1:-2, :], atol=1e-12)

    def test_channel_mismatch_raises(self, rng):
        x = rng.normal(size=(2, 2, 2, 2, 2))
        w = rng.normal(size=(1, 3, 3, 3, 3, 3))
        with pytest.raises(DimensionMismatchError):
            conv4d(x, w, np.zeros(1))

    def test_bias_applied(self):
        x = np.zeros((1, 2, 2, 2, 2))
        y = conv4d(x, identity_kernel(), np.array([0.25]))
        assert np.all(y == 0.25)


class TestConv4dModel:
    def test_channel_chain_enforced(self, rng):
        from aeroloc.conv4d import Conv4dLayer

        bad = [
            Conv4dLayer(rng.normal(size=(8, 1, 3, 3, 3, 3)), np.zeros(8)),
            Conv4dLayer(rng.normal(size=(8, 8, 3, 3, 3, 3)), np.zeros(8)),
            Conv4dLayer(rng.normal(size=(1, 8, 3, 3, 3, 3)), np.zeros(1)),
        ]
        with pytest.raises(DimensionMismatchError):
            Conv4dModel(bad)

    def test_non_finite_rejected(self):
        model = Conv4dModel.identity()
        model.layers[0].weights[0, 0, 0, 0, 0, 0] = np.nan
        with pytest.raises(ContractViolationError):
            Conv4dModel(model.layers)

    def test_random_init_bounds(self):
        model = Conv4dModel.random(0)
        for layer in model.layers:
            fan_in = layer.weights.shape[1] * 81
            assert np.abs(layer.weights).max() <= 1.0 / np.sqrt(fan_in)
            assert np.all(layer.bias == 0.0)

    def test_save_load_round_trip(self, tmp_path):
        model = Conv4dModel.random(5)
        model.save(tmp_path / "weights")
        loaded = Conv4dModel.load(tmp_path / "weights")
        for a, b in zip(model.layers, loaded.layers):
            assert np.allclose(a.weights, b.weights, atol=1e-7)
            assert np.allclose(a.bias, b.bias, atol=1e-7)


class TestNeighborhoodConsensus:
    def test_zero_input_zero_biases(self):
        model = Conv4dModel.random(1)
        out = neighborhood_consensus(np.zeros((3, 3, 3, 3)), model)
        assert np.array_equal(out, np.zeros((3, 3, 3, 3)))

    def test_identity_model_doubles_input(self, rng):
        t = rng.uniform(0, 1, size=(3, 4, 3, 4))
        out = neighborhood_consensus(t, Conv4dModel.identity())
        assert np.allclose(out, 2.0 * t)

    def test_source_exchange_symmetry(self, rng):
        model = Conv4dModel.random(2)
        t = rng.uniform(0, 1, size=(4, 3, 2, 5))
        direct = neighborhood_consensus(t, model)
        swapped = neighborhood_consensus(transpose4d(t), model)
        assert np.allclose(transpose4d(swapped), direct, atol=1e-6)

    def test_output_nonnegative(self, rng):
        model = Conv4dModel.random(3)
        t = rng.uniform(0, 1, size=(3, 3, 3, 3))
        assert neighborhood_consensus(t, model).min() >= 0.0

    def test_negative_input_rejected(self):
        with pytest.raises(ContractViolationError):
            neighborhood_consensus(np.full((2, 2, 2, 2), -1.0), Conv4dModel.identity())
