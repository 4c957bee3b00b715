import numpy as np
import pytest

from aeroloc.conv4d import Conv4dModel
from aeroloc.features import DenseFeatureMap
from aeroloc.training import TrainingPair, loss_gradients
from oracles import gradcheck_pair


def make_case(seed: int) -> tuple[TrainingPair, Conv4dModel]:
    rng = np.random.default_rng(seed)
    fu = DenseFeatureMap(rng.uniform(0, 1, (4, 4, 5)), 1, 4, 4)
    fs = DenseFeatureMap(rng.uniform(0, 1, (4, 4, 5)), 1, 4, 4)
    pair = TrainingPair(fu, fs, 1 if seed % 2 == 0 else -1)
    model = Conv4dModel.random(seed + 100)
    for layer in model.layers:
        layer.bias = rng.uniform(0.005, 0.06, layer.bias.shape)
    return pair, model


@pytest.mark.parametrize("seed", [0, 7, 13])
def test_gradients_match_finite_differences(seed):
    pair, model = make_case(seed)
    result = loss_gradients(pair, model)
    assert len(result.matches) > 0
    worst = gradcheck_pair(pair, model, result, n_weight_samples=8, seed=seed)
    assert worst < 1e-4


def test_zero_input_gives_zero_weight_gradients():
    zero = DenseFeatureMap(np.zeros((4, 4, 3)), 1, 4, 4)
    model = Conv4dModel.random(1)
    result = loss_gradients(TrainingPair(zero, zero, 1), model)
    for dw, _db in result.grads:
        assert np.array_equal(dw, np.zeros_like(dw))


def test_dead_channel_weights_have_zero_gradient():
    # kill channel 5 of layer 1: its activation is identically zero, so every
    # layer-2 weight reading it sees a zero window and must get zero gradient
    pair, model = make_case(3)
    model.layers[0].weights[5] = 0.0
    model.layers[0].bias[5] = 0.0
    result = loss_gradients(pair, model)
    assert len(result.matches) > 0
    d_w2 = result.grads[1][0]
    assert np.array_equal(d_w2[:, 5], np.zeros_like(d_w2[:, 5]))
    assert np.abs(result.grads[1][0]).max() > 0


def test_assignment_never_empty_at_zero_threshold():
    # both argmax maps come from one tensor, so its global maximum is always
    # a mutual pair; emptiness can only come from the score threshold
    rng = np.random.default_rng(4)
    for _ in range(20):
        pair, model = make_case(int(rng.integers(0, 1000)))
        result = loss_gradients(pair, model)
        assert len(result.matches) > 0
        assert not result.empty_assignment


def test_gradient_descent_direction_reduces_fixed_loss():
    from oracles import loss_at_fixed_matches

    pair, model = make_case(11)
    result = loss_gradients(pair, model)
    before = loss_at_fixed_matches(pair, model, result.matches)
    stepped = model.step(result.grads, 1e-2)
    after = loss_at_fixed_matches(pair, stepped, result.matches)
    assert after < before
