import math

import numpy as np
import pytest

from fedmr.data import Samples, make_blobs
from fedmr.errors import (
    EmptyEvaluationError,
    EmptyShardError,
    MissingReferenceError,
    NumericInputError,
    ShapeMismatchError,
)
from fedmr.model import ArchitectureSpec, LayeredModel, init_model
from fedmr.train import (
    LocalTrainConfig,
    backward,
    batch_schedule,
    client_update,
    evaluate,
    forward,
    local_iterations,
)
from fedmr.verify import gradient_rel_error, random_net_and_batch

W1 = [[0.5, -0.25, 0.1, 0.0], [-0.3, 0.8, 0.2, -0.6]]
B1 = [0.1, 0.0, -0.2, 0.05]
W2 = [[0.7, -0.1, 0.2], [0.3, 0.4, -0.5], [-0.6, 0.1, 0.9], [0.2, -0.3, 0.0]]
B2 = [0.0, 0.1, -0.1]
TOY_X = [[1.0, 2.0], [-1.5, 0.5], [0.25, -0.75]]
TOY_Y = [0, 2, 1]
# mean cross-entropy of the fixed 2-4-3 net on TOY_X, from a scalar forward pass
TOY_LOSS = 1.3805510217890544


def toy_net():
    return LayeredModel.from_arrays([np.array(W1), np.array(B1), np.array(W2), np.array(B2)])


def scalar_forward_loss(X, y):
    total = 0.0
    for x, t in zip(X, y):
        h = [max(0.0, sum(x[i] * W1[i][j] for i in range(2)) + B1[j]) for j in range(4)]
        z = [sum(h[j] * W2[j][k] for j in range(4)) + B2[k] for k in range(3)]
        m = max(z)
        total += m + math.log(sum(math.exp(v - m) for v in z)) - z[t]
    return total / len(y)


def stationary_toy():
    # zero weights; the two samples pull the logits in opposite directions
    arch = ArchitectureSpec.from_sizes([1, 2])
    model = LayeredModel.from_arrays([np.zeros(s) for s in arch.block_shapes()])
    return model, Samples(np.array([[1.0], [1.0]]), np.array([0, 1]), 2)


def test_zero_weights_loss_is_log_c():
    arch = ArchitectureSpec.from_sizes([4, 6, 5])
    m = LayeredModel.from_arrays([np.zeros(s) for s in arch.block_shapes()])
    rng = np.random.default_rng(0)
    batch = Samples(rng.standard_normal((9, 4)), rng.integers(0, 5, 9), 5)
    assert forward(m, batch).loss == math.log(5)


def test_duplicated_batch_same_loss_and_grad(tiny_arch, rng):
    m = init_model(tiny_arch, 3)
    one = Samples(rng.standard_normal((1, 2)), np.array([2]), 3)
    two = Samples(np.repeat(one.X, 2, axis=0), np.repeat(one.y, 2), 3)
    assert forward(m, one).loss == pytest.approx(forward(m, two).loss, abs=1e-15)
    np.testing.assert_allclose(backward(m, one).flatten(), backward(m, two).flatten(), atol=1e-15)


def test_fixed_net_matches_scalar_oracle():
    batch = Samples(np.array(TOY_X), np.array(TOY_Y), 3)
    assert abs(scalar_forward_loss(TOY_X, TOY_Y) - TOY_LOSS) <= 1e-15
    assert abs(forward(toy_net(), batch).loss - TOY_LOSS) <= 1e-12


def test_gradient_zero_at_stationary_point():
    model, batch = stationary_toy()
    assert np.max(np.abs(backward(model, batch).flatten())) <= 1e-12


def test_gradcheck_fixed_net():
    batch = Samples(np.array(TOY_X), np.array(TOY_Y), 3)
    # sample 0 sits exactly on the ReLU kink of hidden unit 0; move off it
    w = toy_net().flatten()
    w[8] += 0.05
    assert gradient_rel_error(toy_net().unflatten(w), batch) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_random_nets(seed):
    assert gradient_rel_error(*random_net_and_batch(np.random.default_rng(seed))) <= 1e-5


def test_input_validation(tiny_arch):
    m = init_model(tiny_arch, 0)
    with pytest.raises(NumericInputError):
        forward(m, Samples(np.array([[np.nan, 0.0]]), np.array([0]), 3))
    with pytest.raises(ShapeMismatchError):
        forward(m, Samples(np.zeros((2, 5)), np.array([0, 1]), 3))


def test_lr_zero_returns_input(tiny_arch, toy_batch):
    m = init_model(tiny_arch, 0)
    out = client_update(m, toy_batch, LocalTrainConfig(epochs=2, batch_size=2, lr=0.0))
    assert out.bitwise_equal(m)


def test_single_step_closed_form(tiny_arch, rng):
    m = init_model(tiny_arch, 1)
    sample = Samples(rng.standard_normal((1, 2)), np.array([1]), 3)
    cfg = LocalTrainConfig(epochs=1, batch_size=1, lr=0.1, momentum=0.0)
    out = client_update(m, sample, cfg).flatten()
    expected = m.flatten() - 0.1 * backward(m, sample).flatten()
    assert np.max(np.abs(out - expected)) <= 1e-12


def test_two_steps_with_momentum_closed_form(tiny_arch, rng):
    m = init_model(tiny_arch, 1)
    sample = Samples(rng.standard_normal((1, 2)), np.array([1]), 3)
    cfg = LocalTrainConfig(epochs=2, batch_size=1, lr=0.1, momentum=0.9)
    g1 = backward(m, sample).flatten()
    w1 = m.flatten() - 0.1 * g1
    g2 = backward(m.unflatten(w1), sample).flatten()
    w2 = w1 - 0.1 * (0.9 * g1 + g2)
    np.testing.assert_allclose(client_update(m, sample, cfg).flatten(), w2, rtol=0, atol=1e-12)


def test_prox_fixed_point():
    model, shard = stationary_toy()
    cfg = LocalTrainConfig(epochs=3, batch_size=2, lr=0.5, momentum=0.9, prox_mu=0.1)
    out = client_update(model, shard, cfg, global_ref=model)
    assert np.max(np.abs(out.flatten() - model.flatten())) <= 1e-12


def test_prox_pulls_toward_reference(tiny_arch, toy_batch):
    start = init_model(tiny_arch, 0)
    ref = init_model(tiny_arch, 9)
    free = client_update(start, toy_batch, LocalTrainConfig(epochs=5, batch_size=3, lr=0.1))
    pulled = client_update(start, toy_batch, LocalTrainConfig(epochs=5, batch_size=3, lr=0.1, prox_mu=5.0), ref)
    d = lambda m: np.linalg.norm(m.flatten() - ref.flatten())  # noqa: E731
    assert d(pulled) < d(free)


def test_client_update_errors(tiny_arch, toy_batch):
    m = init_model(tiny_arch, 0)
    with pytest.raises(MissingReferenceError):
        client_update(m, toy_batch, LocalTrainConfig(prox_mu=0.1))
    with pytest.raises(EmptyShardError):
        client_update(m, Samples(np.zeros((0, 2)), np.zeros(0, dtype=int), 3), LocalTrainConfig())


def test_training_lowers_loss():
    ds = make_blobs(4, 8, 60, 0.5, seed=2)
    m = init_model(ArchitectureSpec.from_sizes([8, 16, 4]), 0)
    before = forward(m, ds.train).loss
    after = forward(client_update(m, ds.train, LocalTrainConfig(epochs=5, batch_size=20, lr=0.05)), ds.train).loss
    assert after < 0.5 * before


def test_batch_schedule_covers_each_epoch():
    cfg = LocalTrainConfig(epochs=3, batch_size=4, seed=11)
    sched = batch_schedule(10, cfg)
    assert sched.shape == (local_iterations(10, cfg), 4) == (9, 4)
    for e in range(3):
        idx = sched[3 * e:3 * e + 3].ravel()
        assert sorted(idx[idx >= 0].tolist()) == list(range(10))
    assert np.array_equal(sched, batch_schedule(10, cfg))


def test_evaluate_separable_blobs():
    ds = make_blobs(5, 8, 50, 0.01, seed=0)
    # a linear layer scoring each class by its center direction separates unit-norm centers
    m = LayeredModel.from_arrays([10.0 * ds.centers.T, np.zeros(5)])
    assert evaluate(m, ds.test).accuracy == 1.0


def test_evaluate_ties_go_to_class_zero():
    ds = make_blobs(4, 6, 30, 1.0, seed=1)
    arch = ArchitectureSpec.from_sizes([6, 5, 4])
    m = LayeredModel.from_arrays([np.zeros(s) for s in arch.block_shapes()])
    assert evaluate(m, ds.test).accuracy == float(np.mean(ds.test.y == 0))


def test_evaluate_single_and_empty(tiny_arch):
    m = toy_net()
    x = np.array([TOY_X[0]])
    label = int(np.argmax(forward(m, Samples(x, np.array([0]), 3)).logits))
    assert evaluate(m, Samples(x, np.array([label]), 3)).accuracy == 1.0
    with pytest.raises(EmptyEvaluationError):
        evaluate(m, Samples(np.zeros((0, 2)), np.zeros(0, dtype=int), 3))
