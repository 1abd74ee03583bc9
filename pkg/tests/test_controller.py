import math

import numpy as np
import pytest
from sklearn.base import clone

from mftcnn.controller import (Activation, MlpParams, NeuralController, TrainConfig, backward,
                               dumps, flatten_grads, forward, forward_batch, load, loads, save,
                               supervised_loss, table1_nn1, table1_nn2, train)
from mftcnn.exceptions import ContractViolation


def ones_net(act):
    p = MlpParams.initialize([2, 1], [act])
    return p.with_flat(np.array([1.0, 0.0, 0.0]))


def test_forward_examples():
    assert forward(ones_net("tanh"), [1.0, 5.0])[0] == pytest.approx(math.tanh(1.0))
    assert forward(ones_net("lin"), [-3.0, 5.0])[0] == -3.0
    with pytest.raises(ContractViolation):
        forward(ones_net("lin"), [1.0, 2.0, 3.0])


def test_table1_sizes():
    assert table1_nn1().n_neurons == 6
    assert table1_nn2().n_neurons == 106
    assert table1_nn1().dims == [3, 2, 2, 2]
    assert table1_nn2().n_params <= 3000


@pytest.mark.parametrize("make", [table1_nn1, table1_nn2,
                                  lambda s: MlpParams.initialize([3, 8, 2], ["tanh", "lin"], s)])
def test_backward_matches_central_differences(make):
    params = make(3)
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(7, 3))
    U = rng.normal(size=(7, 2))
    out, cache = forward_batch(params, Z, keep=True)
    grads, dz = backward(params, cache, U)
    g = flatten_grads(grads)
    theta = params.flat()
    obj = lambda th: float(np.sum(forward_batch(params.with_flat(th), Z) * U))
    fd = np.empty_like(theta)
    for i in range(theta.size):
        h = 1e-6 * (1 + abs(theta[i]))
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (obj(theta + e) - obj(theta - e)) / (2 * h)
    if params.n_params <= 200:
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-6
    else:
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5
    fz = np.empty_like(Z)
    for idx in np.ndindex(Z.shape):
        e = np.zeros_like(Z)
        e[idx] = 1e-6
        fz[idx] = (np.sum(forward_batch(params, Z + e) * U) - np.sum(forward_batch(params, Z - e) * U)) / 2e-6
    assert np.allclose(dz, fz, rtol=1e-6, atol=1e-8)


def test_supervised_loss_example():
    p = ones_net("lin")
    Z = np.array([[0.0, 0.0], [1.0, 0.0]])
    Y = np.array([[5.0], [6.0]])
    assert supervised_loss(p, Z, Y) == 25.0
    assert supervised_loss(p, Z, Y, squared=False) == 5.0


def test_training_memorizes_small_dataset():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(64, 3))
    Y = np.stack([Z @ [0.5, -1.0, 0.2], -0.3 * Z[:, 1]], axis=1)
    res = train(table1_nn1(1), Z, Y, TrainConfig(epochs=400, batch_size=16, learning_rate=2e-2))
    assert res.history[-1] <= res.initial_loss
    assert supervised_loss(res.params, Z, Y) < 1e-2 * res.initial_loss


def test_train_rejects_bad_shapes():
    with pytest.raises(ContractViolation):
        train(table1_nn1(), np.zeros((10, 2)), np.zeros((10, 2)))
    with pytest.raises(ContractViolation):
        train(table1_nn1(), np.zeros((10, 3)), np.zeros((10, 2)), TrainConfig(batch_size=11))


def test_text_round_trip(tmp_path):
    p = table1_nn2(5, input_shift=np.array([1.0, 2.0, 0.0]), input_scale=np.array([3.0, 3.0, 0.5]))
    q = loads(dumps(p))
    assert np.array_equal(p.flat(), q.flat())
    assert q.activations == p.activations
    save(p, tmp_path / "c.txt")
    r = load(tmp_path / "c.txt")
    Z = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(forward_batch(p, Z), forward_batch(r, Z))
    assert dumps(r) == dumps(p)


def test_activation_enum_values():
    assert Activation("tanh").value == "tanh"
    assert np.array_equal(Activation.LINEAR.apply(np.array([-1.0, 2.0])), [-1.0, 2.0])


def test_sklearn_estimator():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 3))
    y = X @ np.array([[1.0, 0.0], [0.0, -1.0], [0.5, 0.5]])
    est = NeuralController(hidden=(4,), activations=("tanh", "lin"), epochs=50, batch_size=20)
    est.fit(X, y)
    assert est.predict(X).shape == (100, 2)
    assert est.score(X, y) > 0.5
    c = clone(est)
    assert c.get_params()["hidden"] == (4,) and not hasattr(c, "params_")
    est1 = NeuralController(hidden=(3,), activations=("tanh", "lin"), epochs=5, batch_size=10)
    assert est1.fit(X, y[:, 0]).predict(X).shape == (100,)
