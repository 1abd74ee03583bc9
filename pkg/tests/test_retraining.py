import json

import numpy as np
import pytest

from conftest import linear_controller
from test_attack import saturating_controller
from mftcnn.attack import AttackConfig
from mftcnn.controller import TrainConfig, supervised_loss, table1_nn1
from mftcnn.dynamics import NoiseTensor
from mftcnn.exceptions import ContractViolation
from mftcnn.lq import grouped_optimal_cost, riccati_solve
from mftcnn.retraining import (AugmentedDataset, Provenance, harvest_adversarials,
                               proximity_grouping, retrain, retraining_manifest,
                               solve_from_adversarials)


def test_harvest_zero_count(lq):
    _, spec, grid = lq
    h = harvest_adversarials(spec, grid, table1_nn1(), AttackConfig(), 0)
    assert h.states.shape == (0, 1) and not h.shortfall and h.attempts == 0


def test_harvest_shortfall_for_stable_controller(lq, caplog):
    _, spec, grid = lq
    cfg = AttackConfig(restarts=1, max_pgd_iters=10)
    h = harvest_adversarials(spec, grid, linear_controller(1.5, 0.9), cfg, 3, max_attacks=4)
    assert h.shortfall and len(h.states) == 0 and h.attempts == 4
    assert "harvested 0 of 3" in caplog.text


def test_harvest_distinct_and_verified(lq):
    _, spec, grid = lq
    cfg = AttackConfig(restarts=1)
    h = harvest_adversarials(spec, grid, saturating_controller(), cfg, 5, min_separation=1.0)
    assert len(h.states) == 5 and not h.shortfall
    dist = np.abs(h.states[:, None, 0] - h.states[None, :, 0])
    assert np.all(dist[~np.eye(5, dtype=bool)] >= 1.0)
    assert np.all(np.abs(h.states) <= cfg.alpha)
    assert json.loads(json.dumps(h.manifest()))["count"] == 5


def test_proximity_grouping():
    x = np.array([[5.0], [-1.0], [3.0], [10.0], [0.0], [7.0], [2.0]])
    order, g = proximity_grouping(x, 3)
    assert np.array_equal(x[order, 0], np.sort(x[:, 0]))
    assert list(g.labels) == [0, 0, 0, 1, 1, 1, 1]
    with pytest.raises(ContractViolation):
        proximity_grouping(x, 0)


def test_solve_from_adversarials_matches_oracle(lq):
    p, spec, grid = lq
    x = np.random.default_rng(0).uniform(60, 250, size=(40, 1))
    x = x * np.sign(np.random.default_rng(1).normal(size=(40, 1)))
    order, g = proximity_grouping(x, 10)
    batch = solve_from_adversarials(spec, grid, x[order], NoiseTensor.sample(5, 40, grid, 1), grouping=g)
    oracle = grouped_optimal_cost(riccati_solve(p), x[order], g)
    assert abs(batch.achieved_cost / oracle - 1) < 0.01
    with pytest.raises(ContractViolation):
        solve_from_adversarials(spec, grid, np.zeros((0, 1)), NoiseTensor.zeros(0, grid, 1))
    with pytest.raises(ContractViolation):
        solve_from_adversarials(spec, grid, np.array([[np.nan]]), NoiseTensor.zeros(1, grid, 1))


def _records(seed, n):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, 3))
    return Z, np.stack([-0.5 * Z[:, 0], -0.5 * Z[:, 1]], axis=1)


def test_augmented_dataset_and_weights():
    zb, yb = _records(0, 30)
    za, ya = _records(1, 10)
    ds = AugmentedDataset.from_records((zb, yb, Provenance.BASE), (za, ya, Provenance.ADVERSARIAL))
    assert len(ds) == 40 and ds.n_adversarial == 10
    w = ds.weights(3.0)
    assert np.all(w[:30] == 1.0) and np.all(w[30:] == 3.0)
    params = table1_nn1()
    assert ds.loss(params, 1.0) == pytest.approx(supervised_loss(params, ds.Z, ds.Y))
    with pytest.raises(ContractViolation):
        AugmentedDataset.from_records((zb, yb, Provenance.BASE), (za[:, :2], ya, Provenance.ADVERSARIAL))


def test_base_only_retrain_equals_plain_training():
    from mftcnn.controller import train
    zb, yb = _records(0, 64)
    ds = AugmentedDataset.from_records((zb, yb, Provenance.BASE))
    cfg = TrainConfig(epochs=20, batch_size=16)
    a = retrain(table1_nn1(2), ds, cfg)
    b = train(table1_nn1(2), zb, yb, cfg)
    assert np.array_equal(a.params.flat(), b.params.flat())


def test_retrain_descends_combined_loss():
    zb, yb = _records(0, 64)
    za, ya = _records(1, 32)
    ds = AugmentedDataset.from_records((zb, yb, Provenance.BASE), (za, ya, Provenance.ADVERSARIAL))
    start = table1_nn1(4)
    res = retrain(start, ds, TrainConfig(epochs=50, batch_size=16), adversarial_weight=2.0)
    assert ds.loss(res.params, 2.0) < ds.loss(start, 2.0)
    cold = retrain(start, ds, TrainConfig(epochs=1, batch_size=16), warm_start=False, cold_seed=9)
    assert cold.initial_loss == pytest.approx(ds.loss(table1_nn1(9), 1.0))
    with pytest.raises(ContractViolation):
        retrain(start, AugmentedDataset(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0, int)))


def test_manifest_json(lq):
    _, spec, grid = lq
    h = harvest_adversarials(spec, grid, table1_nn1(), AttackConfig(), 0)
    m = json.loads(retraining_manifest(h, AttackConfig(), None, TrainConfig(), 1.0))
    assert m["harvest"]["count"] == 0 and m["attack_config"]["alpha"] == 250.0
