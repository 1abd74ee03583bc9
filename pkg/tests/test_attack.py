import json

import numpy as np
import pytest

from conftest import linear_controller, zero_controller
from mftcnn.attack import (AttackConfig, StopReason, attack_objective, input_gradient, pgd_attack,
                           project_ball, restart_noise, verify_adversarial)
from mftcnn.controller import MlpParams, table1_nn1
from mftcnn.dynamics import NoiseTensor
from mftcnn.exceptions import ContractViolation
from mftcnn.lq import LqParams, lq_problem
from mftcnn.optimizer import GradientMethod
from mftcnn.stability import Ball


def saturating_controller(s=20.0, gain=0.9):
    """u = -gain s tanh(x / s), E[u] = -gain s tanh(E[x] / s): stabilizing near the
    origin, too weak far from it."""
    theta = np.concatenate([
        [1, 0, 0, 0, 1, 0], [0, 0],
        [1 / s, 0, 0, 1 / s], [0, 0],
        [-gain * s, 0, 0, -gain * s], [0, 0]])
    return table1_nn1().with_flat(np.asarray(theta, float))


def test_projection_examples():
    b = Ball(np.zeros(2), 5.0)
    assert np.allclose(project_ball(np.array([3.0, 4.0]), b), [3.0, 4.0])
    assert np.allclose(project_ball(np.array([6.0, 8.0]), b), [3.0, 4.0])
    assert np.allclose(project_ball(np.array([1.0]), Ball(np.array([3.0]), 1.0)), [2.0])
    with pytest.raises(ContractViolation):
        project_ball(np.array([1.0]), Ball(0.0, 0.0))


def test_projection_idempotent_and_feasible():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = Ball(rng.normal(size=3), float(rng.uniform(0.1, 300)))
        x = rng.normal(scale=500, size=3)
        y = project_ball(x, b)
        assert b.contains(y)
        assert np.array_equal(project_ball(y, b), y)


def test_objective_example():
    p = LqParams(steps=2, sigma=0.0)
    spec, grid = lq_problem(p), p.grid
    # x = 1, 3, 9 with zero control: 20 + 180 + 20 * 81
    j = attack_objective(spec, grid, zero_controller(), np.array([[1.0]]), NoiseTensor.zeros(1, grid, 1))
    assert j == pytest.approx(1820.0)


def test_objective_even_for_odd_controller():
    p = LqParams(sigma=0.0)
    spec, grid = lq_problem(p), p.grid
    b = NoiseTensor.zeros(1, grid, 1)
    params = saturating_controller()
    for y in (0.5, 7.0, 30.0):
        assert attack_objective(spec, grid, params, [[y]], b) == pytest.approx(
            attack_objective(spec, grid, params, [[-y]], b), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_input_gradient_matches_central_differences(seed):
    p = LqParams(steps=5)
    spec, grid = lq_problem(p), p.grid
    params = table1_nn1(seed)
    noise = NoiseTensor.sample(seed, 4, grid, 1)
    y = np.array([0.7 - seed])
    ga = input_gradient(spec, grid, params, y, noise, method=GradientMethod.ADJOINT)
    fd = input_gradient(spec, grid, params, y, noise, method=GradientMethod.FINITE_DIFF)
    assert abs(ga[0] - fd[0]) / abs(fd[0]) < 1e-5


def test_gradient_linear_for_linear_controller():
    p = LqParams(sigma=0.0)
    spec, grid = lq_problem(p), p.grid
    b = NoiseTensor.zeros(2, grid, 1)
    params = linear_controller(1.5, 0.9)
    g1 = input_gradient(spec, grid, params, np.array([1.5]), b)
    g2 = input_gradient(spec, grid, params, np.array([3.0]), b)
    assert g2[0] == pytest.approx(2 * g1[0], rel=1e-12)
    assert input_gradient(spec, grid, params, np.array([0.0]), b)[0] == 0.0


def test_zero_step_stalls_in_place(lq):
    _, spec, grid = lq
    res = pgd_attack(spec, grid, saturating_controller(), AttackConfig(beta=0.0, restarts=1),
                     start=[3.0])
    assert res.stop_reason is StopReason.STALLED and not res.found
    assert np.array_equal(res.path[0], res.path[-1])


def test_stable_linear_controller_not_found(lq):
    _, spec, grid = lq
    res = pgd_attack(spec, grid, linear_controller(1.5, 0.9),
                     AttackConfig(restarts=2, max_pgd_iters=30))
    assert not res.found and res.adversarial is None
    assert all(np.linalg.norm(y) <= 250.0 for y in res.path)
    assert not verify_adversarial(spec, grid, linear_controller(1.5, 0.9), res)


def test_saturating_controller_attacked_and_verified(lq):
    _, spec, grid = lq
    params = saturating_controller()
    cfg = AttackConfig(restarts=5, seed=3)
    res = pgd_attack(spec, grid, params, cfg)
    assert res.found and res.stop_reason is StopReason.DIVERGED
    assert np.linalg.norm(res.adversarial) <= cfg.alpha
    assert all(Ball(0.0, cfg.alpha).contains(y) for y in res.path)
    assert verify_adversarial(spec, grid, params, res)
    again = pgd_attack(spec, grid, params, cfg)
    assert np.array_equal(again.adversarial, res.adversarial)
    d = json.loads(res.to_json())
    assert d["found"] and d["noise_seed"] == restart_noise(spec, grid, cfg, res.restart).seed
    assert res.path_csv().count("\n") == len(res.path) + 1


def test_config_validation():
    with pytest.raises(ContractViolation):
        AttackConfig(alpha=0.0)
    with pytest.raises(ContractViolation):
        AttackConfig(beta=-1.0)
    with pytest.raises(ValueError):
        AttackConfig(goal="nonsense")
