import numpy as np
import pytest

from conftest import linear_controller, zero_controller
from mftcnn.closed_loop import (MeanMode, closed_loop_adjoint, closed_loop_cost, simulate_closed_loop,
                                trajectory_costs)
from mftcnn.controller import table1_nn1
from mftcnn.dynamics import Grouping, NoiseTensor
from mftcnn.exceptions import ContractViolation
from mftcnn.lq import LqParams, lq_problem
from mftcnn.stability import Outcome, classify


def test_open_loop_mean_is_powers_of_three():
    p = LqParams()
    spec, grid = lq_problem(p), p.grid
    noise = NoiseTensor.sample(0, 4, grid, 1).increments
    ones = np.ones((4, 1))
    tr = simulate_closed_loop(spec, grid, zero_controller(), ones, ones, noise, MeanMode.DETERMINISTIC)
    k = np.arange(grid.steps + 1)
    assert np.array_equal(tr.means[0, :, 0], 3.0 ** k)


def test_open_loop_escapes_at_step_five():
    p = LqParams(sigma=0.0)
    spec, grid = lq_problem(p), p.grid
    one = np.ones((1, 1))
    tr = simulate_closed_loop(spec, grid, zero_controller(), one, one, np.zeros((1, grid.steps, 1)))
    assert np.array_equal(tr.states[0, :6, 0], 3.0 ** np.arange(6))
    inside = np.abs(tr.states[0, 1:, 0]) <= 200
    assert np.argmin(inside) + 1 == 5
    assert classify(tr, 200.0)[0] == Outcome.ESCAPED


def test_equilibrium_at_origin(lq):
    _, spec, grid = lq
    z = np.zeros((3, 1))
    tr = simulate_closed_loop(spec, grid, linear_controller(), z, z, np.zeros((3, grid.steps, 1)))
    assert np.all(tr.states == 0.0)
    assert closed_loop_cost(spec, grid, tr) == 0.0


def test_divergence_saturates_cost(lq):
    _, spec, grid = lq
    x = np.full((2, 1), 1e3)
    tr = simulate_closed_loop(spec, grid, zero_controller(), x, x, np.zeros((2, grid.steps, 1)))
    assert tr.diverged.all()
    assert closed_loop_cost(spec, grid, tr) == pytest.approx(1e30)
    assert np.all(np.isinf(trajectory_costs(spec, grid, tr, saturate=False)))


def test_controller_shape_check(lq):
    _, spec, grid = lq
    from mftcnn.controller import MlpParams
    bad = MlpParams.initialize([2, 2], ["lin"])
    with pytest.raises(ContractViolation):
        simulate_closed_loop(spec, grid, bad, np.zeros((1, 1)), np.zeros((1, 1)),
                             np.zeros((1, grid.steps, 1)))


def test_ensemble_matches_deterministic_without_noise():
    p = LqParams(sigma=0.0)
    spec, grid = lq_problem(p), p.grid
    x = np.full((5, 1), 7.0)
    b = np.zeros((5, grid.steps, 1))
    params = linear_controller(1.5, 0.9)
    det = simulate_closed_loop(spec, grid, params, x, x, b, MeanMode.DETERMINISTIC)
    ens = simulate_closed_loop(spec, grid, params, x, x, b, MeanMode.ENSEMBLE,
                               population_mean_control=True)
    assert np.allclose(det.states, ens.states, rtol=1e-12, atol=1e-12)
    assert np.allclose(det.means, ens.means, rtol=1e-12, atol=1e-12)


def test_ensemble_mean_tracks_deterministic_mean(lq):
    _, spec, grid = lq
    n = 4000
    x = np.full((n, 1), 5.0)
    params = linear_controller(1.5, 0.9)
    b = NoiseTensor.sample(3, n, grid, 1).increments
    det = simulate_closed_loop(spec, grid, params, x, x, b, MeanMode.DETERMINISTIC)
    ens = simulate_closed_loop(spec, grid, params, x, x, b, MeanMode.ENSEMBLE,
                               population_mean_control=True)
    assert np.allclose(ens.means[0], det.means[0], atol=0.1)
    assert np.allclose(ens.states.mean(axis=0), ens.means[0], atol=1e-9)


@pytest.mark.parametrize("mode", [MeanMode.DETERMINISTIC, MeanMode.ENSEMBLE])
def test_adjoint_matches_central_differences(mode):
    p = LqParams(steps=5)
    spec, grid = lq_problem(p), p.grid
    params = table1_nn1(2)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 1))
    m0 = x0.copy() if mode is MeanMode.DETERMINISTIC else x0
    b = NoiseTensor.sample(1, 3, grid, 1).increments
    g = Grouping.single(3)
    tr = simulate_closed_loop(spec, grid, params, x0, m0, b, mode, g, keep=True)
    gx, gm = closed_loop_adjoint(spec, grid, params, tr)

    def cost(x, m):
        return closed_loop_cost(spec, grid, simulate_closed_loop(spec, grid, params, x, m, b, mode, g))

    h = 1e-6
    for i in range(3):
        e = np.zeros_like(x0)
        e[i] = h
        fd = (cost(x0 + e, m0) - cost(x0 - e, m0)) / (2 * h)
        assert gx[i, 0] == pytest.approx(fd, rel=1e-5, abs=1e-8)
        if mode is MeanMode.DETERMINISTIC:
            fdm = (cost(x0, m0 + e) - cost(x0, m0 - e)) / (2 * h)
            assert gm[i, 0] == pytest.approx(fdm, rel=1e-5, abs=1e-8)
