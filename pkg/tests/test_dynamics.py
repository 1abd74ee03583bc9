import numpy as np
import pytest

from mftcnn.dynamics import (DiscretizationMode, Grouping, NoiseTensor, ProblemSpec, TimeGrid,
                             empirical_cost, is_diverged, propagate_mean, rollout_ensemble, step)
from mftcnn.exceptions import ContractViolation
from mftcnn.lq import LqParams, lq_problem


def zero_spec(mode=DiscretizationMode.EULER, sigma=0.0, d=1):
    return ProblemSpec(d, 1, drift=lambda t, x, mx, u, mu: np.zeros_like(x),
                       running_cost=lambda t, x, mx, u, mu: np.zeros(len(x)),
                       terminal_cost=lambda x, mx: np.zeros(len(x)), noise_scale=sigma, mode=mode)


def test_time_grid():
    g = TimeGrid(0.75, 15)
    assert g.dt == pytest.approx(0.05)
    assert g.steps * g.dt == pytest.approx(g.horizon, rel=1e-15)
    assert np.allclose(g.times, np.arange(15) * 0.05)
    for bad in ((1.0, -1), (0.0, 3), (1.0, 2.5)):
        with pytest.raises(ContractViolation):
            TimeGrid(*bad)


def test_step_examples():
    spec = lq_problem(LqParams())
    assert step(zero_spec(), 0.0, [4.2], [1.0], [3.0], [1.0], [0.0], dt=0.1)[0] == 4.2
    assert step(spec, 0.0, [1.0], [1.0], [0.0], [0.0], [0.0])[0] == 3.0
    assert step(spec, 0.0, [1.0], [1.0], [1.0], [1.0], [0.0])[0] == 6.0


def test_step_dimension_mismatch():
    with pytest.raises(ContractViolation):
        step(zero_spec(), 0.0, [1.0, 2.0], [1.0], [0.0], [0.0], [0.0])


def test_step_overflow_is_flagged_not_raised():
    spec = lq_problem(LqParams())
    x = step(spec, 0.0, [1e308], [1e308], [0.0], [0.0], [0.0])
    assert is_diverged(spec, x[None, :])[0]


def test_rollout_constant_and_symmetric():
    grid = TimeGrid(1.0, 5)
    ens = rollout_ensemble(zero_spec(), grid, [[5.0]], np.zeros((1, 5, 1)), NoiseTensor.zeros(1, grid, 1))
    assert np.all(ens.states == 5.0)
    spec = lq_problem(LqParams(sigma=0.0))
    ens = rollout_ensemble(spec, grid, [[2.0], [-2.0]], np.zeros((2, 5, 1)), NoiseTensor.zeros(2, grid, 1))
    assert np.all(ens.mean_states == 0.0)


def test_open_loop_mean_is_three_to_the_k():
    p = LqParams(sigma=0.0)
    spec, grid = lq_problem(p), p.grid
    ens = rollout_ensemble(spec, grid, [[1.0]], np.zeros((1, p.steps, 1)), NoiseTensor.zeros(1, grid, 1))
    assert np.array_equal(ens.mean_states[:, 0], 3.0 ** np.arange(p.steps + 1))
    assert np.array_equal(propagate_mean(spec, grid, [1.0], np.zeros((p.steps, 1)))[:, 0],
                          3.0 ** np.arange(p.steps + 1))


def test_empirical_cost_examples():
    p = LqParams(steps=1, sigma=0.0)
    spec, grid = lq_problem(p), p.grid
    ens = rollout_ensemble(spec, grid, [[1.0]], np.zeros((1, 1, 1)), NoiseTensor.zeros(1, grid, 1))
    assert empirical_cost(spec, grid, ens, np.zeros((1, 1, 1))) == 200.0
    ens0 = rollout_ensemble(spec, grid, [[0.0]], np.zeros((1, 1, 1)), NoiseTensor.zeros(1, grid, 1))
    assert empirical_cost(spec, grid, ens0, np.zeros((1, 1, 1))) == 0.0
    z = zero_spec()
    e = rollout_ensemble(z, grid, [[3.0]], np.zeros((1, 1, 1)), NoiseTensor.zeros(1, grid, 1))
    assert empirical_cost(z, grid, e, np.zeros((1, 1, 1))) == 0.0


def test_divergence_freezes_and_excludes():
    p = LqParams(sigma=0.0)
    spec, grid = lq_problem(p, divergence_threshold=1e3), p.grid
    x0 = np.array([[1.0], [1e-6]])
    # controls cancel the mean coupling for the small sample; the big one blows up
    ens = rollout_ensemble(spec, grid, x0, np.zeros((2, p.steps, 1)), NoiseTensor.zeros(2, grid, 1))
    assert ens.diverged.all()
    k = ens.diverged_step[0]
    assert np.isnan(ens.states[0, k:]).all() and np.isfinite(ens.states[0, :k]).all()
    assert np.isinf(empirical_cost(spec, grid, ens, np.zeros((2, p.steps, 1))))


def test_mean_consistency_and_grouping():
    p = LqParams()
    spec, grid = lq_problem(p), p.grid
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(6, 1))
    u = rng.normal(size=(6, p.steps, 1))
    g = Grouping.blocks(2, 3)
    ens = rollout_ensemble(spec, grid, x0, u, NoiseTensor.sample(1, 6, grid, 1), g)
    for k in range(p.steps + 1):
        for grp in range(2):
            idx = slice(3 * grp, 3 * grp + 3)
            assert np.allclose(ens.sample_means[idx, k], ens.states[idx, k].mean(axis=0), rtol=0, atol=1e-12)


def test_noise_tensor_reproducible_and_prefix_stable():
    grid = TimeGrid(1.0, 4)
    a = NoiseTensor.sample(42, 5, grid, 2)
    b = NoiseTensor.sample(42, 8, grid, 2)
    assert np.array_equal(a.increments, b.increments[:5])
    big = NoiseTensor.sample(0, 4000, TimeGrid(1.0, 1), 1).increments
    assert abs(big.mean()) < 4 * 1 / np.sqrt(4000)
    assert big.var() == pytest.approx(1.0, rel=0.1)


def test_linear_case_agreement_improves_with_n():
    p = LqParams()
    spec, grid = lq_problem(p), p.grid
    ubar = np.full((p.steps, 1), -0.5)
    ref = propagate_mean(spec, grid, [1.0], ubar)
    errs = []
    for n in (100, 10000):
        ens = rollout_ensemble(spec, grid, np.ones((n, 1)), np.broadcast_to(ubar, (n, p.steps, 1)),
                               NoiseTensor.sample(5, n, grid, 1))
        errs.append(np.max(np.abs(ens.mean_states - ref) / 3.0 ** np.arange(p.steps + 1)[:, None]))
    assert errs[1] < errs[0] / 3
