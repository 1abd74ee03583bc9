"""Scalar linear-quadratic mean-field benchmark and its exact Riccati oracle.

Dynamics (direct map) and costs::

    x+ = a1 x + a2 E[x] + b1 u + b2 E[u] + sigma B
    l  = q1 x^2 + r1 u^2 + q2 (x - E[x])^2 + r2 (u - E[u])^2
    psi = q1 x^2 + q2 (x - E[x])^2

Writing ``x = E[x] + y`` splits the problem into a deterministic mean system
``(a1 + a2, b1 + b2, q1, r1)`` and a noise-driven deviation system
``(a1, b1, q1 + q2, r1 + r2)``, each solved by a scalar Riccati recursion.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import (DiscretizationMode, Grouping, NoiseTensor, ProblemSpec, TimeGrid,
                       _cost_from_trace, _next_state, simulate)
from .exceptions import ContractViolation
from .optimizer import OptimalBatch


@dataclass(frozen=True)
class LqParams:
    a1: float = 2.0
    a2: float = 1.0
    b1: float = 1.0
    b2: float = 2.0
    q1: float = 20.0
    q2: float = 10.0
    r1: float = 200.0
    r2: float = 100.0
    sigma: float = 1.0
    steps: int = 15
    dt: float = 1.0 / 20.0

    def __post_init__(self):
        if min(self.q1, self.q2, self.r1, self.r2) < 0:
            raise ContractViolation("cost weights must be nonnegative")
        if self.r1 + self.r2 <= 0:
            raise ContractViolation("r1 + r2 must be positive")
        if self.sigma < 0:
            raise ContractViolation("sigma must be nonnegative")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_dt(self.dt, self.steps)

    def to_dict(self) -> dict:
        return asdict(self)


def uniform_initial_law(low: float = -50.0, high: float = 50.0):
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(low, high, size=(n, 1))
    return sample


def lq_problem(params: LqParams = LqParams(), *, initial_law=None,
               divergence_threshold: float | None = None) -> ProblemSpec:
    p = params
    a1, a2, b1, b2, q1, q2, r1, r2 = p.a1, p.a2, p.b1, p.b2, p.q1, p.q2, p.r1, p.r2

    def drift(t, x, mx, u, mu):
        return a1 * x + a2 * mx + b1 * u + b2 * mu

    def drift_jacobian(t, x, mx, u, mu):
        n = x.shape[0]
        full = lambda c: np.full((n, 1, 1), c)
        return full(a1), full(a2), full(b1), full(b2)

    def running_cost(t, x, mx, u, mu):
        dx, du = x - mx, u - mu
        return (q1 * x**2 + r1 * u**2 + q2 * dx**2 + r2 * du**2)[:, 0]

    def cost_gradient(t, x, mx, u, mu):
        dx, du = x - mx, u - mu
        return (2 * q1 * x + 2 * q2 * dx, -2 * q2 * dx,
                2 * r1 * u + 2 * r2 * du, -2 * r2 * du)

    def terminal_cost(x, mx):
        return (q1 * x**2 + q2 * (x - mx) ** 2)[:, 0]

    def terminal_gradient(x, mx):
        return 2 * q1 * x + 2 * q2 * (x - mx), -2 * q2 * (x - mx)

    kwargs = {}
    if divergence_threshold is not None:
        kwargs["divergence_threshold"] = divergence_threshold
    return ProblemSpec(
        state_dim=1, control_dim=1, drift=drift, running_cost=running_cost,
        terminal_cost=terminal_cost, noise_scale=p.sigma,
        initial_law=initial_law or uniform_initial_law(),
        mode=DiscretizationMode.DIRECT, drift_jacobian=drift_jacobian,
        cost_gradient=cost_gradient, terminal_gradient=terminal_gradient,
        name="lq-mftc", **kwargs)


@dataclass(frozen=True)
class RiccatiSolution:
    """Value coefficients (length K+1) and feedback gains (length K).

    ``mean_P``/``mean_K`` belong to the mean system, ``dev_P``/``dev_K`` to
    the deviation system; ``noise_const[k]`` is the expected noise cost paid
    at step ``k``. Optimal feedback: ``u = -mean_K[k] E[x] - dev_K[k] (x - E[x])``.
    """

    mean_P: np.ndarray
    mean_K: np.ndarray
    dev_P: np.ndarray
    dev_K: np.ndarray
    noise_const: np.ndarray
    params: LqParams

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(),
                "mean_P": self.mean_P.tolist(), "mean_K": self.mean_K.tolist(),
                "dev_P": self.dev_P.tolist(), "dev_K": self.dev_K.tolist(),
                "noise_const": self.noise_const.tolist()}


def _scalar_riccati(A, B, Q, R, terminal, steps):
    P = np.empty(steps + 1)
    K = np.empty(steps)
    P[steps] = terminal
    for k in range(steps - 1, -1, -1):
        nxt = P[k + 1]
        den = R + B * B * nxt
        if den <= 0:
            raise ContractViolation(f"ill-posed Riccati step at k={k}: R + B^2 P = {den}")
        K[k] = A * B * nxt / den
        P[k] = Q + A * A * nxt - (A * B * nxt) ** 2 / den
    return P, K


def riccati_solve(params: LqParams) -> RiccatiSolution:
    p = params
    mP, mK = _scalar_riccati(p.a1 + p.a2, p.b1 + p.b2, p.q1, p.r1, p.q1, p.steps)
    dP, dK = _scalar_riccati(p.a1, p.b1, p.q1 + p.q2, p.r1 + p.r2, p.q1 + p.q2, p.steps)
    noise = p.sigma**2 * p.dt * dP[1:]
    return RiccatiSolution(mP, mK, dP, dK, noise, p)


def riccati_optimal_cost(solution: RiccatiSolution, initial_states) -> float:
    """Optimal expected cost for an initial law with the ensemble's first two moments."""
    x0 = np.asarray(initial_states, dtype=float).ravel()
    m = x0.mean()
    var = float(np.mean((x0 - m) ** 2))
    return float(solution.mean_P[0] * m * m + solution.dev_P[0] * var + solution.noise_const.sum())


def feedback_controls(solution: RiccatiSolution, k: int, x, mean_x):
    """Optimal control and its mean for states ``x`` with population mean ``mean_x``."""
    mean_u = -solution.mean_K[k] * mean_x
    return mean_u - solution.dev_K[k] * (x - mean_x), mean_u


def grouped_optimal_cost(solution: RiccatiSolution, initial_states, grouping: Grouping) -> float:
    """Sample-average oracle cost over independent populations (each weighted by its size)."""
    x0 = np.asarray(initial_states, dtype=float).ravel()
    total = 0.0
    for gidx in range(grouping.n_groups):
        members = x0[grouping.labels == gidx]
        total += members.size * riccati_optimal_cost(solution, members)
    return total / x0.size


def riccati_feedback_batch(solution: RiccatiSolution, spec: ProblemSpec, grid: TimeGrid,
                           initial_states, noise: NoiseTensor,
                           grouping: Grouping | None = None) -> OptimalBatch:
    """Roll out the optimal feedback with empirical population means.

    An alternative to the trajectory optimizer as a dataset generator; the
    result has the same record layout.
    """
    x0 = np.asarray(initial_states, float).reshape(-1, 1)
    n, k = x0.shape[0], grid.steps
    g = grouping or Grouping.single(n)
    b = noise.increments
    if b.shape != (n, k, 1):
        raise ContractViolation(f"noise shape {b.shape} != {(n, k, 1)}")
    u = np.empty((n, k, 1))
    x = x0.copy()
    for j in range(k):
        u[:, j], _ = feedback_controls(solution, j, x, g.mean(x))
        mu = g.mean(u[:, j])
        x = _next_state(spec, grid.times[j], grid.dt, x, g.mean(x), u[:, j], mu, b[:, j])
    tr = simulate(spec, grid, x0, u, b, g)
    cost = _cost_from_trace(spec, grid, tr, u)
    return OptimalBatch(controls=u, states=tr.states, mean_controls=tr.mean_controls,
                        mean_states=tr.means, noise=noise, achieved_cost=cost, iterations_used=0,
                        converged=True, grouping=g)
