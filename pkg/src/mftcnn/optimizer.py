"""Sample-average trajectory optimization over per-sample open-loop controls.

The decision variables are ``u[i, k]`` for every sample and step; the noise
sample is fixed, so the cost is a deterministic function of the controls.
Gradients come from a reverse sweep that carries the cross-sample coupling
through the population means.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, check_positive, check_state_batch
from .dynamics import (Grouping, NoiseTensor, ProblemSpec, TimeGrid, _Trace,
                       _check_rollout_inputs, _cost_from_trace, _next_state, is_diverged,
                       running_cost_gradients, simulate, step_jacobians, terminal_gradients)
from .exceptions import ContractViolation, NonConvergence

logger = logging.getLogger(__name__)


class GradientMethod(str, enum.Enum):
    ADJOINT = "adjoint"
    FINITE_DIFF = "finite_diff"


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 3000
    learning_rate: float = 0.5
    gradient_method: GradientMethod = GradientMethod.ADJOINT
    convergence_tol: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 20
    max_halvings: int = 30
    precondition: bool = True

    def __post_init__(self):
        check_positive(self.max_iters, name="max_iters")
        check_positive(self.learning_rate, name="learning_rate")
        check_positive(self.convergence_tol, name="convergence_tol")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ContractViolation(f"{name} must lie in (0, 1), got {v}")
        object.__setattr__(self, "gradient_method", GradientMethod(self.gradient_method))


@dataclass(frozen=True)
class OptimalBatch:
    controls: np.ndarray          # (N, K, m)
    states: np.ndarray            # (N, K+1, d)
    mean_controls: np.ndarray     # (N, K, m), population mean seen by each sample
    mean_states: np.ndarray       # (N, K+1, d)
    noise: NoiseTensor
    achieved_cost: float
    iterations_used: int
    converged: bool
    grouping: Grouping = field(repr=False, default=None)
    cost_history: tuple = ()

    @property
    def n_samples(self) -> int:
        return self.controls.shape[0]

    def records(self):
        """Supervised-learning view: inputs ``(x, mean_x, B)``, targets ``(u, mean_u)``.

        Returns ``(Z, Y)`` with ``Z`` of shape ``(N*K, 3d)`` and ``Y`` of shape
        ``(N*K, 2m)``; rows are ordered sample-major.
        """
        n, k, m = self.controls.shape
        d = self.states.shape[2]
        z = np.concatenate([self.states[:, :k], self.mean_states[:, :k], self.noise.increments], axis=2)
        y = np.concatenate([self.controls, self.mean_controls], axis=2)
        return z.reshape(n * k, 3 * d), y.reshape(n * k, 2 * m)


def _adjoint_gradient(spec, grid, x0, u, b, g: Grouping):
    tr = simulate(spec, grid, x0, u, b, g)
    if (tr.diverged_step >= 0).any():
        return tr, None
    n, k = u.shape[0], grid.steps
    w = 1.0 / n
    c = spec.cost_weight(grid)
    times = grid.times
    grad = np.empty_like(u)
    px, pm = terminal_gradients(spec, tr.states[:, k], tr.means[:, k])
    lam = w * px + g.spread(w * pm)
    for j in range(k - 1, -1, -1):
        x, mx, uj, mu = tr.states[:, j], tr.means[:, j], u[:, j], tr.mean_controls[:, j]
        fx, fm, fu, fmu = step_jacobians(spec, times[j], grid.dt, x, mx, uj, mu)
        lx, lm, lu, lmu = running_cost_gradients(spec, times[j], x, mx, uj, mu)
        tu = np.einsum("nij,ni->nj", fu, lam)
        tmu = np.einsum("nij,ni->nj", fmu, lam)
        grad[:, j] = w * c * lu + tu + g.spread(w * c * lmu + tmu)
        tx = np.einsum("nij,ni->nj", fx, lam)
        tm = np.einsum("nij,ni->nj", fm, lam)
        lam = w * c * lx + tx + g.spread(w * c * lm + tm)
    return tr, grad


def _cost(spec, grid, x0, u, b, g) -> float:
    tr = simulate(spec, grid, x0, u, b, g)
    return _cost_from_trace(spec, grid, tr, u)


def _fd_gradient(spec, grid, x0, u, b, g):
    grad = np.empty_like(u)
    flat = u.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        h = 1e-5 * (1.0 + abs(flat[idx]))
        up = flat.copy()
        up[idx] += h
        lo = flat.copy()
        lo[idx] -= h
        gflat[idx] = (_cost(spec, grid, x0, up.reshape(u.shape), b, g)
                      - _cost(spec, grid, x0, lo.reshape(u.shape), b, g)) / (2 * h)
    return grad


def cost_gradient(spec: ProblemSpec, grid: TimeGrid, controls, initial_states, noise,
                  method=GradientMethod.ADJOINT, grouping: Grouping | None = None) -> np.ndarray:
    """Gradient of the sample-average cost with respect to every ``u[i, k]``.

    Raises :class:`NonConvergence` if the rollout diverges or the gradient is
    not finite.
    """
    x0, u, b = _check_rollout_inputs(spec, grid, initial_states, controls, noise)
    g = grouping or Grouping.single(x0.shape[0])
    method = GradientMethod(method)
    if method is GradientMethod.ADJOINT:
        _, grad = _adjoint_gradient(spec, grid, x0, u, b, g)
        if grad is None:
            raise NonConvergence("rollout diverged; gradient undefined")
    else:
        grad = _fd_gradient(spec, grid, x0, u, b, g)
    if not np.all(np.isfinite(grad)):
        raise NonConvergence("non-finite gradient")
    return grad


# --- preconditioned solver ----------------------------------------------------

def deadbeat_gains(spec: ProblemSpec, grid: TimeGrid, x_ref, damping: float = 1e-8):
    """Feedback gains that cancel the linearized drift at ``x_ref``.

    Returns ``(L_dev, L_mean)`` with ``u = v - L_dev (x - m) - L_mean m`` making
    both the deviation and the mean one-step maps (nearly) zero. Used only to
    reparametrize the open-loop decision variables; the optimum is unchanged.
    """
    d, m = spec.state_dim, spec.control_dim
    x = np.asarray(x_ref, float).reshape(1, d)
    u = np.zeros((1, m))
    fx, fm, fu, fmu = (j[0] for j in step_jacobians(spec, 0.0, grid.dt, x, x, u, u))

    def solve(B, A):
        return np.linalg.solve(B.T @ B + damping * np.eye(m), B.T @ A)

    return solve(fu, fx), solve(fu + fmu, fx + fm)


def _simulate_feedback(spec, grid, x0, v, b, g, L, Lbar):
    """Rollout under ``u = v - L (x - m) - Lbar m``; returns trace and realized controls."""
    n, k = x0.shape[0], grid.steps
    u = np.empty_like(v)
    x = x0.copy()
    states = np.empty((n, k + 1, x0.shape[1]))
    means = np.empty_like(states)
    mean_u = np.empty_like(v)
    alive = np.ones((n, k + 1), bool)
    states[:, 0] = x
    times = grid.times
    dstep = np.full(n, -1)
    for j in range(k):
        mx = g.mean(x)
        means[:, j] = mx
        u[:, j] = v[:, j] - (x - mx) @ L.T - mx @ Lbar.T
        mu = g.mean(u[:, j])
        mean_u[:, j] = mu
        with np.errstate(over="ignore", invalid="ignore"):
            x = _next_state(spec, times[j], grid.dt, x, mx, u[:, j], mu, b[:, j])
        bad = is_diverged(spec, x)
        if bad.any():
            dstep[bad & (dstep < 0)] = j + 1
        states[:, j + 1] = x
    means[:, k] = g.mean(x)
    if (dstep >= 0).any():
        alive[:] = False
    return _Trace(states, means, mean_u, alive, dstep), u


def _reparam_gradient(spec, grid, tr, u, g, L, Lbar):
    """Reverse sweep returning (dJ/du, dJ/dv) for ``u = v - L (x - m) - Lbar m``."""
    n, k = u.shape[0], grid.steps
    w = 1.0 / n
    c = spec.cost_weight(grid)
    times = grid.times
    gu_all = np.empty_like(u)
    gv_all = np.empty_like(u)
    px, pm = terminal_gradients(spec, tr.states[:, k], tr.means[:, k])
    lam = w * px + g.spread(w * pm)   # dJ/dx_{k} with controls at later steps held fixed
    lam_v = lam.copy()                # same, with later v held fixed (feedback active)
    for j in range(k - 1, -1, -1):
        x, mx, uj, mu = tr.states[:, j], tr.means[:, j], u[:, j], tr.mean_controls[:, j]
        fx, fm, fu, fmu = step_jacobians(spec, times[j], grid.dt, x, mx, uj, mu)
        lx, lm, lu, lmu = running_cost_gradients(spec, times[j], x, mx, uj, mu)
        ein = lambda a, l: np.einsum("nij,ni->nj", a, l)
        gu_all[:, j] = w * c * lu + ein(fu, lam) + g.spread(w * c * lmu + ein(fmu, lam))
        lam = w * c * lx + ein(fx, lam) + g.spread(w * c * lm + ein(fm, lam))
        gv = w * c * lu + ein(fu, lam_v) + g.spread(w * c * lmu + ein(fmu, lam_v))
        gv_all[:, j] = gv
        direct = w * c * lx + ein(fx, lam_v) + g.spread(w * c * lm + ein(fm, lam_v))
        lam_v = direct - gv @ L + g.spread(gv @ (L - Lbar))
    return gu_all, gv_all


def solve_pcd(spec: ProblemSpec, grid: TimeGrid, initial_states, noise: NoiseTensor,
              config: OptimizerConfig = OptimizerConfig(), grouping: Grouping | None = None,
              initial_controls=None) -> OptimalBatch:
    """Minimize the sample-average cost over per-sample, per-step controls.

    Adam steps on the (optionally feedback-reparametrized) controls with a
    cost-based acceptance test: a step that raises the cost is rejected and
    the learning rate halved. Stops when the gradient max-norm falls below
    ``tol * (1 + |J|)``, when the relative decrease stays below ``tol`` for
    ``patience`` accepted steps, or at ``max_iters`` (``converged=False``).
    """
    x0 = check_state_batch(initial_states, spec.state_dim, name="initial_states")
    n, k = x0.shape[0], grid.steps
    b = as_float_array(noise.increments, name="noise", ndim=3, shape=(n, k, spec.state_dim))
    g = grouping or Grouping.single(n)
    m = spec.control_dim
    if config.gradient_method is GradientMethod.FINITE_DIFF and config.precondition:
        raise ContractViolation("finite-difference gradients require precondition=False")

    if config.precondition:
        L, Lbar = deadbeat_gains(spec, grid, x0.mean(axis=0))
    else:
        L = Lbar = np.zeros((m, spec.state_dim))

    def evaluate(v):
        tr, u = _simulate_feedback(spec, grid, x0, v, b, g, L, Lbar)
        if (tr.diverged_step >= 0).any():
            return math.inf, None, u
        return _cost_from_trace(spec, grid, tr, u), tr, u

    v = np.zeros((n, k, m))
    if initial_controls is not None:
        v = as_float_array(initial_controls, name="initial_controls", shape=(n, k, m)).copy()
    J, tr, u = evaluate(v)
    if not math.isfinite(J):
        raise NonConvergence("initial controls diverge")

    def gradients(tr, u, v):
        if config.gradient_method is GradientMethod.FINITE_DIFF:
            gu = _fd_gradient(spec, grid, x0, u, b, g)
            return gu, gu
        return _reparam_gradient(spec, grid, tr, u, g, L, Lbar)

    mom = np.zeros_like(v)
    sec = np.zeros_like(v)
    lr = config.learning_rate
    history = [J]
    flat = 0
    fresh = False   # True right after a plateau restart, until progress is made
    converged = False
    it = 0
    t = 0
    while it < config.max_iters:
        gu, gv = gradients(tr, u, v)
        if not (np.all(np.isfinite(gu)) and np.all(np.isfinite(gv))):
            raise NonConvergence(f"non-finite gradient at iteration {it}")
        if np.max(np.abs(gu)) <= config.convergence_tol * (1.0 + abs(J)):
            converged = True
            break
        it += 1
        t += 1
        mom = config.beta1 * mom + (1 - config.beta1) * gv
        sec = config.beta2 * sec + (1 - config.beta2) * gv * gv
        direction = (mom / (1 - config.beta1**t)) / (np.sqrt(sec / (1 - config.beta2**t)) + 1e-12)
        for _ in range(config.max_halvings + 1):
            cand = v - lr * direction
            if spec.control_bound is not None and not config.precondition:
                cand = spec.clip_controls(cand)
            Jc, trc, uc = evaluate(cand)
            if Jc <= J:
                break
            lr *= 0.5
        else:
            if t > 1:
                # stale momentum can point uphill; restart Adam from the raw gradient
                mom[:] = 0.0
                sec[:] = 0.0
                t = 0
                lr = config.learning_rate
                continue
            if flat > 0 or J - Jc <= config.convergence_tol * abs(J):
                converged = True
                break
            raise NonConvergence(f"no descent after {config.max_halvings} halvings at iteration {it}")
        rel = (J - Jc) / max(abs(J), 1e-300)
        v, J, tr, u = cand, Jc, trc, uc
        history.append(J)
        lr = min(lr * 1.1, config.learning_rate)
        flat = flat + 1 if rel < config.convergence_tol else 0
        if rel >= config.convergence_tol:
            fresh = False
        if flat >= config.patience:
            if fresh:
                converged = True
                break
            # a plateau may just be a collapsed step size; restart Adam once before stopping
            mom[:] = 0.0
            sec[:] = 0.0
            t = 0
            lr = config.learning_rate
            flat = 0
            fresh = True
    if not converged:
        logger.warning("solve_pcd hit max_iters=%d (cost %.6g)", config.max_iters, J)
    return OptimalBatch(
        controls=u, states=tr.states, mean_controls=tr.mean_controls, mean_states=tr.means,
        noise=NoiseTensor(b, noise.seed, noise.offset), achieved_cost=J, iterations_used=it,
        converged=converged, grouping=g, cost_history=tuple(history))
