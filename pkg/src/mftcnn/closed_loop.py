"""Closed-loop simulation of a problem driven by a neural controller.

At each step the controller sees ``z = (x, E[x], B_k)`` and returns
``(u, E[u])``. The expected state is either propagated per trajectory by the
noise-free companion recursion (DETERMINISTIC) or taken as the population
average of live trajectories (ENSEMBLE).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .controller import MlpParams, backward, forward_batch
from .dynamics import (Grouping, ProblemSpec, TimeGrid, _next_state, is_diverged,
                       running_cost_gradients, step_jacobians, terminal_gradients)
from .exceptions import ContractViolation

SATURATED_COST = 1e30


class MeanMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    ENSEMBLE = "ensemble"


@dataclass
class ClosedLoopTrace:
    states: np.ndarray          # (n, K+1, d), NaN after divergence
    means: np.ndarray           # (n, K+1, d)
    controls: np.ndarray        # (n, K, m)
    mean_controls: np.ndarray   # (n, K, m)
    diverged_step: np.ndarray   # (n,), -1 if never
    mean_mode: MeanMode
    grouping: Grouping
    population_mean_control: bool
    caches: list | None = None

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_step >= 0


def check_controller(spec: ProblemSpec, params: MlpParams) -> None:
    d, m = spec.state_dim, spec.control_dim
    if params.input_dim != 3 * d:
        raise ContractViolation(f"controller input dim {params.input_dim} != 3*state_dim = {3 * d}")
    if params.output_dim != 2 * m:
        raise ContractViolation(f"controller output dim {params.output_dim} != 2*control_dim = {2 * m}")


def simulate_closed_loop(spec: ProblemSpec, grid: TimeGrid, params: MlpParams, x0, mean_x0,
                         noise, mean_mode=MeanMode.DETERMINISTIC, grouping: Grouping | None = None,
                         population_mean_control: bool = False, keep: bool = False) -> ClosedLoopTrace:
    """Vectorized closed-loop rollout of ``n`` trajectories.

    ``mean_x0`` is only used in DETERMINISTIC mode. With
    ``population_mean_control`` (ENSEMBLE mode only) the population average
    of the first controller output replaces its second output.
    """
    check_controller(spec, params)
    mean_mode = MeanMode(mean_mode)
    x = np.asarray(x0, float)
    n, d = x.shape
    m = spec.control_dim
    k = grid.steps
    b = np.asarray(noise, float)
    if b.shape != (n, k, d):
        raise ContractViolation(f"noise shape {b.shape} != {(n, k, d)}")
    g = grouping or Grouping.single(n)
    if population_mean_control and mean_mode is not MeanMode.ENSEMBLE:
        raise ContractViolation("population_mean_control requires ENSEMBLE mean mode")

    states = np.full((n, k + 1, d), np.nan)
    means = np.full((n, k + 1, d), np.nan)
    ctrl = np.full((n, k, m), np.nan)
    mctrl = np.full((n, k, m), np.nan)
    dstep = np.full(n, -1)
    caches = [] if keep else None
    alive = ~(is_diverged(spec, x))
    if mean_mode is MeanMode.DETERMINISTIC:
        mx = np.broadcast_to(np.asarray(mean_x0, float), (n, d)).copy()
        alive &= ~is_diverged(spec, mx)
    dstep[~alive] = 0
    zero = np.zeros((n, d))
    times = grid.times
    for j in range(k + 1):
        if mean_mode is MeanMode.ENSEMBLE:
            mx = g.mean(x, alive)
        states[alive, j] = x[alive]
        means[alive, j] = mx[alive]
        if j == k:
            break
        z = np.concatenate([np.nan_to_num(x), np.nan_to_num(mx), b[:, j]], axis=1)
        if keep:
            out, cache = forward_batch(params, z, keep=True)
            caches.append(cache)
        else:
            out = forward_batch(params, z)
        u, w = out[:, :m], out[:, m:]
        if population_mean_control:
            w = g.mean(u, alive)
        ctrl[alive, j] = u[alive]
        mctrl[alive, j] = w[alive]
        with np.errstate(over="ignore", invalid="ignore"):
            x_next = _next_state(spec, times[j], grid.dt, x, mx, u, w, b[:, j])
            bad = is_diverged(spec, x_next)
            if mean_mode is MeanMode.DETERMINISTIC:
                m_next = _next_state(spec, times[j], grid.dt, mx, mx, w, w, zero)
                bad |= is_diverged(spec, m_next)
                mx = np.where((alive & ~bad)[:, None], m_next, np.nan)
        newly = alive & bad
        dstep[newly] = j + 1
        alive = alive & ~bad
        x = np.where(alive[:, None], x_next, np.nan)
    return ClosedLoopTrace(states, means, ctrl, mctrl, dstep, mean_mode, g,
                           population_mean_control, caches)


def trajectory_costs(spec: ProblemSpec, grid: TimeGrid, tr: ClosedLoopTrace,
                     saturate: bool = True) -> np.ndarray:
    """Per-trajectory cost; diverged trajectories get ``SATURATED_COST`` (or ``inf``)."""
    n = tr.states.shape[0]
    c = spec.cost_weight(grid)
    total = np.zeros(n)
    times = grid.times
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(grid.steps):
            total += c * np.asarray(spec.running_cost(
                times[j], tr.states[:, j], tr.means[:, j], tr.controls[:, j], tr.mean_controls[:, j]))
        total += np.asarray(spec.terminal_cost(tr.states[:, -1], tr.means[:, -1]))
    bad = tr.diverged | ~np.isfinite(total)
    total[bad] = SATURATED_COST if saturate else np.inf
    return np.minimum(total, SATURATED_COST) if saturate else total


def closed_loop_cost(spec, grid, tr: ClosedLoopTrace, saturate: bool = True) -> float:
    return float(np.mean(trajectory_costs(spec, grid, tr, saturate)))


def closed_loop_adjoint(spec: ProblemSpec, grid: TimeGrid, params: MlpParams,
                        tr: ClosedLoopTrace):
    """Gradient of the mean closed-loop cost w.r.t. each trajectory's initial state
    and (DETERMINISTIC mode) initial mean.

    Requires a trace recorded with ``keep=True`` and no diverged trajectory.
    Returns ``(dJ/dx0, dJ/dm0)``, each ``(n, d)``; in ENSEMBLE mode the second
    entry is zero since the mean is a function of the states.
    """
    if tr.caches is None:
        raise ContractViolation("trace was recorded without caches")
    if tr.diverged.any():
        raise ContractViolation("adjoint undefined for diverged trajectories")
    n, kp1, d = tr.states.shape
    k = kp1 - 1
    m = spec.control_dim
    wgt = 1.0 / n
    c = spec.cost_weight(grid)
    g = tr.grouping
    det = tr.mean_mode is MeanMode.DETERMINISTIC
    ein = lambda a, l: np.einsum("nij,ni->nj", a, l)
    times = grid.times

    px, pm = terminal_gradients(spec, tr.states[:, k], tr.means[:, k])
    if det:
        lam_x, lam_m = wgt * px, wgt * pm
    else:
        lam_x, lam_m = wgt * px + g.spread(wgt * pm), None

    for j in range(k - 1, -1, -1):
        x, mx = tr.states[:, j], tr.means[:, j]
        u, w = tr.controls[:, j], tr.mean_controls[:, j]
        fx, fm, fu, fmu = step_jacobians(spec, times[j], grid.dt, x, mx, u, w)
        lx, lm, lu, lmu = running_cost_gradients(spec, times[j], x, mx, u, w)
        gu = wgt * c * lu + ein(fu, lam_x)
        gw = wgt * c * lmu + ein(fmu, lam_x)
        new_x = wgt * c * lx + ein(fx, lam_x)
        new_m = wgt * c * lm + ein(fm, lam_x)
        if det:
            hx, hm, hu, hmu = step_jacobians(spec, times[j], grid.dt, mx, mx, w, w)
            gw = gw + ein(hu + hmu, lam_m)
            new_m = new_m + ein(hx + hm, lam_m)
        if tr.population_mean_control:
            gu = gu + g.spread(gw)
            gw = np.zeros_like(gw)
        _, dz = backward(params, tr.caches[j], np.concatenate([gu, gw], axis=1))
        new_x = new_x + dz[:, :d]
        new_m = new_m + dz[:, d:2 * d]
        if det:
            lam_x, lam_m = new_x, new_m
        else:
            lam_x = new_x + g.spread(new_m)
    if det:
        return lam_x, lam_m
    return lam_x, np.zeros_like(lam_x)
