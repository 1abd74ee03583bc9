"""Discretized mean-field-type dynamics and ensemble simulation.

States are stored as ``(N, K + 1, d)`` arrays (``K`` steps plus the terminal
point), controls as ``(N, K, m)``. Every sample belongs to a population
(:class:`Grouping`); expectations are replaced by averages over the live
members of the sample's population. With a single population this is the
usual empirical-mean coupling over the whole ensemble.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse

from ._validation import as_float_array, check_state_batch
from .exceptions import ContractViolation

DIVERGENCE_THRESHOLD = 1e12


class DiscretizationMode(str, enum.Enum):
    EULER = "euler"    # x + f dt + sigma B
    DIRECT = "direct"  # f + sigma B, f is the full next-state map


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 0:
            raise ContractViolation(f"steps must be a nonnegative integer, got {self.steps}")
        if self.steps > 0 and not self.horizon > 0:
            raise ContractViolation(f"horizon must be positive, got {self.horizon}")

    @classmethod
    def from_dt(cls, dt: float, steps: int) -> "TimeGrid":
        return cls(horizon=dt * steps, steps=steps)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps if self.steps else 0.0

    @property
    def times(self) -> np.ndarray:
        """Decision times t_0 .. t_{K-1}."""
        return np.arange(self.steps) * self.dt


def _broadcast_jac(j, n, rows, cols):
    return np.broadcast_to(np.asarray(j, dtype=float), (n, rows, cols))


@dataclass(frozen=True)
class ProblemSpec:
    """A discretized mean-field-type control problem.

    All callables are vectorized over samples: ``x`` and ``u`` have shapes
    ``(N, d)`` and ``(N, m)``; the mean arguments are either a single row or
    one row per sample. ``drift`` returns ``(N, d)``, the costs return ``(N,)``.

    In DIRECT mode ``drift`` is the whole deterministic next-state map and
    ``running_cost`` already contains the time-step weighting.

    The optional derivative callables return, per sample,
    ``drift_jacobian -> (f_x, f_mean_x, f_u, f_mean_u)`` with shapes
    ``(N,d,d), (N,d,d), (N,d,m), (N,d,m)``, ``cost_gradient -> (l_x, l_mx, l_u, l_mu)``
    and ``terminal_gradient -> (psi_x, psi_mx)``. Missing derivatives are
    approximated by central differences.
    """

    state_dim: int
    control_dim: int
    drift: Callable
    running_cost: Callable
    terminal_cost: Callable
    noise_scale: float = 0.0
    initial_law: Optional[Callable] = None
    mode: DiscretizationMode = DiscretizationMode.EULER
    control_bound: Optional[tuple] = None
    divergence_threshold: float = DIVERGENCE_THRESHOLD
    drift_jacobian: Optional[Callable] = None
    cost_gradient: Optional[Callable] = None
    terminal_gradient: Optional[Callable] = None
    name: str = "problem"

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ContractViolation("state_dim and control_dim must be positive")
        if self.noise_scale < 0:
            raise ContractViolation(f"noise_scale must be nonnegative, got {self.noise_scale}")
        object.__setattr__(self, "mode", DiscretizationMode(self.mode))

    def cost_weight(self, grid: TimeGrid) -> float:
        """Factor applied to the running cost (``dt``; 1 in DIRECT mode)."""
        return 1.0 if self.mode is DiscretizationMode.DIRECT else grid.dt

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.initial_law is None:
            raise ContractViolation(f"{self.name} has no initial law")
        return check_state_batch(self.initial_law(rng, n), self.state_dim, name="initial_law sample")

    def clip_controls(self, u: np.ndarray) -> np.ndarray:
        if self.control_bound is None:
            return u
        lo, hi = self.control_bound
        return np.clip(u, lo, hi)


class Grouping:
    """Partition of ``n`` samples into independent populations.

    ``mean`` returns, for every sample, the average over the live members of
    its population; ``spread`` is its adjoint.
    """

    def __init__(self, labels=None, n: int | None = None):
        if labels is None:
            if n is None:
                raise ContractViolation("Grouping needs labels or n")
            labels = np.zeros(n, dtype=int)
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise ContractViolation("group labels must be 1-d")
        _, inv = np.unique(labels, return_inverse=True)
        self.labels = inv.astype(np.intp)
        self.n = len(inv)
        self.n_groups = int(inv.max()) + 1 if self.n else 0
        self._ind = None
        if self.n_groups > 1:
            self._ind = scipy.sparse.csr_matrix(
                (np.ones(self.n), (self.labels, np.arange(self.n))),
                shape=(self.n_groups, self.n))

    @classmethod
    def single(cls, n: int) -> "Grouping":
        return cls(n=n)

    @classmethod
    def blocks(cls, n_groups: int, size: int) -> "Grouping":
        """Contiguous populations of equal ``size``."""
        return cls(np.repeat(np.arange(n_groups), size))

    def subset(self, idx) -> "Grouping":
        return Grouping(self.labels[np.asarray(idx)])

    def _totals(self, v2d):
        if self._ind is None:
            return v2d.sum(axis=0, keepdims=True)
        return np.asarray(self._ind @ v2d)

    def counts(self, alive=None) -> np.ndarray:
        a = np.ones(self.n) if alive is None else alive.astype(float)
        return self._totals(a[:, None])[:, 0]

    def mean(self, x: np.ndarray, alive: np.ndarray | None = None) -> np.ndarray:
        """Per-sample population mean of ``x`` (shape ``(n, k)``)."""
        if alive is None or alive.all():
            tot = self._totals(x)
            cnt = self.counts()
        else:
            tot = self._totals(np.where(alive[:, None], x, 0.0))
            cnt = self.counts(alive)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = tot / cnt[:, None]
        return m[self.labels] if self._ind is not None else np.broadcast_to(m, x.shape).copy()

    def spread(self, v: np.ndarray, alive: np.ndarray | None = None) -> np.ndarray:
        """Adjoint of :meth:`mean`: sample ``i`` receives ``(1/n_g) sum_{j in g} v_j``."""
        out = self.mean(v, alive)
        if alive is not None and not alive.all():
            out[~alive] = 0.0
        return out

    def group_means(self, x: np.ndarray, alive: np.ndarray | None = None) -> np.ndarray:
        """One row per population (shape ``(n_groups, k)``)."""
        a = np.ones(self.n, bool) if alive is None else alive
        tot = self._totals(np.where(a[:, None], x, 0.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            return tot / self.counts(a)[:, None]


@dataclass(frozen=True)
class NoiseTensor:
    """Pre-sampled Brownian increments ``B[i, k] ~ N(0, dt I)``.

    Sample ``i`` draws from its own stream keyed by ``(seed, offset + i)`` so a
    sample's path does not depend on how many other samples were requested.
    """

    increments: np.ndarray
    seed: int = 0
    offset: int = 0

    @classmethod
    def sample(cls, seed: int, n: int, grid: TimeGrid, dim: int, offset: int = 0) -> "NoiseTensor":
        sd = math.sqrt(grid.dt)
        inc = np.empty((n, grid.steps, dim))
        for i in range(n):
            rng = np.random.default_rng([int(seed), offset + i])
            inc[i] = rng.standard_normal((grid.steps, dim)) * sd
        return cls(inc, int(seed), offset)

    @classmethod
    def zeros(cls, n: int, grid: TimeGrid, dim: int) -> "NoiseTensor":
        return cls(np.zeros((n, grid.steps, dim)))

    @property
    def n_samples(self) -> int:
        return self.increments.shape[0]

    def take(self, idx) -> "NoiseTensor":
        return NoiseTensor(self.increments[np.asarray(idx)], self.seed, self.offset)


@dataclass(frozen=True)
class Ensemble:
    """Simulated trajectories with the population means each sample saw."""

    states: np.ndarray          # (N, K+1, d), NaN after divergence
    sample_means: np.ndarray    # (N, K+1, d)
    diverged_step: np.ndarray   # (N,), -1 if never diverged
    grouping: Grouping = field(repr=False, default=None)

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_step >= 0

    @property
    def mean_states(self) -> np.ndarray:
        """``(K+1, d)`` for one population, else ``(n_groups, K+1, d)``."""
        g = self.grouping or Grouping.single(self.n_samples)
        first = np.array([np.flatnonzero(g.labels == j)[0] for j in range(g.n_groups)])
        out = self.sample_means[first]
        return out[0] if g.n_groups == 1 else out


@dataclass(frozen=True)
class ControlBatch:
    controls: np.ndarray               # (N, K, m)
    sample_mean_controls: np.ndarray   # (N, K, m)
    grouping: Grouping = field(repr=False, default=None)

    @classmethod
    def from_controls(cls, controls, grouping: Grouping | None = None) -> "ControlBatch":
        u = as_float_array(controls, name="controls", ndim=3)
        g = grouping or Grouping.single(u.shape[0])
        n, k, m = u.shape
        flat = u.transpose(0, 2, 1).reshape(n, m * k)
        mu = g.mean(flat).reshape(n, m, k).transpose(0, 2, 1)
        return cls(u, mu, g)

    @property
    def mean_controls(self) -> np.ndarray:
        g = self.grouping or Grouping.single(self.controls.shape[0])
        first = np.array([np.flatnonzero(g.labels == j)[0] for j in range(g.n_groups)])
        out = self.sample_mean_controls[first]
        return out[0] if g.n_groups == 1 else out


# --- single-step map and its derivatives ----------------------------------

def _next_state(spec: ProblemSpec, t: float, dt: float, x, mx, u, mu, noise) -> np.ndarray:
    f = np.asarray(spec.drift(t, x, mx, u, mu), dtype=float)
    if spec.mode is DiscretizationMode.DIRECT:
        return f + spec.noise_scale * noise
    return x + f * dt + spec.noise_scale * noise


def step(spec: ProblemSpec, t_k: float, x, mean_x, u, mean_u, noise, dt: float = 1.0) -> np.ndarray:
    """Advance one state vector by one step.

    ``dt`` is only used in EULER mode. Non-finite results are returned as is;
    use :func:`is_diverged` to flag them.
    """
    d, m = spec.state_dim, spec.control_dim
    vecs = []
    for name, v, n in (("x", x, d), ("mean_x", mean_x, d), ("u", u, m),
                       ("mean_u", mean_u, m), ("noise", noise, d)):
        a = np.atleast_1d(np.asarray(v, dtype=float))
        if a.shape != (n,):
            raise ContractViolation(f"{name}: expected length {n}, got shape {a.shape}")
        vecs.append(a[None, :])
    with np.errstate(over="ignore", invalid="ignore"):
        return _next_state(spec, t_k, dt, *vecs)[0]


def is_diverged(spec: ProblemSpec, x) -> np.ndarray:
    """Row-wise divergence flag: any coordinate non-finite or beyond the threshold."""
    x = np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(x) | (np.abs(x) > spec.divergence_threshold)
    return bad.any(axis=-1) if x.ndim else bool(bad)


def _fd_jacobian(fun, args, which, eps=1e-6):
    """Central-difference Jacobian of ``fun(*args)`` (N, p) w.r.t. ``args[which]`` (N, q)."""
    base = np.asarray(args[which], dtype=float)
    n, q = base.shape[0], base.shape[-1]
    cols = []
    for j in range(q):
        h = eps * (1.0 + np.abs(base[..., j]))
        plus = [np.array(a, dtype=float, copy=True) for a in args]
        minus = [np.array(a, dtype=float, copy=True) for a in args]
        plus[which] = np.broadcast_to(plus[which], base.shape).copy()
        minus[which] = np.broadcast_to(minus[which], base.shape).copy()
        plus[which][..., j] += h
        minus[which][..., j] -= h
        fp = np.asarray(fun(*plus), dtype=float)
        fm = np.asarray(fun(*minus), dtype=float)
        hh = np.reshape(h, (-1,) + (1,) * (fp.ndim - 1)) if np.ndim(h) else h
        cols.append((fp - fm) / (2 * hh))
    jac = np.stack(cols, axis=-1)
    return np.broadcast_to(jac, (n,) + jac.shape[1:])


def drift_jacobians(spec: ProblemSpec, t, x, mx, u, mu):
    n, d, m = x.shape[0], spec.state_dim, spec.control_dim
    mx = np.broadcast_to(mx, (n, d))
    mu = np.broadcast_to(mu, (n, m))
    if spec.drift_jacobian is not None:
        fx, fm, fu, fmu = spec.drift_jacobian(t, x, mx, u, mu)
        return (_broadcast_jac(fx, n, d, d), _broadcast_jac(fm, n, d, d),
                _broadcast_jac(fu, n, d, m), _broadcast_jac(fmu, n, d, m))
    f = lambda x_, mx_, u_, mu_: spec.drift(t, x_, mx_, u_, mu_)
    args = (x, mx, u, mu)
    return tuple(_fd_jacobian(f, args, w) for w in range(4))


def step_jacobians(spec: ProblemSpec, t, dt, x, mx, u, mu):
    """Jacobians of the next-state map w.r.t. (x, mean_x, u, mean_u)."""
    fx, fm, fu, fmu = drift_jacobians(spec, t, x, mx, u, mu)
    if spec.mode is DiscretizationMode.DIRECT:
        return fx, fm, fu, fmu
    eye = np.eye(spec.state_dim)
    return eye + fx * dt, fm * dt, fu * dt, fmu * dt


def running_cost_gradients(spec: ProblemSpec, t, x, mx, u, mu):
    n, d, m = x.shape[0], spec.state_dim, spec.control_dim
    mx = np.broadcast_to(mx, (n, d))
    mu = np.broadcast_to(mu, (n, m))
    if spec.cost_gradient is not None:
        lx, lm, lu, lmu = spec.cost_gradient(t, x, mx, u, mu)
        return tuple(np.broadcast_to(np.asarray(g, float), s)
                     for g, s in zip((lx, lm, lu, lmu), ((n, d), (n, d), (n, m), (n, m))))
    fun = lambda x_, mx_, u_, mu_: np.asarray(spec.running_cost(t, x_, mx_, u_, mu_))[:, None]
    return tuple(_fd_jacobian(fun, (x, mx, u, mu), w)[:, 0, :] for w in range(4))


def terminal_gradients(spec: ProblemSpec, x, mx):
    n, d = x.shape
    mx = np.broadcast_to(mx, (n, d))
    if spec.terminal_gradient is not None:
        px, pm = spec.terminal_gradient(x, mx)
        return np.broadcast_to(np.asarray(px, float), (n, d)), np.broadcast_to(np.asarray(pm, float), (n, d))
    fun = lambda x_, mx_: np.asarray(spec.terminal_cost(x_, mx_))[:, None]
    return tuple(_fd_jacobian(fun, (x, mx), w)[:, 0, :] for w in range(2))


# --- ensemble simulation ----------------------------------------------------

@dataclass
class _Trace:
    states: np.ndarray
    means: np.ndarray
    mean_controls: np.ndarray
    alive: np.ndarray          # (N, K+1)
    diverged_step: np.ndarray


def _check_rollout_inputs(spec, grid, initial_states, controls, noise):
    x0 = check_state_batch(initial_states, spec.state_dim, name="initial_states")
    n, k = x0.shape[0], grid.steps
    u = controls.controls if isinstance(controls, ControlBatch) else controls
    u = as_float_array(u, name="controls", ndim=3, shape=(n, k, spec.control_dim))
    b = noise.increments if isinstance(noise, NoiseTensor) else noise
    b = as_float_array(b, name="noise", ndim=3, shape=(n, k, spec.state_dim))
    return x0, u, b


def simulate(spec: ProblemSpec, grid: TimeGrid, x0: np.ndarray, u: np.ndarray,
             b: np.ndarray, grouping: Grouping | None = None) -> _Trace:
    n, k, d = x0.shape[0], grid.steps, spec.state_dim
    m = spec.control_dim
    g = grouping or Grouping.single(n)
    states = np.full((n, k + 1, d), np.nan)
    means = np.full((n, k + 1, d), np.nan)
    mean_u = np.full((n, k, m), np.nan)
    alive = np.zeros((n, k + 1), bool)
    dstep = np.full(n, -1)

    x = x0.copy()
    a = ~is_diverged(spec, x)
    dstep[~a] = 0
    states[:, 0] = np.where(a[:, None], x, np.nan)
    alive[:, 0] = a
    times = grid.times
    for j in range(k):
        mx = g.mean(x, a)
        means[:, j] = mx
        mu = g.mean(u[:, j], a)
        mean_u[:, j] = mu
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = _next_state(spec, times[j], grid.dt, x, mx, u[:, j], mu, b[:, j])
        newly = a & is_diverged(spec, nxt)
        dstep[newly] = j + 1
        a = a & ~newly
        x = np.where(a[:, None], nxt, np.nan)
        states[:, j + 1] = x
        alive[:, j + 1] = a
    means[:, k] = g.mean(x, a)
    return _Trace(states, means, mean_u, alive, dstep)


def rollout_ensemble(spec: ProblemSpec, grid: TimeGrid, initial_states, controls,
                     noise, grouping: Grouping | None = None) -> Ensemble:
    """Simulate all samples, recomputing population means before every step.

    Trajectories that cross the divergence threshold are frozen at NaN and
    dropped from the means from that step on.
    """
    x0, u, b = _check_rollout_inputs(spec, grid, initial_states, controls, noise)
    if grouping is None and isinstance(controls, ControlBatch):
        grouping = controls.grouping
    g = grouping or Grouping.single(x0.shape[0])
    tr = simulate(spec, grid, x0, u, b, g)
    return Ensemble(tr.states, tr.means, tr.diverged_step, g)


def _cost_from_trace(spec, grid, tr: _Trace, u) -> float:
    n, k = u.shape[0], grid.steps
    w = spec.cost_weight(grid)
    total = np.zeros(n)
    times = grid.times
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(k):
            total += w * np.asarray(spec.running_cost(
                times[j], tr.states[:, j], tr.means[:, j], u[:, j], tr.mean_controls[:, j]), float)
        total += np.asarray(spec.terminal_cost(tr.states[:, k], tr.means[:, k]), float)
        val = float(total.mean())
    return val if math.isfinite(val) else math.inf


def empirical_cost(spec: ProblemSpec, grid: TimeGrid, ensemble: Ensemble, controls) -> float:
    """Sample-average cost of a simulated ensemble; ``inf`` signals divergence."""
    u = controls.controls if isinstance(controls, ControlBatch) else np.asarray(controls, float)
    if u.shape[:2] != (ensemble.n_samples, grid.steps):
        raise ContractViolation("controls do not match the ensemble extents")
    g = ensemble.grouping or Grouping.single(ensemble.n_samples)
    alive = np.zeros((ensemble.n_samples, grid.steps + 1), bool)
    ds = ensemble.diverged_step
    steps = np.arange(grid.steps + 1)
    alive[:] = (ds[:, None] < 0) | (steps[None, :] < ds[:, None])
    mean_u = np.stack([g.mean(u[:, j], alive[:, j]) for j in range(grid.steps)], axis=1) \
        if grid.steps else np.zeros_like(u)
    tr = _Trace(ensemble.states, ensemble.sample_means, mean_u, alive, ds)
    return _cost_from_trace(spec, grid, tr, u)


def propagate_mean(spec: ProblemSpec, grid: TimeGrid, mean_x0, mean_controls) -> np.ndarray:
    """Deterministic recursion for the expected state under affine drift.

    Returns ``(K+1, d)``. The caller is responsible for the drift being affine;
    for nonlinear drift the result is only the mean-field (zero-noise) path.
    """
    d, m = spec.state_dim, spec.control_dim
    mx = np.asarray(mean_x0, dtype=float).reshape(1, d)
    mu = as_float_array(mean_controls, name="mean_controls", allow_nan=False).reshape(grid.steps, m)
    out = np.empty((grid.steps + 1, d))
    out[0] = mx[0]
    zero = np.zeros((1, d))
    times = grid.times
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(grid.steps):
            u = mu[j][None, :]
            mx = _next_state(spec, times[j], grid.dt, mx, mx, u, u, zero)
            out[j + 1] = mx[0]
    return out
