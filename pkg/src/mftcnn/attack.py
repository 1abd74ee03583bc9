"""Projected gradient ascent on the closed-loop cost over initial states.

Starting inside a small ball, the initial state is pushed uphill on the
closed-loop cost ``J(y)`` and projected back onto the search ball of radius
``alpha``. The walk stops at the first iterate whose rollout diverges.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_positive
from .closed_loop import (MeanMode, closed_loop_adjoint, closed_loop_cost, simulate_closed_loop)
from .controller import MlpParams
from .dynamics import NoiseTensor, ProblemSpec, TimeGrid
from .exceptions import ContractViolation
from .optimizer import GradientMethod
from .stability import Ball, Outcome, classify


class StopReason(str, enum.Enum):
    DIVERGED = "diverged"
    MAX_ITERS = "max_iters"
    STALLED = "stalled"
    NONFINITE = "nonfinite"


class AttackGoal(str, enum.Enum):
    DIVERGED = "diverged"
    ESCAPED = "escaped"


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 250.0
    beta: float = 1e-3
    max_pgd_iters: int = 100
    restarts: int = 20
    seed: int = 0
    gradient_method: GradientMethod = GradientMethod.ADJOINT
    start_radius: float = 20.0     # y0 is drawn uniformly from this ball
    n_samples: int = 10            # noise copies averaged in the objective
    mean_mode: MeanMode = MeanMode.DETERMINISTIC
    goal: AttackGoal = AttackGoal.DIVERGED
    escape_radius: float = 200.0   # only used with goal=ESCAPED
    stall_tol: float = 1e-9

    def __post_init__(self):
        check_positive(self.alpha, name="alpha")
        check_positive(self.beta, name="beta", strict=False)
        check_positive(self.max_pgd_iters, name="max_pgd_iters")
        check_positive(self.restarts, name="restarts")
        check_positive(self.n_samples, name="n_samples")
        check_positive(self.start_radius, name="start_radius", strict=False)
        for name, enum_cls in (("gradient_method", GradientMethod), ("mean_mode", MeanMode),
                               ("goal", AttackGoal)):
            object.__setattr__(self, name, enum_cls(getattr(self, name)))

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("gradient_method", "mean_mode", "goal"):
            out[key] = getattr(self, key).value
        return out


@dataclass
class AttackResult:
    found: bool
    adversarial: np.ndarray | None
    path: list
    objectives: list
    stop_reason: StopReason
    restart: int
    noise_seed: int
    n_samples: int
    config: AttackConfig = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "found": self.found,
            "adversarial": None if self.adversarial is None else self.adversarial.tolist(),
            "path": [np.asarray(y).tolist() for y in self.path],
            "objectives": [float(v) for v in self.objectives],
            "stop_reason": self.stop_reason.value,
            "restart": self.restart,
            "noise_seed": self.noise_seed,
            "n_samples": self.n_samples,
            "config": None if self.config is None else self.config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def path_csv(self) -> str:
        d = len(np.atleast_1d(self.path[0])) if self.path else 0
        lines = ["iter," + ",".join(f"y{i}" for i in range(d)) + ",objective"]
        for m, (y, j) in enumerate(zip(self.path, self.objectives)):
            lines.append(f"{m}," + ",".join(repr(float(v)) for v in np.atleast_1d(y)) + f",{float(j)!r}")
        return "\n".join(lines) + "\n"


def project_ball(x, ball: Ball) -> np.ndarray:
    """Euclidean projection onto a closed ball."""
    if not ball.radius > 0:
        raise ContractViolation("projection needs a positive radius")
    x = np.asarray(x, dtype=float)
    c = np.broadcast_to(np.asarray(ball.center, dtype=float), x.shape)
    if ball.contains(x):
        return x.copy()
    unit = (x - c) / np.linalg.norm(x - c)
    out = c + ball.radius * unit
    # rounding may land a few ulps outside; pull in by a growing margin
    shrink = 2.0**-52
    while not ball.contains(out):
        out = c + ball.radius * (1.0 - shrink) * unit
        shrink *= 2.0
    return out


def _copies(y, n):
    return np.repeat(np.asarray(y, float).reshape(1, -1), n, axis=0)


def attack_objective(spec: ProblemSpec, grid: TimeGrid, params: MlpParams, initial_states,
                     noise, mean_mode=MeanMode.DETERMINISTIC, saturate: bool = True) -> float:
    """Closed-loop sample-average cost from ``initial_states`` (``(n, d)``).

    In DETERMINISTIC mode each trajectory starts with ``E[x0] = x0``; diverged
    trajectories count as ``SATURATED_COST``.
    """
    x0 = np.asarray(initial_states, float)
    if x0.ndim == 1:
        x0 = x0.reshape(-1, spec.state_dim)
    b = noise.increments if isinstance(noise, NoiseTensor) else np.asarray(noise, float)
    tr = simulate_closed_loop(spec, grid, params, x0, x0, b, mean_mode)
    return closed_loop_cost(spec, grid, tr, saturate)


def input_gradient(spec: ProblemSpec, grid: TimeGrid, params: MlpParams, x0, noise,
                   mean_mode=MeanMode.DETERMINISTIC,
                   method: GradientMethod = GradientMethod.ADJOINT) -> np.ndarray:
    """Gradient of the closed-loop objective with respect to the common initial state.

    All noise copies start at ``x0`` (with ``E[x0] = x0``). Reverse mode runs
    through the dynamics, the mean recursion and the controller; when some
    copy diverges the saturated objective is differentiated numerically.
    """
    y = np.asarray(x0, float).reshape(spec.state_dim)
    b = noise.increments if isinstance(noise, NoiseTensor) else np.asarray(noise, float)
    n = b.shape[0]
    method = GradientMethod(method)
    if method is GradientMethod.ADJOINT:
        tr = simulate_closed_loop(spec, grid, params, _copies(y, n), _copies(y, n), b, mean_mode,
                                  keep=True)
        if not tr.diverged.any():
            gx, gm = closed_loop_adjoint(spec, grid, params, tr)
            return (gx + gm).sum(axis=0)
    grad = np.empty_like(y)
    for i in range(y.size):
        h = 1e-6 * (1.0 + abs(y[i]))
        e = np.zeros_like(y)
        e[i] = h
        fp = attack_objective(spec, grid, params, _copies(y + e, n), b, mean_mode)
        fm = attack_objective(spec, grid, params, _copies(y - e, n), b, mean_mode)
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rollout_outcomes(spec, grid, params, x0, noise, mean_mode=MeanMode.DETERMINISTIC,
                     r: float = math.inf):
    """Outcome of each noise copy started at ``x0`` (``E[x0] = x0``)."""
    b = noise.increments if isinstance(noise, NoiseTensor) else np.asarray(noise, float)
    n = b.shape[0]
    y = np.asarray(x0, float).reshape(spec.state_dim)
    tr = simulate_closed_loop(spec, grid, params, _copies(y, n), _copies(y, n), b, mean_mode)
    return classify(tr, r)


def _goal_reached(outcomes, goal: AttackGoal) -> bool:
    if goal is AttackGoal.DIVERGED:
        return bool(np.all(outcomes == Outcome.DIVERGED))
    return bool(np.all(outcomes != Outcome.CONTAINED))


def restart_noise(spec: ProblemSpec, grid: TimeGrid, config: AttackConfig, restart: int) -> NoiseTensor:
    seed = int(np.random.SeedSequence([config.seed, restart]).generate_state(1)[0])
    return NoiseTensor.sample(seed, config.n_samples, grid, spec.state_dim)


def _sample_ball(rng, d, radius):
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.uniform() ** (1.0 / d)


def pgd_attack(spec: ProblemSpec, grid: TimeGrid, params: MlpParams,
               config: AttackConfig = AttackConfig(), start=None) -> AttackResult:
    """Run up to ``config.restarts`` projected ascent walks; return the first success
    (lowest restart index) or, failing that, the walk reaching the largest objective."""
    ball = Ball(np.zeros(spec.state_dim), config.alpha)
    r_goal = config.escape_radius if config.goal is AttackGoal.ESCAPED else math.inf
    best = None
    for restart in range(config.restarts):
        rng = np.random.default_rng([config.seed, restart, 1])
        noise = restart_noise(spec, grid, config, restart)
        if start is not None and restart == 0:
            y = np.asarray(start, float).reshape(spec.state_dim)
        else:
            y = _sample_ball(rng, spec.state_dim, config.start_radius)
        y = project_ball(y, ball)
        path = [y.copy()]
        objs = [attack_objective(spec, grid, params, _copies(y, config.n_samples), noise,
                                 config.mean_mode)]
        reason = StopReason.MAX_ITERS
        found = _goal_reached(rollout_outcomes(spec, grid, params, y, noise, config.mean_mode, r_goal),
                              config.goal)
        if found:
            reason = StopReason.DIVERGED
        else:
            for _ in range(config.max_pgd_iters):
                grad = input_gradient(spec, grid, params, y, noise, config.mean_mode,
                                      config.gradient_method)
                if not np.all(np.isfinite(grad)):
                    reason = StopReason.NONFINITE
                    break
                y_new = project_ball(y + config.beta * grad, ball)
                assert ball.contains(y_new), "PGD iterate left the search ball"
                step = float(np.linalg.norm(y_new - y))
                y = y_new
                path.append(y.copy())
                objs.append(attack_objective(spec, grid, params, _copies(y, config.n_samples), noise,
                                             config.mean_mode))
                outcomes = rollout_outcomes(spec, grid, params, y, noise, config.mean_mode, r_goal)
                if _goal_reached(outcomes, config.goal):
                    found = True
                    reason = StopReason.DIVERGED
                    break
                if step <= config.stall_tol * (1.0 + float(np.linalg.norm(y))):
                    reason = StopReason.STALLED
                    break
        result = AttackResult(found, y.copy() if found else None, path, objs, reason, restart,
                              noise.seed, config.n_samples, config)
        if found:
            return result
        if best is None or max(objs) > max(best.objectives):
            best = result
    return best


def verify_adversarial(spec, grid, params, result: AttackResult) -> bool:
    """Re-roll the stored adversarial with its stored noise seed."""
    if not result.found:
        return False
    cfg = result.config
    noise = NoiseTensor.sample(result.noise_seed, result.n_samples, grid, spec.state_dim)
    r_goal = cfg.escape_radius if cfg.goal is AttackGoal.ESCAPED else math.inf
    return _goal_reached(rollout_outcomes(spec, grid, params, result.adversarial, noise,
                                          cfg.mean_mode, r_goal), cfg.goal)
