"""Monte Carlo characterization of closed-loop stochastic stability.

A start ``x0`` drawn from ``B_delta`` is CONTAINED when the closed-loop state
stays inside ``B_r`` at every step ``k = 1 .. N_T - 1`` (optionally also at
``N_T``), ESCAPED when it leaves, DIVERGED when the rollout blows up.
Containment probabilities come with Wilson score intervals.
"""

from __future__ import annotations

import enum
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._validation import check_positive, check_probability
from .closed_loop import ClosedLoopTrace, MeanMode, simulate_closed_loop
from .controller import MlpParams
from .dynamics import Grouping, NoiseTensor, ProblemSpec, TimeGrid
from .exceptions import ContractViolation

RESOLUTION_DIVISIONS = 256
WILSON_SLACK = 0.02


class Outcome(enum.IntEnum):
    CONTAINED = 0
    ESCAPED = 1
    DIVERGED = 2


class Sampling(str, enum.Enum):
    UNIFORM_BALL = "uniform_ball"
    UNIFORM_SPHERE = "uniform_sphere"
    GRID = "grid"


class DeltaFlag(str, enum.Enum):
    OK = "ok"
    NONE_FOUND = "none_found"
    NON_MONOTONE = "non_monotone"


@dataclass(frozen=True)
class Ball:
    center: np.ndarray | float = 0.0
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius >= 0:
            raise ContractViolation(f"ball radius must be >= 0, got {self.radius}")

    def contains(self, x):
        """Membership of a point (or of each row of an array of points)."""
        diff = np.asarray(x, float) - np.asarray(self.center, float)
        if diff.ndim == 0:
            return bool(abs(diff) <= self.radius)
        dist = np.linalg.norm(diff, axis=-1)
        return bool(dist <= self.radius) if dist.ndim == 0 else dist <= self.radius


@dataclass(frozen=True)
class StabilityQuery:
    """Monte Carlo settings shared by the containment estimators.

    ``ensemble_size > 1`` switches each trial to a population of that size
    scattered uniformly within ``ensemble_spread`` of the drawn start; the
    trial's outcome is the worst member outcome. This requires ENSEMBLE mode.
    """

    r: float = 200.0
    epsilon: float = 0.05
    trials: int = 1000
    sampling: Sampling = Sampling.UNIFORM_BALL
    mean_mode: MeanMode = MeanMode.DETERMINISTIC
    seed: int = 0
    antithetic: bool = True
    include_terminal: bool = False
    ensemble_size: int = 1
    ensemble_spread: float = 0.0
    label: str = ""

    def __post_init__(self):
        check_positive(self.r, name="r", strict=False)
        check_probability(self.epsilon, name="epsilon")
        check_positive(self.trials, name="trials")
        check_positive(self.ensemble_size, name="ensemble_size")
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        object.__setattr__(self, "mean_mode", MeanMode(self.mean_mode))
        if self.ensemble_size > 1 and self.mean_mode is not MeanMode.ENSEMBLE:
            raise ContractViolation("ensemble_size > 1 requires ENSEMBLE mean mode")

    def replace(self, **changes) -> "StabilityQuery":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return StabilityQuery(**kw)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["sampling"] = self.sampling.value
        out["mean_mode"] = self.mean_mode.value
        return out


@dataclass
class StabilityReport:
    delta: float
    p_hat: float
    ci: tuple
    outcomes: np.ndarray
    starts: np.ndarray
    query: StabilityQuery
    scenario: str = ""

    @property
    def trials(self) -> int:
        return int(self.outcomes.size)

    def outcome_counts(self) -> dict:
        return {o.name: int(np.sum(self.outcomes == o)) for o in Outcome}

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "r": self.query.r, "epsilon": self.query.epsilon,
                "delta": self.delta, "p_hat": self.p_hat, "ci_lo": self.ci[0], "ci_hi": self.ci[1],
                "M": self.trials, "seed": self.query.seed, "outcome_counts": self.outcome_counts()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def trials_csv(self) -> str:
        d = self.starts.shape[1]
        buf = io.StringIO()
        buf.write("trial," + ",".join(f"x0_{i}" for i in range(d)) + ",outcome\n")
        for i, (x, o) in enumerate(zip(self.starts, self.outcomes)):
            buf.write(f"{i}," + ",".join(repr(float(v)) for v in x) + f",{Outcome(o).name}\n")
        return buf.getvalue()


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ContractViolation("trials must be positive")
    if not 0 <= successes <= trials:
        raise ContractViolation("successes must lie in [0, trials]")
    z = float(norm.ppf(0.5 + confidence / 2))
    p = successes / trials
    den = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / den
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / den
    # the interval always contains p; clamp rounding at the extremes
    return min(max(centre - half, 0.0), p), max(min(centre + half, 1.0), p)


def classify(tr: ClosedLoopTrace, r: float, include_terminal: bool = False,
             center=0.0) -> np.ndarray:
    """Per-trajectory outcome codes (see ``Outcome``)."""
    k = tr.states.shape[1] - 1
    stop = k + 1 if include_terminal else k
    window = tr.states[:, 1:stop] - np.asarray(center, float)
    with np.errstate(invalid="ignore"):
        dist = np.linalg.norm(window, axis=2) if window.size else np.zeros((tr.states.shape[0], 0))
        escaped = np.any(dist > r, axis=1)
    out = np.full(tr.states.shape[0], int(Outcome.CONTAINED))
    out[escaped] = Outcome.ESCAPED
    out[tr.diverged] = Outcome.DIVERGED
    return out


def closed_loop_rollout(spec: ProblemSpec, grid: TimeGrid, params: MlpParams, x0, mean_x0, noise,
                        mean_mode=MeanMode.DETERMINISTIC, r: float = math.inf):
    """Single closed-loop trajectory; returns ``(states (K+1, d), Outcome)``.

    ``noise`` holds the ``(K, d)`` increments of this trajectory.
    """
    d = spec.state_dim
    x0 = np.asarray(x0, float).reshape(1, d)
    m0 = np.asarray(mean_x0, float).reshape(1, d)
    b = np.asarray(noise, float).reshape(1, grid.steps, d)
    tr = simulate_closed_loop(spec, grid, params, x0, m0, b, mean_mode)
    return tr.states[0], Outcome(classify(tr, r)[0])


def unit_samples(query: StabilityQuery, d: int) -> np.ndarray:
    """``(M, d)`` points in the unit ball; scaling by delta couples nested balls."""
    m = query.trials
    rng = np.random.default_rng([query.seed, 7])
    if query.sampling is Sampling.GRID:
        if d == 1:
            return np.linspace(-1.0, 1.0, m).reshape(m, 1)
        per_axis = max(2, int(math.ceil(m ** (1.0 / d))))
        axes = np.linspace(-1.0, 1.0, per_axis)
        pts = np.stack(np.meshgrid(*([axes] * d), indexing="ij"), axis=-1).reshape(-1, d)
        return pts[np.linalg.norm(pts, axis=1) <= 1.0 + 1e-12]
    half = (m + 1) // 2 if query.antithetic else m
    dirs = rng.standard_normal((half, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if query.sampling is Sampling.UNIFORM_BALL:
        dirs *= rng.uniform(size=(half, 1)) ** (1.0 / d)
    if query.antithetic:
        dirs = np.stack([dirs, -dirs], axis=1).reshape(-1, d)[:m]
    return dirs


def _noise_for(spec, grid, query, n):
    seed = int(np.random.SeedSequence([query.seed, 11]).generate_state(1)[0])
    return NoiseTensor.sample(seed, n, grid, spec.state_dim)


def _run_trials(spec, grid, params, starts, query: StabilityQuery, r: float) -> np.ndarray:
    m, d = starts.shape
    n = query.ensemble_size
    if n == 1:
        noise = _noise_for(spec, grid, query, m)
        tr = simulate_closed_loop(spec, grid, params, starts, starts, noise.increments,
                                  query.mean_mode, Grouping.blocks(m, 1))
        return classify(tr, r, query.include_terminal)
    rng = np.random.default_rng([query.seed, 13])
    offsets = rng.standard_normal((m, n, d))
    offsets /= np.linalg.norm(offsets, axis=2, keepdims=True)
    offsets *= query.ensemble_spread * rng.uniform(size=(m, n, 1)) ** (1.0 / d)
    x0 = (starts[:, None, :] + offsets).reshape(m * n, d)
    noise = _noise_for(spec, grid, query, m * n)
    tr = simulate_closed_loop(spec, grid, params, x0, x0, noise.increments, MeanMode.ENSEMBLE,
                              Grouping.blocks(m, n))
    return classify(tr, r, query.include_terminal).reshape(m, n).max(axis=1)


def estimate_containment(spec: ProblemSpec, grid: TimeGrid, params: MlpParams, delta: float,
                         query: StabilityQuery = StabilityQuery(), r: float | None = None) -> StabilityReport:
    """Empirical probability that starts drawn from ``B_delta`` stay inside ``B_r``."""
    check_positive(delta, name="delta", strict=False)
    r = query.r if r is None else r
    if delta > r:
        warnings.warn(f"delta = {delta} exceeds r = {r}", stacklevel=2)
    starts = delta * unit_samples(query, spec.state_dim)
    outcomes = _run_trials(spec, grid, params, starts, query, r)
    hits = int(np.sum(outcomes == Outcome.CONTAINED))
    m = outcomes.size
    return StabilityReport(float(delta), hits / m, wilson_interval(hits, m), outcomes, starts,
                           query.replace(r=r), query.label)


@dataclass
class DeltaSearch:
    delta: float
    flag: DeltaFlag
    evaluated: dict = field(default_factory=dict)   # delta -> (p_hat, ci_lo, passed)

    def to_dict(self) -> dict:
        return {"delta": self.delta, "flag": self.flag.value,
                "evaluated": [{"delta": k, "p_hat": v[0], "ci_lo": v[1], "passed": v[2]}
                              for k, v in sorted(self.evaluated.items())]}


def find_delta(spec: ProblemSpec, grid: TimeGrid, params: MlpParams, r: float, epsilon: float,
               query: StabilityQuery = StabilityQuery()) -> DeltaSearch:
    """Largest ``delta = j r / 256`` whose containment meets ``1 - epsilon``.

    A level passes when ``p_hat >= 1 - epsilon`` and the Wilson lower bound
    is at least ``1 - epsilon - 0.02``. Bisection assumes ``p_hat`` falls with
    delta; the queried levels are checked for consistency with that.
    """
    check_probability(epsilon, name="epsilon")
    check_positive(r, name="r")
    q = query.replace(r=r, epsilon=epsilon)
    step = r / RESOLUTION_DIVISIONS
    evaluated = {}

    def passes(j):
        rep = estimate_containment(spec, grid, params, j * step, q)
        ok = rep.p_hat >= 1 - epsilon and rep.ci[0] >= 1 - epsilon - WILSON_SLACK
        evaluated[j * step] = (rep.p_hat, rep.ci[0], bool(ok))
        return ok

    def monotone_flag():
        items = sorted(evaluated.items())
        fail_seen = False
        for _, (_, _, ok) in items:
            if ok and fail_seen:
                return DeltaFlag.NON_MONOTONE
            fail_seen |= not ok
        return DeltaFlag.OK

    if passes(RESOLUTION_DIVISIONS):
        return DeltaSearch(float(r), monotone_flag(), evaluated)
    if not passes(1):
        return DeltaSearch(0.0, DeltaFlag.NONE_FOUND, evaluated)
    lo, hi = 1, RESOLUTION_DIVISIONS
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if passes(mid):
            lo = mid
        else:
            hi = mid
    return DeltaSearch(lo * step, monotone_flag(), evaluated)


@dataclass(frozen=True)
class Scenario:
    label: str
    delta: float
    r: float = 200.0
    epsilon: float | None = None


@dataclass
class ComparisonTable:
    controllers: list
    scenarios: list
    reports: dict          # (controller, scenario label) -> StabilityReport

    def rows(self):
        for sc in self.scenarios:
            for name in self.controllers:
                yield sc, name, self.reports[(name, sc.label)]

    def to_csv(self) -> str:
        lines = ["scenario,r,delta,epsilon,controller,p_hat,ci_lo,ci_hi,M"]
        for sc, name, rep in self.rows():
            eps = "" if sc.epsilon is None else repr(sc.epsilon)
            lines.append(f"{sc.label},{sc.r!r},{sc.delta!r},{eps},{name},{rep.p_hat!r},"
                         f"{rep.ci[0]!r},{rep.ci[1]!r},{rep.trials}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(19, *(len(n) + 2 for n in self.controllers))
        head = f"{'scenario':<22}" + "".join(f"{n:>{width}}" for n in self.controllers)
        out = [head, "-" * len(head)]
        for sc in self.scenarios:
            cells = []
            for name in self.controllers:
                rep = self.reports[(name, sc.label)]
                cells.append(f"{rep.p_hat:.3f} [{rep.ci[0]:.2f},{rep.ci[1]:.2f}]".rjust(width))
            out.append(f"{sc.label + f' (d={sc.delta:g})':<22}" + "".join(cells))
        return "\n".join(out) + "\n"


def compare_controllers(spec: ProblemSpec, grid: TimeGrid, controllers: dict, scenarios,
                        query: StabilityQuery = StabilityQuery()) -> ComparisonTable:
    """Containment probability of every controller on every scenario.

    All controllers see the same starts and noise (same query seed).
    """
    if len(controllers) < 2:
        raise ContractViolation("compare_controllers needs at least two controllers")
    scenarios = list(scenarios)
    reports = {}
    for name, params in controllers.items():
        for sc in scenarios:
            q = query.replace(r=sc.r, label=sc.label,
                              epsilon=query.epsilon if sc.epsilon is None else sc.epsilon)
            reports[(name, sc.label)] = estimate_containment(spec, grid, params, sc.delta, q)
    return ComparisonTable(list(controllers), scenarios, reports)


@dataclass
class IntervalEstimate:
    lower: float
    upper: float
    r: float
    noise_draws: int
    level: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "width": self.width, "r": self.r,
                "noise_draws": self.noise_draws, "level": self.level}


def _start_contained_fraction(spec, grid, params, x0: float, noise, r, include_terminal) -> float:
    n = noise.shape[0]
    x = np.full((n, 1), float(x0))
    tr = simulate_closed_loop(spec, grid, params, x, x, noise, MeanMode.DETERMINISTIC)
    return float(np.mean(classify(tr, r, include_terminal) == Outcome.CONTAINED))


def containment_interval(spec: ProblemSpec, grid: TimeGrid, params: MlpParams, r: float = 200.0,
                         x_max: float = 400.0, noise_draws: int = 100, level: float = 0.5,
                         resolution: float = 0.5, seed: int = 0,
                         include_terminal: bool = False) -> IntervalEstimate:
    """Interval of scalar starts ``x0 = E[x0]`` kept inside ``B_r``.

    A start counts as stable when at least ``level`` of ``noise_draws`` fixed
    noise paths stay contained. Each side is located by bisection on
    ``|x0| <= x_max``, assuming stability fails monotonically outwards.
    """
    if spec.state_dim != 1:
        raise ContractViolation("containment_interval is defined for scalar states")
    seed_ = int(np.random.SeedSequence([seed, 17]).generate_state(1)[0])
    noise = NoiseTensor.sample(seed_, noise_draws, grid, 1).increments

    def edge(sign):
        ok = lambda x: _start_contained_fraction(spec, grid, params, sign * x, noise, r,
                                                 include_terminal) >= level
        if not ok(0.0):
            return 0.0
        if ok(x_max):
            return x_max
        lo, hi = 0.0, x_max
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if ok(mid) else (lo, mid)
        return lo

    return IntervalEstimate(-edge(-1.0), edge(1.0), r, noise_draws, level)
