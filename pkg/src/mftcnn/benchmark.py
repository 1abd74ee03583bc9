"""End-to-end linear-quadratic experiment.

Stages: Riccati oracle, training data from the trajectory optimizer, NN1/NN2
training, containment sweeps, PGD attack on NN1, adversarial retraining and
the final comparison. Every random stream is keyed off a single master seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, pgd_attack, verify_adversarial
from .closed_loop import MeanMode, simulate_closed_loop
from .controller import MlpParams, TrainConfig, save, table1_nn1, table1_nn2, train
from .dynamics import Grouping, NoiseTensor
from .exceptions import ContractViolation
from .io import save_dataset
from .lq import (LqParams, grouped_optimal_cost, lq_problem, riccati_feedback_batch, riccati_solve)
from .optimizer import OptimalBatch, OptimizerConfig, solve_pcd
from .retraining import (AugmentedDataset, Provenance, harvest_adversarials, proximity_grouping,
                         retrain, retraining_manifest, solve_from_adversarials)
from .stability import (Scenario, StabilityQuery, compare_controllers, containment_interval,
                        find_delta)

logger = logging.getLogger(__name__)

ARCHITECTURES = {"nn1": table1_nn1, "nn2": table1_nn2}

# published containment probabilities, keyed by scenario label
REFERENCE_TABLE2 = {
    "S1": {"nn1": 1.0, "nn2": 1.0, "nn1_improved": 1.0},
    "S2": {"nn1": 0.45, "nn2": 0.557, "nn1_improved": 0.464},
    "S3": {"nn1": 0.3, "nn2": 0.449, "nn1_improved": 0.354},
}
REFERENCE_INTERVALS = {"nn1": 80.0, "nn1_improved": 190.0}

DEFAULT_SCENARIOS = (Scenario("S1", 20.0, 200.0, 1e-3),
                     Scenario("S2", 150.0, 200.0, 0.55),
                     Scenario("S3", 180.0, 200.0, 0.7))


def derive_seed(seed: int, *keys) -> int:
    """Independent 32-bit stream seed for a named pipeline stage."""
    words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32]
    words += [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class BenchmarkConfig:
    lq: LqParams = LqParams()
    seed: int = 0
    # training data: populations with means uniform on [mean_low, mean_high]
    n_populations: int = 100
    population_size: int = 10
    population_spread: float = 20.0
    mean_low: float = -50.0
    mean_high: float = 50.0
    generator: str = "optimizer"               # or "riccati"
    optimizer_learning_rate: float = 1.0
    architectures: tuple = ("nn1", "nn2")
    train_seeds: tuple = (0, 1, 2)             # restarts; the lowest final loss is kept
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-2
    # stability
    trials: int = 1000
    scenarios: tuple = DEFAULT_SCENARIOS
    interval_noise_draws: int = 100
    # attack and retraining
    divergence_threshold: float = 1e6
    alpha: float = 250.0
    beta: float = 1e-3
    attack_restarts: int = 20
    max_pgd_iters: int = 100
    attack_samples: int = 10
    n_adversarial: int = 500
    min_separation: float = 0.25
    adversarial_population: int = 10
    retrain_epochs: int = 100
    adversarial_weight: float = 1.0

    def __post_init__(self):
        for name in ("n_populations", "population_size", "epochs", "batch_size", "trials",
                     "attack_restarts", "max_pgd_iters", "attack_samples", "retrain_epochs",
                     "adversarial_population", "interval_noise_draws"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.n_adversarial < 0:
            raise ContractViolation("n_adversarial must be >= 0")
        if self.generator not in ("optimizer", "riccati"):
            raise ContractViolation(f"generator must be 'optimizer' or 'riccati', got {self.generator!r}")
        unknown = set(self.architectures) - set(ARCHITECTURES)
        if unknown or "nn1" not in self.architectures:
            raise ContractViolation(f"architectures must include nn1 and be among {sorted(ARCHITECTURES)}")
        if not self.train_seeds:
            raise ContractViolation("train_seeds must not be empty")
        if not self.alpha > 0 or not self.beta > 0:
            raise ContractViolation("alpha and beta must be positive")

    @property
    def n_samples(self) -> int:
        return self.n_populations * self.population_size

    @classmethod
    def smoke(cls, **kw) -> "BenchmarkConfig":
        base = dict(n_populations=2, population_size=10, trials=100, epochs=20, batch_size=32,
                    train_seeds=(0,), attack_restarts=5, max_pgd_iters=50, n_adversarial=20,
                    retrain_epochs=20, interval_noise_draws=20)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "lq":
                v = v.to_dict()
            elif f.name == "scenarios":
                v = [{**dataclasses.asdict(s), "delta": None if math.isnan(s.delta) else s.delta}
                     for s in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown benchmark config keys: {sorted(unknown)}")
        kw = dict(data)
        if "lq" in kw:
            lq_known = {f.name for f in dataclasses.fields(LqParams)}
            bad = set(kw["lq"]) - lq_known
            if bad:
                raise ContractViolation(f"unknown lq keys: {sorted(bad)}")
            kw["lq"] = LqParams(**kw["lq"])
        if "scenarios" in kw:
            kw["scenarios"] = tuple(_scenario(s, i) for i, s in enumerate(kw["scenarios"]))
        for key in ("architectures", "train_seeds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def _scenario(s, i) -> Scenario:
    if isinstance(s, Scenario):
        return s
    allowed = {"label", "delta", "r", "epsilon"}
    bad = set(s) - allowed
    if bad:
        raise ContractViolation(f"unknown scenario keys: {sorted(bad)}")
    eps = s.get("epsilon")
    if eps is not None and not 0 < eps < 1:
        raise ContractViolation(f"scenarios[{i}].epsilon must lie in (0, 1), got {eps}")
    delta = s.get("delta")
    if delta is None and eps is None:
        raise ContractViolation(f"scenarios[{i}] needs delta or epsilon")
    return Scenario(s.get("label", f"S{i + 1}"), math.nan if delta is None else float(delta),
                    float(s.get("r", 200.0)), eps)


# --- stages -------------------------------------------------------------------------

def training_population(config: BenchmarkConfig):
    """Initial states and grouping of the training populations."""
    rng = np.random.default_rng(derive_seed(config.seed, "initial"))
    means = rng.uniform(config.mean_low, config.mean_high, size=config.n_populations)
    s = config.population_spread
    x0 = np.repeat(means, config.population_size) + rng.uniform(-s, s, config.n_samples)
    return x0[:, None], Grouping.blocks(config.n_populations, config.population_size)


def generate_dataset(config: BenchmarkConfig) -> OptimalBatch:
    p = config.lq
    spec = lq_problem(p, divergence_threshold=config.divergence_threshold)
    x0, g = training_population(config)
    noise = NoiseTensor.sample(derive_seed(config.seed, "noise"), config.n_samples, p.grid, 1)
    if config.generator == "riccati":
        return riccati_feedback_batch(riccati_solve(p), spec, p.grid, x0, noise, g)
    return solve_pcd(spec, p.grid, x0, noise,
                     OptimizerConfig(learning_rate=config.optimizer_learning_rate), grouping=g)


def train_best(arch: str, Z, Y, config: BenchmarkConfig, epochs: int | None = None):
    """Train from each restart seed; keep the lowest final training loss."""
    tc_kw = dict(epochs=epochs or config.epochs, batch_size=min(config.batch_size, len(Z)),
                 learning_rate=config.learning_rate)
    best, losses = None, []
    for s in config.train_seeds:
        res = train(ARCHITECTURES[arch](derive_seed(config.seed, arch, "init", s)), Z, Y,
                    TrainConfig(shuffle_seed=derive_seed(config.seed, arch, "shuffle", s), **tc_kw))
        loss = min(res.history) if res.history else res.initial_loss
        losses.append(loss)
        if best is None or loss < best[1]:
            best = (res.params, loss)
    return best[0], losses


def fig3_rows(spec, grid, controllers: dict, starts, draws: int, seed: int):
    """Deterministic-start closed-loop fans: ``(controller, x0, draw, step, x)`` rows."""
    starts = np.asarray(starts, float)
    n = len(starts) * draws
    noise = NoiseTensor.sample(seed, n, grid, 1).increments
    x0 = np.repeat(starts, draws)[:, None]
    rows = []
    for name, params in controllers.items():
        tr = simulate_closed_loop(spec, grid, params, x0, x0, noise, MeanMode.DETERMINISTIC)
        for i in range(n):
            for k in range(grid.steps + 1):
                rows.append((name, float(x0[i, 0]), i % draws, k, float(tr.states[i, k, 0])))
    return rows


def _touch_or_ge(a, b) -> bool:
    """``a >= b`` or the two 95% intervals touch."""
    return a.p_hat >= b.p_hat or a.ci[1] >= b.ci[0]


@dataclass
class BenchmarkReport:
    summary: dict
    controllers: dict
    table: object
    dataset: OptimalBatch
    attack: object
    harvest: object
    intervals: dict
    paths: dict = field(default_factory=dict)


def _stage(name):
    def wrap(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except Exception as exc:  # label and re-raise with the original type
                try:
                    labelled = type(exc)(f"[{name}] {exc}")
                except Exception:
                    raise exc
                raise labelled from exc
        return run
    return wrap


def run_benchmark(config: BenchmarkConfig = BenchmarkConfig(), out_dir=None) -> BenchmarkReport:
    """Run the whole experiment; when ``out_dir`` is given, write every artifact there."""
    t_start = time.perf_counter()
    p = config.lq
    grid = p.grid
    spec = lq_problem(p, divergence_threshold=config.divergence_threshold)
    out = Path(out_dir) if out_dir is not None else None
    paths = {}
    timings = {}

    def write(name, text=None, writer=None):
        if out is None:
            return
        path = out / name
        if writer is not None:
            writer(path)
        else:
            path.write_text(text)
        paths[name] = str(path)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def timed(label, fn, *a, **kw):
        t = time.perf_counter()
        res = _stage(label)(fn)(*a, **kw)
        timings[label] = time.perf_counter() - t
        logger.info("stage %s done in %.1fs", label, timings[label])
        return res

    sol = timed("riccati", riccati_solve, p)
    write("riccati.json", json.dumps(sol.to_dict(), indent=2))

    batch = timed("generate", generate_dataset, config)
    oracle = grouped_optimal_cost(sol, batch.states[:, 0, 0], batch.grouping)
    Z, Y = batch.records()
    write("dataset.bin", writer=lambda path: save_dataset(path, Z, Y, grid.steps))

    controllers, train_losses = {}, {}
    for arch in config.architectures:
        params, losses = timed(f"train_{arch}", train_best, arch, Z, Y, config)
        controllers[arch] = params
        train_losses[arch] = losses
        write(f"{arch}.txt", writer=lambda path, prm=params: save(prm, path))

    query = StabilityQuery(r=200.0, trials=config.trials, seed=derive_seed(config.seed, "stability"))
    nn1 = controllers["nn1"]
    scenarios = []
    for sc in config.scenarios:
        if math.isnan(sc.delta):
            found = find_delta(spec, grid, nn1, sc.r, sc.epsilon, query)
            sc = dataclasses.replace(sc, delta=found.delta)
        scenarios.append(sc)

    attack_cfg = AttackConfig(alpha=config.alpha, beta=config.beta, max_pgd_iters=config.max_pgd_iters,
                              restarts=config.attack_restarts, seed=derive_seed(config.seed, "attack"),
                              start_radius=min(20.0, config.alpha), n_samples=config.attack_samples)
    attack = timed("attack", pgd_attack, spec, grid, nn1, attack_cfg)
    attack_verified = verify_adversarial(spec, grid, nn1, attack)
    write("attack.json", attack.to_json())
    write("attack_path.csv", attack.path_csv())

    harvest_cfg = dataclasses.replace(attack_cfg, restarts=1, seed=derive_seed(config.seed, "harvest"))
    harvest = timed("harvest", harvest_adversarials, spec, grid, nn1, harvest_cfg, config.n_adversarial,
                    min_separation=config.min_separation)
    adv_batch = None
    parts = [(Z, Y, Provenance.BASE)]
    if len(harvest.states):
        order, g_adv = proximity_grouping(harvest.states, config.adversarial_population)
        noise_adv = NoiseTensor.sample(derive_seed(config.seed, "adversarial_noise"),
                                       len(order), grid, 1)
        adv_batch = timed("solve_adversarial", solve_from_adversarials, spec, grid,
                          harvest.states[order], noise_adv,
                          OptimizerConfig(learning_rate=config.optimizer_learning_rate), g_adv)
        parts.append((*adv_batch.records(), Provenance.ADVERSARIAL))
    augmented = AugmentedDataset.from_records(*parts)
    retrain_cfg = TrainConfig(epochs=config.retrain_epochs, batch_size=min(config.batch_size, len(augmented)),
                              learning_rate=config.learning_rate,
                              shuffle_seed=derive_seed(config.seed, "retrain"))
    improved = timed("retrain", retrain, nn1, augmented, retrain_cfg, config.adversarial_weight).params
    controllers["nn1_improved"] = improved
    write("nn1_improved.txt", writer=lambda path: save(improved, path))
    write("augmented.bin", writer=lambda path: save_dataset(path, augmented.Z, augmented.Y, grid.steps,
                                                            augmented.provenance))
    write("retraining_manifest.json",
          retraining_manifest(harvest, harvest_cfg, adv_batch, retrain_cfg, config.adversarial_weight))

    table = timed("stability", compare_controllers, spec, grid, controllers, scenarios, query)
    write("table2.csv", table.to_csv())
    write("table2.txt", table.to_text())

    intervals = {name: containment_interval(spec, grid, prm, r=200.0, x_max=2 * config.alpha,
                                            noise_draws=config.interval_noise_draws,
                                            seed=derive_seed(config.seed, "interval"))
                 for name, prm in controllers.items()}
    rows = fig3_rows(spec, grid, controllers, np.linspace(-240, 240, 25), 4,
                     derive_seed(config.seed, "fig3"))
    write("fig3_trajectories.csv", "controller,x0,draw,step,x\n"
          + "".join(f"{c},{x0!r},{d},{k},{x!r}\n" for c, x0, d, k, x in rows))

    summary = _summary(config, batch, oracle, train_losses, table, scenarios, attack, attack_verified,
                       harvest, intervals, timings, time.perf_counter() - t_start)
    write("summary.json", json.dumps(summary, indent=2))
    return BenchmarkReport(summary, controllers, table, batch, attack, harvest, intervals, paths)


def _summary(config, batch, oracle, train_losses, table, scenarios, attack, attack_verified, harvest,
             intervals, timings, elapsed) -> dict:
    rep = lambda name, label: table.reports[(name, label)]
    checks = {}
    ratio = batch.achieved_cost / oracle
    checks["oracle_within_1pct"] = bool(abs(ratio - 1.0) <= 0.01)
    first = scenarios[0].label
    checks["row1_all_contained"] = all(rep(n, first).p_hat == 1.0 and rep(n, first).ci[0] >= 0.95
                                       for n in table.controllers)
    for sc in scenarios[1:]:
        if "nn2" in table.controllers:
            checks[f"nn2_ge_nn1_{sc.label}"] = _touch_or_ge(rep("nn2", sc.label), rep("nn1", sc.label))
        checks[f"improved_ge_nn1_{sc.label}"] = _touch_or_ge(rep("nn1_improved", sc.label),
                                                             rep("nn1", sc.label))
    checks["attack_found_and_reproducible"] = bool(attack.found and attack_verified)
    width = {k: v.width for k, v in intervals.items()}
    enlargement = width["nn1_improved"] / width["nn1"] if width["nn1"] > 0 else math.inf
    checks["interval_enlarged_1p5x"] = bool(enlargement >= 1.5)

    probabilities = {}
    for sc in scenarios:
        row = {}
        for name in table.controllers:
            r = rep(name, sc.label)
            target = REFERENCE_TABLE2.get(sc.label, {}).get(name)
            row[name] = {"p_hat": r.p_hat, "ci": list(r.ci), "reference": target,
                         "within_0.1_of_reference": None if target is None else abs(r.p_hat - target) <= 0.1}
        probabilities[sc.label] = {"delta": sc.delta, "r": sc.r, "epsilon": sc.epsilon, **row}
    return {
        "config": config.to_dict(),
        "checks": checks,
        "all_checks_pass": all(checks.values()),
        "dataset": {"achieved_cost": batch.achieved_cost, "oracle_cost": oracle, "ratio": ratio,
                    "iterations": batch.iterations_used, "converged": batch.converged,
                    "records": int(batch.n_samples * batch.controls.shape[1])},
        "train_losses": train_losses,
        "table2": probabilities,
        "attack": {"found": attack.found, "verified": attack_verified,
                   "stop_reason": attack.stop_reason.value, "restart": attack.restart,
                   "iterations": len(attack.path) - 1,
                   "adversarial": None if attack.adversarial is None else attack.adversarial.tolist()},
        "harvest": {"count": int(len(harvest.states)), "shortfall": harvest.shortfall,
                    "attempts": harvest.attempts,
                    "min_abs": float(np.min(np.abs(harvest.states))) if len(harvest.states) else None,
                    "max_abs": float(np.max(np.abs(harvest.states))) if len(harvest.states) else None},
        "intervals": {k: v.to_dict() for k, v in intervals.items()},
        "interval_enlargement": enlargement,
        "reference_intervals": REFERENCE_INTERVALS,
        "timings_s": timings,
        "elapsed_s": elapsed,
    }
