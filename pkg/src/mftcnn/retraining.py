"""Adversarial retraining: harvest failing initial states, solve the optimal
control problem from them and retrain on base plus adversarial records."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, pgd_attack, verify_adversarial
from .controller import MlpParams, TrainConfig, TrainResult, forward_batch, train
from .dynamics import Grouping, NoiseTensor, ProblemSpec, TimeGrid
from .exceptions import ContractViolation
from .optimizer import OptimalBatch, OptimizerConfig, solve_pcd

logger = logging.getLogger(__name__)


class Provenance(enum.IntEnum):
    BASE = 0
    ADVERSARIAL = 1


@dataclass
class AugmentedDataset:
    Z: np.ndarray
    Y: np.ndarray
    provenance: np.ndarray

    @classmethod
    def from_batches(cls, base: OptimalBatch, adversarial: OptimalBatch | None = None):
        zb, yb = base.records()
        parts = [(zb, yb, Provenance.BASE)]
        if adversarial is not None:
            za, ya = adversarial.records()
            parts.append((za, ya, Provenance.ADVERSARIAL))
        return cls.from_records(*[(z, y, p) for z, y, p in parts])

    @classmethod
    def from_records(cls, *parts):
        """``parts``: ``(Z, Y, Provenance)`` triples."""
        if not parts:
            raise ContractViolation("no records")
        widths = {(z.shape[1], y.shape[1]) for z, y, _ in parts}
        if len(widths) != 1:
            raise ContractViolation(f"record schemas differ across provenance: {sorted(widths)}")
        Z = np.concatenate([z for z, _, _ in parts])
        Y = np.concatenate([y for _, y, _ in parts])
        prov = np.concatenate([np.full(len(z), int(p)) for z, _, p in parts])
        return cls(Z, Y, prov)

    def __len__(self) -> int:
        return len(self.Z)

    @property
    def n_adversarial(self) -> int:
        return int(np.sum(self.provenance == Provenance.ADVERSARIAL))

    def weights(self, adversarial_weight: float = 1.0) -> np.ndarray:
        return np.where(self.provenance == Provenance.ADVERSARIAL, adversarial_weight, 1.0)

    def loss(self, params: MlpParams, adversarial_weight: float = 1.0) -> float:
        """Combined squared loss: base sum plus weighted adversarial sum, per record."""
        w = self.weights(adversarial_weight)
        r = forward_batch(params, self.Z) - self.Y
        return float(np.dot(w, np.sum(r * r, axis=1)) / w.sum())


@dataclass
class Harvest:
    states: np.ndarray               # (count, d)
    shortfall: bool
    attacks: list = field(default_factory=list)   # per accepted state: attack seed, restart, noise seed
    attempts: int = 0

    def manifest(self) -> dict:
        return {"count": int(len(self.states)), "shortfall": self.shortfall,
                "attempts": self.attempts, "attacks": self.attacks}


def harvest_adversarials(spec: ProblemSpec, grid: TimeGrid, params: MlpParams,
                         attack_config: AttackConfig, count: int, max_attacks: int | None = None,
                         min_separation: float | None = None) -> Harvest:
    """Run attacks with fresh seeds until ``count`` distinct adversarials are found.

    Attack ``i`` uses seed ``attack_config.seed + i``. A found state is kept if
    it re-verifies under its stored noise seed and lies at least
    ``min_separation`` (default ``alpha / 100``) from every kept state.
    """
    if count < 0:
        raise ContractViolation("count must be >= 0")
    d = spec.state_dim
    if count == 0:
        return Harvest(np.zeros((0, d)), False)
    max_attacks = 4 * count if max_attacks is None else max_attacks
    sep = attack_config.alpha / 100 if min_separation is None else min_separation
    kept, info = [], []
    attempts = 0
    for i in range(max_attacks):
        if len(kept) >= count:
            break
        attempts += 1
        cfg = replace(attack_config, seed=attack_config.seed + i)
        res = pgd_attack(spec, grid, params, cfg)
        if not res.found or not verify_adversarial(spec, grid, params, res):
            continue
        x = res.adversarial
        if kept and np.min(np.linalg.norm(np.asarray(kept) - x, axis=1)) < sep:
            continue
        kept.append(x)
        info.append({"attack_seed": cfg.seed, "restart": res.restart, "noise_seed": res.noise_seed,
                     "iterations": len(res.path) - 1})
    states = np.asarray(kept, float).reshape(-1, d)
    shortfall = len(states) < count
    if shortfall:
        logger.warning("harvested %d of %d adversarials after %d attacks", len(states), count, attempts)
    return Harvest(states, shortfall, info, attempts)


def proximity_grouping(states, size: int) -> tuple:
    """Group states into populations of ``size`` neighbours.

    States are ordered lexicographically by coordinates and cut into
    consecutive chunks (the last chunk absorbs any remainder). Returns
    ``(order, grouping)``: ``states[order]`` is grouped by ``grouping``.
    """
    x = np.asarray(states, float)
    n = len(x)
    if size < 1:
        raise ContractViolation("population size must be >= 1")
    order = np.lexsort(x.T[::-1]) if n else np.zeros(0, int)
    labels = np.minimum(np.arange(n) // size, max(n // size - 1, 0))
    return order, Grouping(labels)


def solve_from_adversarials(spec: ProblemSpec, grid: TimeGrid, adversarial_states, noise: NoiseTensor,
                            optimizer_config: OptimizerConfig = OptimizerConfig(),
                            grouping: Grouping | None = None) -> OptimalBatch:
    """Optimal controls from the adversarial initial states.

    Without ``grouping`` the states form one coupled ensemble.
    """
    x0 = np.asarray(adversarial_states, float)
    if x0.size == 0:
        raise ContractViolation("no adversarial states")
    if not np.all(np.isfinite(x0)):
        raise ContractViolation("adversarial states must be finite")
    return solve_pcd(spec, grid, x0, noise, optimizer_config, grouping=grouping)


def retrain(params_init: MlpParams, augmented: AugmentedDataset, config: TrainConfig = TrainConfig(),
            adversarial_weight: float = 1.0, warm_start: bool = True, cold_seed: int = 0) -> TrainResult:
    """Train on the combined loss, warm-started from ``params_init`` by default."""
    if len(augmented) == 0:
        raise ContractViolation("augmented dataset is empty")
    start = params_init.copy()
    if not warm_start:
        start = MlpParams.initialize(params_init.dims, params_init.activations, cold_seed,
                                     params_init.input_shift, params_init.input_scale)
    return train(start, augmented.Z, augmented.Y, config, weights=augmented.weights(adversarial_weight))


def retraining_manifest(harvest: Harvest, attack_config: AttackConfig, batch: OptimalBatch | None,
                        train_config: TrainConfig, adversarial_weight: float) -> str:
    out = {"harvest": harvest.manifest(), "attack_config": attack_config.to_dict(),
           "adversarial_weight": adversarial_weight,
           "train_config": {k: getattr(train_config, k) for k in train_config.__dataclass_fields__}}
    out["train_config"]["optimizer"] = train_config.optimizer.value
    if batch is not None:
        out["solve"] = {"achieved_cost": batch.achieved_cost, "iterations": batch.iterations_used,
                        "converged": batch.converged, "noise_seed": batch.noise.seed}
    return json.dumps(out, indent=2)
