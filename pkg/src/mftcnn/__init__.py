"""Neural feedback controllers for discretized mean-field-type control.

Trajectory data come from a sample-average optimal control solver; a small
MLP is fitted to them, then its closed-loop stability is estimated by Monte
Carlo, attacked through the initial condition and improved by retraining on
the adversarial starts.
"""

from .attack import AttackConfig, AttackResult, input_gradient, pgd_attack, project_ball
from .closed_loop import MeanMode, closed_loop_cost, simulate_closed_loop
from .controller import (MlpParams, NeuralController, TrainConfig, backward, forward, table1_nn1,
                         table1_nn2, train)
from .dynamics import (DiscretizationMode, Ensemble, Grouping, NoiseTensor, ProblemSpec, TimeGrid,
                       empirical_cost, rollout_ensemble, step)
from .exceptions import ContractViolation, DivergedCost, NonConvergence
from .lq import LqParams, lq_problem, riccati_optimal_cost, riccati_solve
from .optimizer import OptimalBatch, OptimizerConfig, cost_gradient, solve_pcd
from .retraining import AugmentedDataset, harvest_adversarials, retrain, solve_from_adversarials
from .stability import (Ball, StabilityQuery, StabilityReport, compare_controllers, containment_interval,
                        estimate_containment, find_delta)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "AugmentedDataset", "Ball", "ContractViolation",
    "DiscretizationMode", "DivergedCost", "Ensemble", "Grouping", "LqParams", "MeanMode",
    "MlpParams", "NeuralController", "NoiseTensor", "NonConvergence", "OptimalBatch",
    "OptimizerConfig", "ProblemSpec", "StabilityQuery", "StabilityReport", "TimeGrid",
    "TrainConfig", "backward", "closed_loop_cost", "compare_controllers", "containment_interval",
    "cost_gradient", "empirical_cost", "estimate_containment", "find_delta", "forward",
    "harvest_adversarials", "input_gradient", "lq_problem", "pgd_attack", "project_ball",
    "retrain", "riccati_optimal_cost", "riccati_solve", "rollout_ensemble", "simulate_closed_loop",
    "solve_from_adversarials", "solve_pcd", "step", "table1_nn1", "table1_nn2", "train",
]
