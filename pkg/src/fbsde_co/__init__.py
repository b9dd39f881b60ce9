"""Cross-optimization training of leader/follower networks for controlled FBSDEs."""
__version__ = "0.1.0"

from .diffcore import ContractError, NonFiniteError, ShapeError, Tape, backward, grad_check
from .estimator import ClassicalSolver, COSolver, PenaltySolver
from .nets import CheckpointFormatError, MLPConfig, Network, load_checkpoint, save_checkpoint
from .optim import DivergenceError, OptimizerConfig
from .problems import (FBSDEControlProblem, MarketParams, analytic_followonly_problem,
                       classical_equivalent, get_preset, paper_market, recursive_utility_linear,
                       recursive_utility_nonlinear)
from .sde import SimulationBlowupError, TimeGrid, sample_brownian, simulate
from .trainer import (ConfigError, TrainingConfig, classical_train, co_train, kappa_sweep,
                      penalty_train, update_schedule)

__all__ = [
    "COSolver", "CheckpointFormatError", "ClassicalSolver", "ConfigError", "ContractError",
    "DivergenceError", "FBSDEControlProblem", "MLPConfig", "MarketParams", "Network",
    "NonFiniteError", "OptimizerConfig", "PenaltySolver", "ShapeError", "SimulationBlowupError",
    "Tape", "TimeGrid", "TrainingConfig", "analytic_followonly_problem", "backward",
    "classical_equivalent", "classical_train", "co_train", "get_preset", "grad_check",
    "kappa_sweep", "load_checkpoint", "paper_market", "penalty_train", "recursive_utility_linear",
    "recursive_utility_nonlinear", "sample_brownian", "save_checkpoint", "simulate",
    "update_schedule",
]
