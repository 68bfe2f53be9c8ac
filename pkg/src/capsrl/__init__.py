"""Constraint-adaptive policy switching for offline safe RL on finite CMDPs."""

from .caps import CapsPolicy, PolicySet, caps_policy
from .cmdp import (Cmdp, make_chain3, make_env, make_gridworld3, make_hazard_gridworld,
                   make_random_cmdp)
from .dataset import BehaviorSpec, OfflineDataset, generate_dataset
from .evaluation import EvalConfig, evaluate, run_ablation
from .oracle import check_admissible, solve, verify_theorem_bound
from .trainers import TrainConfig, lambda_schedule, oracle_artifacts, train

__version__ = "0.1.0"
