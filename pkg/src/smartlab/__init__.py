"""Design and analysis tools for a four-arm, two-stage SMART."""
__version__ = "0.1.0"

from .core import (Arm, ActionKind, ParticipantRecord, ResponderCategory, Stage2Action,
                   classify_responder, feasible_stage2, read_records, write_records)
from .datagen import DgmConfig, dense_dgm, simulate_arrays, simulate_trial, sparse_dgm
from .dtr import (DesignSpec, OptimalPolicy, QLearner, optimal_value, policy_value, q_learn,
                  value_ratio)
from .imbalance import ImbalanceConfig, run_imbalance
from .lasso import LassoCD, LassoCVCD, lasso_fit
from .power import PowerConfig, confirm_at, run_power
from .randomizer import MinimizationConfig, MinimizationState, SmartRandomizer, assign

__all__ = [
    "Arm", "ActionKind", "ParticipantRecord", "ResponderCategory", "Stage2Action",
    "classify_responder", "feasible_stage2", "read_records", "write_records",
    "DgmConfig", "dense_dgm", "simulate_arrays", "simulate_trial", "sparse_dgm",
    "DesignSpec", "OptimalPolicy", "QLearner", "optimal_value", "policy_value", "q_learn",
    "value_ratio", "ImbalanceConfig", "run_imbalance", "LassoCD", "LassoCVCD", "lasso_fit",
    "PowerConfig", "confirm_at", "run_power", "MinimizationConfig", "MinimizationState",
    "SmartRandomizer", "assign",
]
