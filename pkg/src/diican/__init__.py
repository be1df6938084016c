"""Dual-level inter/intra-cycle attention network for joint SOC, SOH and RUL
estimation of lithium-ion cells, on a small numpy autodiff engine."""

from .dataset import CellHistory, SyntheticFleetConfig, generate_synthetic_fleet, load_fleet
from .model import DIICAN, ModelConfig
from .train import TrainConfig, run_loocv, train_health, train_soc

__all__ = [
    "CellHistory", "SyntheticFleetConfig", "generate_synthetic_fleet", "load_fleet",
    "DIICAN", "ModelConfig", "TrainConfig", "run_loocv", "train_health", "train_soc",
]
__version__ = "0.1.0"
