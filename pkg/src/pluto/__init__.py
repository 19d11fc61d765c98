"""Test-time adaptation of a ViT over a store of parameter-efficient source modules."""

from .autodiff import DimensionError, NonFiniteLossError
from .engine import EngineConfig, EngineState, process_batch, run_stream
from .experiment import ExperimentConfig
from .sam import SamConfig
from .selector import SelectorConfig
from .store import ModuleRecord, ModuleStore
from .vit import VitConfig

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "EngineConfig", "EngineState", "ExperimentConfig", "ModuleRecord", "ModuleStore",
    "NonFiniteLossError", "SamConfig", "SelectorConfig", "VitConfig", "process_batch", "run_stream",
]
