from dome.__version__ import version as __version__
from dome.config import TrainingConfig, load_config
from dome.exceptions import DomeError
from dome.federation import Simulation, TrainingResult, run_training
from dome.include import PACKAGE_PATH

__all__ = [
    "__version__",
    "DomeError",
    "PACKAGE_PATH",
    "Simulation",
    "TrainingConfig",
    "TrainingResult",
    "load_config",
    "run_training",
]
