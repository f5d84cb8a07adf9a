"""Multi-task regression with hard and soft parameter sharing on a small numpy autodiff."""
from .architectures import ModelConfig, build_layer_plan, build_model, forward, predict
from .autodiff import Tape, Tensor
from .data import SyntheticSpec, generate_synthetic
from .evalstats import rmse, select_and_run, skill_score
from .training import TrainSchedule, train

__version__ = "0.1.0"
