"""Differentiable quantum control: train a feedback agent by backpropagating through Heun steps."""
from ._kernels import backend
from .agent import Architecture, AgentParams, forward, init_params, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, RunConfig, load_preset, parse_config
from .integrator import StepSpec, evolve_batch, evolve_interval, heun_step
from .losses import LossWeights, loss_parts, total_loss
from .realspace import ControlSystem, RealHamiltonian, RealState, fidelity
from .systems import TaskSpec, make_task
from .trainer import TrainConfig, evaluate, make_test_set, rollout, train

__version__ = "0.1.0"

__all__ = [
    "AgentParams", "Architecture", "ConfigError", "ControlSystem", "LossWeights", "PRESETS",
    "RealHamiltonian", "RealState", "RunConfig", "StepSpec", "TaskSpec", "TrainConfig",
    "backend", "evaluate", "evolve_batch", "evolve_interval", "fidelity", "forward", "heun_step",
    "init_params", "load_checkpoint", "load_preset", "loss_parts", "make_task", "make_test_set",
    "parse_config", "rollout", "save_checkpoint", "total_loss", "train",
]
