"""Step-aware policy optimization for tiny masked diffusion language models."""
from .errors import ConfigError, ContractError, InvalidTokenError, NumericError, SapoError, SequenceTooLongError
from .estimator import SAPOPolicy, check_tasks
from .model import ModelParams, forward, init_params, load_params, save_params
from .sampler import DecodePolicy, DenoiseTrace, generate, generate_batch, one_shot_complete
from .tasks import TaskInstance, generate_task, make_dataset, outcome_reward
from .trainer import TrainConfig, run_training
from .vocab import VOCAB, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "InvalidTokenError", "NumericError", "SapoError", "SequenceTooLongError",
    "SAPOPolicy", "check_tasks", "ModelParams", "forward", "init_params", "load_params", "save_params",
    "DecodePolicy", "DenoiseTrace", "generate", "generate_batch", "one_shot_complete", "TaskInstance",
    "generate_task", "make_dataset", "outcome_reward", "TrainConfig", "run_training", "VOCAB", "Vocabulary",
]
