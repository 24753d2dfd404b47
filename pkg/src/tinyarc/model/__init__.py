"""TinyLM: a small pre-norm decoder-only transformer over grid tokens."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import DEFAULT_CONFIG, MICRO_CONFIG, PRESETS, TINY_CONFIG, ModelConfig
from .core import Params, count_params, cross_entropy, forward, init_model, param_shapes, params_digest
from .lm import TinyLM, generate_greedy, seq_logprob, token_logprobs
from .optim import OptHyper, OptState, init_opt_state, lr_at, opt_step
from .train import Batch, TrainConfig, TrainLog, collate, grads, pretrain

__all__ = [
    "Batch", "Checkpoint", "DEFAULT_CONFIG", "MICRO_CONFIG", "ModelConfig", "OptHyper", "OptState",
    "PRESETS", "Params", "TINY_CONFIG", "TinyLM", "TrainConfig", "TrainLog", "collate", "count_params",
    "cross_entropy", "forward", "generate_greedy", "grads", "init_model", "init_opt_state",
    "load_checkpoint", "lr_at", "opt_step", "param_shapes", "params_digest", "pretrain",
    "save_checkpoint", "seq_logprob", "token_logprobs",
]
