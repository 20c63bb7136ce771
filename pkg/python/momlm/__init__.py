"""Mixture-of-Modules language models on a small numpy autodiff core."""

__version__ = "0.1.0"

from .analysis import AssemblyTrace, load_stats, transition_matrix
from .assembly import AssemblyPolicy, MomChunk, forward_step, run_chunk
from .checkpoint import load_model, save_model
from .config import RunConfig, load_run_config
from .corpus import SequenceSampler, corpus_load, unigram_entropy
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    CorpusError,
    DimensionError,
    MomError,
    ParseError,
    TrainingError,
)
from .model import (
    ChunkPlan,
    MomConfig,
    MomModel,
    lm_forward,
    lm_loss,
    parse_chunk_plan,
    parse_mom_config,
)
from .modules import ModelConfig, ModuleKind, ModulePool
from .profiler import estimate_flops, estimate_memory, estimate_params, parse_dims
from .routing import RouterKind, route
from .tensor import Rng, Tensor, no_grad
from .training import TrainConfig, decompose_vanilla, lr_at, train_phase

__all__ = (
    "AssemblyPolicy",
    "AssemblyTrace",
    "CheckpointError",
    "ChunkPlan",
    "ConfigurationError",
    "ContractError",
    "CorpusError",
    "DimensionError",
    "ModelConfig",
    "ModuleKind",
    "ModulePool",
    "MomChunk",
    "MomConfig",
    "MomError",
    "MomModel",
    "ParseError",
    "Rng",
    "RouterKind",
    "RunConfig",
    "SequenceSampler",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "__version__",
    "corpus_load",
    "decompose_vanilla",
    "estimate_flops",
    "estimate_memory",
    "estimate_params",
    "forward_step",
    "lm_forward",
    "lm_loss",
    "load_model",
    "load_run_config",
    "load_stats",
    "lr_at",
    "no_grad",
    "parse_chunk_plan",
    "parse_dims",
    "parse_mom_config",
    "route",
    "run_chunk",
    "save_model",
    "train_phase",
    "transition_matrix",
    "unigram_entropy",
)
