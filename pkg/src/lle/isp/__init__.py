"""Differentiable low-light ISP: exposure, gamma and bilateral smoothing."""

from .backend import BACKEND, get_num_threads, set_num_threads
from .ops import (
    GAMMA_EPS,
    LOWER,
    N_PARAMS,
    PARAM_NAMES,
    UPPER,
    DomainError,
    LLEParams,
    PipelineSpec,
    TangentBundle,
    bilateral,
    exposure,
    gamma,
    pipeline_apply,
    pipeline_jvp,
    squash,
    squash_vector,
    unsquash,
)

__all__ = [
    "BACKEND", "GAMMA_EPS", "LOWER", "N_PARAMS", "PARAM_NAMES", "UPPER",
    "DomainError", "LLEParams", "PipelineSpec", "TangentBundle",
    "bilateral", "exposure", "gamma", "get_num_threads", "pipeline_apply", "pipeline_jvp",
    "set_num_threads", "squash", "squash_vector", "unsquash",
]
