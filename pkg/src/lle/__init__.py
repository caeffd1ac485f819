"""Image-adaptive low-light enhancement.

A differentiable exposure -> gamma -> bilateral pipeline whose 8 parameters
are predicted per image by a small fully convolutional network, trained
through a frozen downstream loss.
"""

__version__ = "0.1.0"

from .image import DegradeConfig, TierPreset, TIERS, load_image, save_image, synth_low_light  # noqa: E402
from .isp import LLEParams, PipelineSpec, pipeline_apply, pipeline_jvp, squash  # noqa: E402

__all__ = [
    "DegradeConfig", "LLEParams", "PipelineSpec", "TIERS", "TierPreset",
    "load_image", "pipeline_apply", "pipeline_jvp", "save_image", "squash", "synth_low_light",
]
