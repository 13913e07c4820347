"""MLLM-driven multimodal recommendation: description generation, refined
item-item graphs, and BPR-trained dual MLP projections."""

from mllmrec.config import GraphConfig, MllmClientConfig, PipelineConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["GraphConfig", "MllmClientConfig", "PipelineConfig", "TrainConfig", "__version__"]
