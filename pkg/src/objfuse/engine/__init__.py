"""Dual-branch diffusion engine: types, attention control, backends and the fusion engine."""

from .attention import (
    AttentionController,
    AttentionMode,
    InjectionOrientation,
    attention_map,
    injected_self_attention,
    scaled_cross_attention,
    should_inject,
    vanilla_attention,
)
from .backends import DiffusionBackend, ToyBackend
from .diffusion import FusionEngine
from .types import (
    AttentionCache,
    ConditioningEmbeddings,
    FusionParams,
    LatentCode,
    NoiseBank,
    SamplerSchedule,
    TextEmbedding,
)

__all__ = [
    "AttentionCache",
    "AttentionController",
    "AttentionMode",
    "ConditioningEmbeddings",
    "DiffusionBackend",
    "FusionEngine",
    "FusionParams",
    "InjectionOrientation",
    "LatentCode",
    "NoiseBank",
    "SamplerSchedule",
    "TextEmbedding",
    "ToyBackend",
    "attention_map",
    "injected_self_attention",
    "scaled_cross_attention",
    "should_inject",
    "vanilla_attention",
]
