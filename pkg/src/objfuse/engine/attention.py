"""Attention primitives for the inversion and fusion branches.

Backends route every self- and cross-attention layer through an
`AttentionController`, which decides per call whether to record, replay
or compute the attention map and how to scale the cross-attention values.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch

from .types import AttentionCache, FusionParams


class InjectionOrientation(str, Enum):
    """How the injection step i maps onto denoising steps."""

    FIRST_STEPS = "first_steps"  # the first i denoising steps (t = T, T-1, ...) replay cached maps
    LATE_TIMESTEPS = "late_timesteps"  # steps with t > i replay cached maps


class AttentionMode(str, Enum):
    PLAIN = "plain"
    CAPTURE = "capture"
    FUSE = "fuse"


def should_inject(
    t: int,
    i: int,
    num_steps: int,
    orientation: InjectionOrientation = InjectionOrientation.FIRST_STEPS,
) -> bool:
    """Whether step t replays the cached self-attention map for injection step i."""
    if orientation is InjectionOrientation.LATE_TIMESTEPS:
        return t > i
    return t > num_steps - i


def _check_qk(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> None:
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"Query dim {q.shape[-1]} does not match key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"Key length {k.shape[-2]} does not match value length {v.shape[-2]}")


def attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Softmax(Q K^T / sqrt(d)) with d the projected key/query dim; half precision is upcast."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"Query dim {q.shape[-1]} does not match key dim {k.shape[-1]}")
    compute_dtype = torch.float32 if q.dtype in (torch.float16, torch.bfloat16) else q.dtype
    scores = torch.matmul(q.to(compute_dtype), k.to(compute_dtype).transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1)


def _apply_map(attn: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return torch.matmul(attn.to(v.dtype), v)


def vanilla_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    _check_qk(q, k, v)
    return _apply_map(attention_map(q, k), v)


def injected_self_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    cached_map: Optional[torch.Tensor],
    t: int,
    i: int,
    num_steps: int,
    orientation: InjectionOrientation = InjectionOrientation.FIRST_STEPS,
) -> torch.Tensor:
    """Self-attention that replays the inversion branch's map while step t is injected.

    Args:
        q, k, v: Projected query/key/value features of the fusion branch
        cached_map: Map recorded by the inversion branch at step t
        t: Current step in [1, T]
        i: Injection step in [0, T]
        num_steps: T
        orientation: Mapping from i to injected steps

    Returns:
        M @ V with M the cached map when injecting, the fresh softmax map otherwise
    """
    _check_qk(q, k, v)
    if not should_inject(t, i, num_steps, orientation):
        return _apply_map(attention_map(q, k), v)
    if cached_map is None:
        raise ValueError(f"Injection at step {t} (i={i}) needs a cached attention map")
    expected = (q.shape[-2], k.shape[-2])
    if tuple(cached_map.shape[-2:]) != expected:
        raise ValueError(f"Cached map shape {tuple(cached_map.shape)} does not match attention shape {expected}")
    return _apply_map(cached_map.to(v.device), v)


def scaled_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, alpha: float) -> torch.Tensor:
    """Cross-attention with the value pathway scaled: Softmax(Q K^T / sqrt(d)) @ (alpha V)."""
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    _check_qk(q, k, v)
    return _apply_map(attention_map(q, k), v * alpha)


@dataclass
class AttentionController:
    """Per-call attention policy handed to `DiffusionBackend.denoise`.

    PLAIN computes vanilla attention, CAPTURE additionally records every
    self-attention map into `cache`, FUSE replays cached maps per the
    injection predicate and scales cross-attention values by alpha.
    """

    mode: AttentionMode
    step: int
    num_steps: int
    cache: Optional[AttentionCache] = None
    params: Optional[FusionParams] = None
    orientation: InjectionOrientation = InjectionOrientation.FIRST_STEPS

    def __post_init__(self) -> None:
        if self.mode is AttentionMode.CAPTURE and self.cache is None:
            raise ValueError("Capture mode needs an attention cache")
        if self.mode is AttentionMode.FUSE and (self.cache is None or self.params is None):
            raise ValueError("Fuse mode needs an attention cache and fusion params")

    @classmethod
    def plain(cls, step: int, num_steps: int) -> "AttentionController":
        return cls(AttentionMode.PLAIN, step, num_steps)

    @classmethod
    def capture(cls, step: int, num_steps: int, cache: AttentionCache) -> "AttentionController":
        return cls(AttentionMode.CAPTURE, step, num_steps, cache=cache)

    @classmethod
    def fuse(
        cls,
        step: int,
        num_steps: int,
        cache: AttentionCache,
        params: FusionParams,
        orientation: InjectionOrientation = InjectionOrientation.FIRST_STEPS,
    ) -> "AttentionController":
        return cls(AttentionMode.FUSE, step, num_steps, cache=cache, params=params, orientation=orientation)

    def self_attention(self, layer_id: str, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if self.mode is AttentionMode.CAPTURE:
            _check_qk(q, k, v)
            attn = attention_map(q, k)
            self.cache.record(self.step, layer_id, attn)
            return _apply_map(attn, v)
        if self.mode is AttentionMode.FUSE:
            i = self.params.inject_step
            cached = None
            if should_inject(self.step, i, self.num_steps, self.orientation):
                cached = self.cache.get(self.step, layer_id)
            return injected_self_attention(q, k, v, cached, self.step, i, self.num_steps, self.orientation)
        return vanilla_attention(q, k, v)

    def cross_attention(self, layer_id: str, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        alpha = self.params.alpha if self.mode is AttentionMode.FUSE else 1.0
        return scaled_cross_attention(q, k, v, alpha)
