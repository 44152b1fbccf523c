"""Backend adapter contract for the diffusion engine."""

from abc import ABC, abstractmethod
from typing import Tuple

import torch

from ..attention import AttentionController
from ..types import SamplerSchedule, TextEmbedding


class DiffusionBackend(ABC):
    """A latent diffusion model reduced to what the fusion engine needs.

    Implementations route every self-attention layer through
    `controller.self_attention` and every cross-attention layer through
    `controller.cross_attention`; layer ids must be stable across calls.
    """

    name: str = "base"
    # Exclusive backends hold one model instance that cannot serve concurrent calls
    exclusive: bool = False
    # Minimum decode(encode(x)) PSNR in dB that the adapter guarantees
    reconstruction_psnr_floor: float = 0.0

    @property
    @abstractmethod
    def image_size(self) -> int:
        """Square pixel size the adapter expects from `encode_image`."""

    @property
    @abstractmethod
    def channels(self) -> int:
        """Pixel channels the adapter expects (3 for RGB)."""

    @property
    @abstractmethod
    def latent_shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) of a latent."""

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32

    @property
    def device(self) -> torch.device:
        return torch.device("cpu")

    @abstractmethod
    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """Map a (channels, size, size) image in [0, 1] to a latent."""

    @abstractmethod
    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """Map a latent back to a (channels, size, size) image in [0, 1]."""

    @abstractmethod
    def encode_text(self, text: str) -> TextEmbedding:
        """Encode a prompt; the empty string gives the null embedding."""

    @abstractmethod
    def make_schedule(self, num_steps: int) -> SamplerSchedule:
        """Sampler coefficients for a run of `num_steps` denoising steps."""

    @abstractmethod
    def denoise(
        self,
        latent: torch.Tensor,
        t: int,
        embedding: TextEmbedding,
        controller: AttentionController,
        schedule: SamplerSchedule,
    ) -> torch.Tensor:
        """Noise prediction eps_theta(latent, t, embedding) under the given attention policy."""
