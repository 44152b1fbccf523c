"""Deterministic 8x8 test double for the diffusion backend contract."""

import hashlib
import math
from typing import Tuple

import torch

from ..attention import AttentionController
from ..types import SamplerSchedule, TextEmbedding
from .base import DiffusionBackend

TOY_SIZE = 8
TOY_HIDDEN = 8
TOY_TEXT_TOKENS = 4
TOY_TEXT_DIM = 16
TOY_SELF_LAYER = "toy.self"
TOY_CROSS_LAYER = "toy.cross"


class ToyBackend(DiffusionBackend):
    """Identity encoder/decoder on 8x8 single-channel images and a one-block denoiser.

    The denoiser embeds each pixel as a token, runs one self-attention and one
    cross-attention block with fixed seeded weights and maps back through tanh.
    The schedule is nu = 1, beta = 0.1 and gamma = 0.05 at every step.
    """

    name = "toy"
    reconstruction_psnr_floor = 100.0

    def __init__(
        self,
        seed: int = 0,
        weight_scale: float = 0.1,
        nu: float = 1.0,
        beta: float = 0.1,
        gamma: float = 0.05,
    ):
        generator = torch.Generator().manual_seed(seed)

        def weight(*shape: int) -> torch.Tensor:
            return torch.randn(*shape, generator=generator, dtype=torch.float64) * weight_scale

        self.w_in = weight(1, TOY_HIDDEN)
        self.w_q = weight(TOY_HIDDEN, TOY_HIDDEN)
        self.w_k = weight(TOY_HIDDEN, TOY_HIDDEN)
        self.w_v = weight(TOY_HIDDEN, TOY_HIDDEN)
        self.w_cq = weight(TOY_HIDDEN, TOY_HIDDEN)
        self.w_ck = weight(TOY_TEXT_DIM, TOY_HIDDEN)
        self.w_cv = weight(TOY_TEXT_DIM, TOY_HIDDEN)
        self.w_out = weight(TOY_HIDDEN, 1)
        self._coefficients = (nu, beta, gamma)

    @property
    def image_size(self) -> int:
        return TOY_SIZE

    @property
    def channels(self) -> int:
        return 1

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return (1, TOY_SIZE, TOY_SIZE)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        if tuple(image.shape) != self.latent_shape:
            raise ValueError(f"Toy backend expects a {self.latent_shape} image, got {tuple(image.shape)}")
        return image.to(torch.float64).clone()

    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        return latent.to(torch.float64).clamp(0.0, 1.0)

    def encode_text(self, text: str) -> TextEmbedding:
        # Seed from the text so the same prompt always encodes identically
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        generator = torch.Generator().manual_seed(seed)
        tokens = torch.randn(TOY_TEXT_TOKENS, TOY_TEXT_DIM, generator=generator, dtype=torch.float64)
        return TextEmbedding(tokens=tokens, pooled=tokens.mean(dim=0))

    def make_schedule(self, num_steps: int) -> SamplerSchedule:
        nu, beta, gamma = self._coefficients
        return SamplerSchedule.constant(num_steps, nu, beta, gamma)

    def _time_embedding(self, timestep: float) -> torch.Tensor:
        freqs = torch.exp(-math.log(100.0) * torch.arange(TOY_HIDDEN, dtype=torch.float64) / TOY_HIDDEN)
        return 0.1 * torch.sin(timestep * freqs)

    def denoise(
        self,
        latent: torch.Tensor,
        t: int,
        embedding: TextEmbedding,
        controller: AttentionController,
        schedule: SamplerSchedule,
    ) -> torch.Tensor:
        if tuple(latent.shape) != self.latent_shape:
            raise ValueError(f"Toy backend expects a {self.latent_shape} latent, got {tuple(latent.shape)}")
        tokens = latent.reshape(-1, 1).to(torch.float64)
        hidden = tokens @ self.w_in + self._time_embedding(schedule.model_timestep(t))

        hidden = hidden + controller.self_attention(
            TOY_SELF_LAYER, hidden @ self.w_q, hidden @ self.w_k, hidden @ self.w_v
        )

        text = embedding.tokens.to(torch.float64)
        hidden = hidden + controller.cross_attention(
            TOY_CROSS_LAYER, hidden @ self.w_cq, text @ self.w_ck, text @ self.w_cv
        )

        return torch.tanh(hidden @ self.w_out).reshape(self.latent_shape)
