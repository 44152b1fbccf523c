"""
Dual-branch diffusion engine.

The inversion branch denoises the standard-path latent under the null
embedding and records its self-attention maps; the fusion branch denoises
from the same start point under the object text, replaying those maps for
the injected steps and scaling cross-attention values by alpha.
"""

import logging
from typing import List, Optional, Tuple

import torch

from .attention import AttentionController, InjectionOrientation
from .backends.base import DiffusionBackend
from .types import (
    AttentionCache,
    ConditioningEmbeddings,
    FusionParams,
    LatentCode,
    NoiseBank,
    SamplerSchedule,
    TextEmbedding,
    require_finite,
)

logger = logging.getLogger(__name__)


class FusionEngine:
    """One run's diffusion state over a backend: the attention cache and the noise bank.

    Instances are not shared between runs; batch workers build their own.
    """

    def __init__(
        self,
        backend: DiffusionBackend,
        seed: int = 0,
        renoise_iters: int = 0,
        orientation: InjectionOrientation = InjectionOrientation.FIRST_STEPS,
        cache_device: Optional[torch.device] = None,
    ):
        if renoise_iters < 0:
            raise ValueError(f"renoise_iters must be non-negative, got {renoise_iters}")
        self.backend = backend
        self.seed = seed
        self.renoise_iters = renoise_iters
        self.orientation = orientation
        self.cache = AttentionCache(storage_device=cache_device)
        self.noise: Optional[NoiseBank] = None

    # ----- Encoders ---------------------------------------------------------

    def encode_image(self, image: torch.Tensor) -> LatentCode:
        """Encode a (channels, size, size) image in [0, 1] into z_0."""
        expected = (self.backend.channels, self.backend.image_size, self.backend.image_size)
        if tuple(image.shape) != expected:
            raise ValueError(f"Image shape {tuple(image.shape)} does not match backend contract {expected}")
        require_finite(image, "input image")
        latent = self.backend.encode_image(image).to(self.backend.dtype)
        return LatentCode(latent, timestep=0)

    def encode_text(self, text: str) -> TextEmbedding:
        if not text:
            raise ValueError("encode_text needs a non-empty prompt; use encode_null for the null embedding")
        return self.backend.encode_text(text)

    def encode_null(self) -> TextEmbedding:
        return self.backend.encode_text("")

    def conditioning(self, text: str) -> ConditioningEmbeddings:
        """Object-text and null embeddings; an empty text conditions on the null embedding."""
        null_embedding = self.encode_null()
        text_embedding = self.encode_text(text) if text else null_embedding
        return ConditioningEmbeddings(text_embedding=text_embedding, null_embedding=null_embedding)

    def make_schedule(self, num_steps: int) -> SamplerSchedule:
        if num_steps < 1:
            raise ValueError(f"num_steps must be at least 1, got {num_steps}")
        return self.backend.make_schedule(num_steps)

    def decode(self, latent: LatentCode) -> torch.Tensor:
        image = self.backend.decode_latent(latent.data)
        return require_finite(image, "decoded image")

    # ----- Single steps -----------------------------------------------------

    def predict_noise(
        self,
        latent: LatentCode,
        t: int,
        embedding: TextEmbedding,
        controller: AttentionController,
        schedule: SamplerSchedule,
    ) -> torch.Tensor:
        """eps_theta(latent, t, embedding) under an attention policy."""
        if not 1 <= t <= schedule.num_steps:
            raise ValueError(f"Step t={t} outside [1, {schedule.num_steps}]")
        out = self.backend.denoise(latent.data, t, embedding, controller, schedule)
        if tuple(out.shape) != latent.shape:
            raise ValueError(f"Denoiser output shape {tuple(out.shape)} does not match latent {latent.shape}")
        return require_finite(out.to(latent.data.dtype), f"denoiser output at t={t}")

    def capture_noise(
        self,
        z_hat_t: LatentCode,
        t: int,
        null_embedding: TextEmbedding,
        schedule: SamplerSchedule,
        cache: Optional[AttentionCache] = None,
    ) -> torch.Tensor:
        """Inversion-branch noise prediction that records every self-attention map at step t."""
        controller = AttentionController.capture(t, schedule.num_steps, cache if cache is not None else self.cache)
        return self.predict_noise(z_hat_t, t, null_embedding, controller, schedule)

    def step_latent(
        self,
        z_t: LatentCode,
        t: int,
        denoiser_out: torch.Tensor,
        eps_t: torch.Tensor,
        schedule: SamplerSchedule,
    ) -> LatentCode:
        """nu_t z_t + beta_t eps_theta + gamma_t eps_t."""
        if tuple(eps_t.shape) != z_t.shape:
            raise ValueError(f"Noise shape {tuple(eps_t.shape)} does not match latent {z_t.shape}")
        nu, beta, gamma = schedule.coefficients(t)
        data = nu * z_t.data + beta * denoiser_out + gamma * eps_t.to(z_t.data.dtype)
        return LatentCode(data, timestep=t - 1)

    def inversion_denoise_step(
        self,
        z_hat_t: LatentCode,
        t: int,
        null_embedding: TextEmbedding,
        eps_t: torch.Tensor,
        schedule: SamplerSchedule,
        cache: Optional[AttentionCache] = None,
    ) -> LatentCode:
        """One inversion-branch step under the null embedding, recording attention maps."""
        denoiser_out = self.capture_noise(z_hat_t, t, null_embedding, schedule, cache)
        return self.step_latent(z_hat_t, t, denoiser_out, eps_t, schedule)

    def add_noise_step(
        self,
        z_prime_prev: LatentCode,
        t: int,
        null_embedding: TextEmbedding,
        eps_t: torch.Tensor,
        schedule: SamplerSchedule,
    ) -> LatentCode:
        """z'_t = (z'_{t-1} - beta_t eps_theta(z'_{t-1}, t) - gamma_t eps_t) / nu_t.

        With `renoise_iters` > 0 the denoiser is re-evaluated at the current
        estimate of z'_t and the step re-solved that many extra times.
        """
        nu, beta, gamma = schedule.coefficients(t)
        eps = eps_t.to(z_prime_prev.data.dtype)
        controller = AttentionController.plain(t, schedule.num_steps)

        estimate = z_prime_prev
        for _ in range(self.renoise_iters + 1):
            denoiser_out = self.predict_noise(estimate, t, null_embedding, controller, schedule)
            data = (z_prime_prev.data - beta * denoiser_out - gamma * eps) / nu
            estimate = LatentCode(data, timestep=t)
        return estimate

    def fusion_denoise_step(
        self,
        z_t: LatentCode,
        t: int,
        text_embedding: TextEmbedding,
        params: FusionParams,
        cache: AttentionCache,
        eps_t: torch.Tensor,
        schedule: SamplerSchedule,
    ) -> LatentCode:
        """One fusion-branch step: injected self-attention and alpha-scaled cross-attention."""
        controller = AttentionController.fuse(t, schedule.num_steps, cache, params, self.orientation)
        denoiser_out = self.predict_noise(z_t, t, text_embedding, controller, schedule)
        return self.step_latent(z_t, t, denoiser_out, eps_t, schedule)

    # ----- Trajectories -----------------------------------------------------

    def draw_noise(self, num_steps: int, shape: Tuple[int, ...], dtype: torch.dtype) -> NoiseBank:
        """Standard Gaussian noise for every step from a seeded CPU generator."""
        generator = torch.Generator().manual_seed(self.seed)
        eps = tuple(torch.randn(*shape, generator=generator, dtype=torch.float64).to(dtype) for _ in range(num_steps))
        return NoiseBank(eps)

    def invert(
        self,
        z_0: LatentCode,
        schedule: SamplerSchedule,
        null_embedding: TextEmbedding,
    ) -> Tuple[List[LatentCode], NoiseBank]:
        """Standard path z'_0 .. z'_T from z_0 and the seeded initial noise bank.

        Returns:
            Trajectory with trajectory[t] = z'_t (trajectory[0] is z_0) and the noise bank
        """
        if z_0.timestep != 0:
            raise ValueError(f"Inversion starts from a clean latent, got timestep {z_0.timestep}")
        bank = self.draw_noise(schedule.num_steps, z_0.shape, z_0.data.dtype)
        bank = NoiseBank(tuple(e.to(z_0.data.device) for e in bank))

        trajectory = [z_0]
        for t in range(1, schedule.num_steps + 1):
            trajectory.append(self.add_noise_step(trajectory[-1], t, null_embedding, bank[t], schedule))
        self.noise = bank
        logger.debug(f"Standard path computed over {schedule.num_steps} steps")
        return trajectory, bank

    def fusion_trajectory(
        self,
        z_T: LatentCode,
        noise: NoiseBank,
        text_embedding: TextEmbedding,
        params: FusionParams,
        cache: AttentionCache,
        schedule: SamplerSchedule,
    ) -> List[LatentCode]:
        """Fusion-branch latents z_T, z_{T-1}, ..., z_0."""
        if noise.num_steps != schedule.num_steps:
            raise ValueError(f"Noise bank has {noise.num_steps} steps, schedule has {schedule.num_steps}")
        if params.inject_step > schedule.num_steps:
            raise ValueError(f"inject_step={params.inject_step} outside [0, {schedule.num_steps}]")
        latents = [LatentCode(z_T.data, timestep=schedule.num_steps)]
        for t in range(schedule.num_steps, 0, -1):
            latents.append(self.fusion_denoise_step(latents[-1], t, text_embedding, params, cache, noise[t], schedule))
        return latents

    def synthesize_with_params(
        self,
        z_T: LatentCode,
        noise: NoiseBank,
        text_embedding: TextEmbedding,
        params: FusionParams,
        cache: AttentionCache,
        schedule: SamplerSchedule,
    ) -> torch.Tensor:
        """Generated image O(alpha, i): T fusion steps then decode."""
        latents = self.fusion_trajectory(z_T, noise, text_embedding, params, cache, schedule)
        logger.debug(f"Synthesized with alpha={params.alpha:.4f}, i={params.inject_step}")
        return self.decode(latents[-1])

    def reset(self) -> None:
        self.cache.clear()
        self.noise = None
