"""
SDXL-Turbo reference backend.
Lazy-loads the diffusers pipeline once, swaps every attention processor for one
that defers to the engine's AttentionController, and exposes the ancestral Euler
schedule as per-step (nu, beta, gamma) coefficients.
"""

import logging
import math
from typing import Any, Optional, Tuple

import torch

from ...errors import BackendUnavailableError
from ...settings import settings
from ..attention import AttentionController
from ..types import SamplerSchedule, TextEmbedding
from .base import DiffusionBackend
from .hardware import get_memory_info, init_hardware

logger = logging.getLogger(__name__)

SDXL_IMAGE_SIZE = 512
SDXL_LATENT_CHANNELS = 4
SDXL_LATENT_SCALE = 8


class ControlledAttnProcessor:
    """diffusers attention processor that hands Q/K/V to the backend's active controller.

    Self-attention layers (`attn1`) go to `controller.self_attention`, cross-attention
    layers (`attn2`) to `controller.cross_attention`. Projections, head split and
    output projection follow the stock processor.
    """

    def __init__(self, backend: "SdxlTurboBackend", layer_id: str):
        self.backend = backend
        self.layer_id = layer_id

    def __call__(
        self,
        attn: Any,
        hidden_states: torch.Tensor,
        encoder_hidden_states: Optional[torch.Tensor] = None,
        attention_mask: Optional[torch.Tensor] = None,
        temb: Optional[torch.Tensor] = None,
        **kwargs: Any,
    ) -> torch.Tensor:
        residual = hidden_states
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch_size, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch_size, channel, height * width).transpose(1, 2)

        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        is_cross = encoder_hidden_states is not None
        if encoder_hidden_states is None:
            encoder_hidden_states = hidden_states
        elif attn.norm_cross:
            encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)

        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        key = attn.head_to_batch_dim(attn.to_k(encoder_hidden_states))
        value = attn.head_to_batch_dim(attn.to_v(encoder_hidden_states))

        controller = self.backend.active_controller
        if is_cross:
            hidden_states = controller.cross_attention(self.layer_id, query, key, value)
        else:
            hidden_states = controller.self_attention(self.layer_id, query, key, value)
        hidden_states = attn.batch_to_head_dim(hidden_states.to(query.dtype))

        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)

        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(batch_size, channel, height, width)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


class SdxlTurboBackend(DiffusionBackend):
    """SDXL-Turbo with an ancestral Euler scheduler at 512x512 (latents 4x64x64)."""

    name = "sdxl"
    exclusive = True
    reconstruction_psnr_floor = 24.0

    def __init__(self, model_id: Optional[str] = None, device: Optional[str] = None):
        self.model_id = model_id or settings.DIFFUSION_MODEL
        self._device_preference = device
        self._device: Optional[torch.device] = None
        self._pipe = None
        self._controller: Optional[AttentionController] = None

    @property
    def image_size(self) -> int:
        return SDXL_IMAGE_SIZE

    @property
    def channels(self) -> int:
        return 3

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        side = SDXL_IMAGE_SIZE // SDXL_LATENT_SCALE
        return (SDXL_LATENT_CHANNELS, side, side)

    @property
    def device(self) -> torch.device:
        if self._device is None:
            self._device = init_hardware(self._device_preference)
        return self._device

    @property
    def active_controller(self) -> AttentionController:
        if self._controller is None:
            raise RuntimeError("Attention processor called outside a denoise call")
        return self._controller

    @property
    def pipe(self) -> Any:
        """The diffusers pipeline, loaded on first use."""
        if self._pipe is None:
            self._pipe = self._load()
        return self._pipe

    def _load(self) -> Any:
        logger.info(f"Loading diffusion model {self.model_id} on {self.device}...")
        try:
            from diffusers import EulerAncestralDiscreteScheduler, StableDiffusionXLPipeline

            model_dtype = torch.float16 if self.device.type == "cuda" else torch.float32
            pipe = StableDiffusionXLPipeline.from_pretrained(
                self.model_id,
                torch_dtype=model_dtype,
                variant="fp16" if model_dtype == torch.float16 else None,
                use_safetensors=True,
                low_cpu_mem_usage=True,
                cache_dir=str(settings.MODEL_CACHE_DIR) if settings.MODEL_CACHE_DIR else None,
            )
            pipe.scheduler = EulerAncestralDiscreteScheduler.from_config(pipe.scheduler.config)
            pipe.to(self.device)
            # The SDXL VAE overflows in half precision
            pipe.vae.to(torch.float32)
            processors = {
                name: ControlledAttnProcessor(self, name.removesuffix(".processor"))
                for name in pipe.unet.attn_processors
            }
            pipe.unet.set_attn_processor(processors)
            pipe.set_progress_bar_config(disable=True)
        except Exception as e:
            raise BackendUnavailableError(f"Failed to load diffusion model {self.model_id}: {e}") from e
        logger.info(f"✓ Diffusion model {self.model_id} loaded ({len(processors)} attention layers hooked)")
        if self.device.type == "cuda":
            memory = get_memory_info()
            logger.info(f"GPU memory after load: {memory['gpu_allocated']:.1f}GB of {memory['gpu_total']:.1f}GB")
        return pipe

    @torch.no_grad()
    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        expected = (3, SDXL_IMAGE_SIZE, SDXL_IMAGE_SIZE)
        if tuple(image.shape) != expected:
            raise ValueError(f"SDXL backend expects a {expected} image, got {tuple(image.shape)}")
        vae = self.pipe.vae
        pixels = (image.to(self.device, torch.float32) * 2.0 - 1.0).unsqueeze(0)
        latent = vae.encode(pixels).latent_dist.mean * vae.config.scaling_factor
        return latent[0].float()

    @torch.no_grad()
    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        vae = self.pipe.vae
        pixels = vae.decode(latent.to(self.device, torch.float32).unsqueeze(0) / vae.config.scaling_factor).sample
        return (pixels[0] / 2.0 + 0.5).clamp(0.0, 1.0).float()

    @torch.no_grad()
    def encode_text(self, text: str) -> TextEmbedding:
        prompt_embeds, _, pooled_embeds, _ = self.pipe.encode_prompt(
            prompt=text,
            device=self.device,
            num_images_per_prompt=1,
            do_classifier_free_guidance=False,
        )
        return TextEmbedding(tokens=prompt_embeds[0], pooled=pooled_embeds[0])

    def make_schedule(self, num_steps: int) -> SamplerSchedule:
        scheduler = self.pipe.scheduler
        scheduler.set_timesteps(num_steps, device="cpu")
        sigmas = [float(s) for s in scheduler.sigmas]
        timesteps = [float(t) for t in scheduler.timesteps]
        return SamplerSchedule.from_sigmas(sigmas, model_timesteps=timesteps)

    @torch.no_grad()
    def denoise(
        self,
        latent: torch.Tensor,
        t: int,
        embedding: TextEmbedding,
        controller: AttentionController,
        schedule: SamplerSchedule,
    ) -> torch.Tensor:
        unet = self.pipe.unet
        sigma = schedule.sigma_from(t)
        model_input = (latent.to(self.device, torch.float32) / math.sqrt(sigma**2 + 1)).unsqueeze(0).to(unet.dtype)
        time_ids = torch.tensor(
            [[SDXL_IMAGE_SIZE, SDXL_IMAGE_SIZE, 0, 0, SDXL_IMAGE_SIZE, SDXL_IMAGE_SIZE]],
            device=self.device,
            dtype=unet.dtype,
        )
        added_cond_kwargs = {"text_embeds": embedding.pooled.unsqueeze(0).to(unet.dtype), "time_ids": time_ids}

        self._controller = controller
        try:
            noise_pred = unet(
                model_input,
                schedule.model_timestep(t),
                encoder_hidden_states=embedding.tokens.unsqueeze(0).to(unet.dtype),
                added_cond_kwargs=added_cond_kwargs,
                return_dict=False,
            )[0]
        finally:
            self._controller = None
        return noise_pred[0].float()
