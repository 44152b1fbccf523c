"""Data types shared by the dual-branch diffusion engine."""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch

from ..errors import NonFiniteError


ROW_SUM_TOLERANCE = 1e-4


def require_finite(tensor: torch.Tensor, name: str) -> torch.Tensor:
    """Raise NonFiniteError unless every entry of `tensor` is finite."""
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(f"{name} contains non-finite values")
    return tensor


@dataclass
class LatentCode:
    """A latent image at a diffusion timestep (0 is clean, T is the noisiest)."""

    data: torch.Tensor  # (channels, height, width)
    timestep: int

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"Latent must be shaped (channels, height, width), got {tuple(self.data.shape)}")
        if self.timestep < 0:
            raise ValueError(f"Latent timestep must be non-negative, got {self.timestep}")
        require_finite(self.data, f"latent at t={self.timestep}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def check_schedule(self, schedule: "SamplerSchedule") -> None:
        if self.timestep > schedule.num_steps:
            raise ValueError(f"Latent timestep {self.timestep} exceeds schedule length {schedule.num_steps}")


@dataclass(frozen=True)
class TextEmbedding:
    """Encoder output for one prompt: per-token features plus an optional pooled vector."""

    tokens: torch.Tensor  # (tokens, dim)
    pooled: Optional[torch.Tensor] = None

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[-1])


@dataclass(frozen=True)
class ConditioningEmbeddings:
    """Object-text embedding and the null-text embedding from the same encoder."""

    text_embedding: TextEmbedding
    null_embedding: TextEmbedding

    def __post_init__(self) -> None:
        if self.text_embedding.dim != self.null_embedding.dim:
            raise ValueError(
                f"Text and null embeddings disagree on dim: {self.text_embedding.dim} vs {self.null_embedding.dim}"
            )


@dataclass(frozen=True)
class SamplerSchedule:
    """Per-step sampler coefficients. Entry t-1 drives the step from timestep t to t-1."""

    nu: torch.Tensor
    beta_coef: torch.Tensor
    gamma: torch.Tensor
    model_timesteps: Optional[Tuple[float, ...]] = None
    sigmas: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        lengths = {len(self.nu), len(self.beta_coef), len(self.gamma)}
        if len(lengths) != 1:
            raise ValueError(f"Schedule coefficient arrays differ in length: {sorted(lengths)}")
        if len(self.nu) == 0:
            raise ValueError("Schedule needs at least one step")
        for name in ("nu", "beta_coef", "gamma"):
            require_finite(getattr(self, name), f"schedule {name}")
        if bool((self.nu == 0).any()):
            raise ValueError("Schedule nu must be non-zero at every step")

    @property
    def num_steps(self) -> int:
        return len(self.nu)

    def coefficients(self, t: int) -> Tuple[float, float, float]:
        """(nu_t, beta_t, gamma_t) for step t in [1, T]."""
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"Step t={t} outside [1, {self.num_steps}]")
        return float(self.nu[t - 1]), float(self.beta_coef[t - 1]), float(self.gamma[t - 1])

    @classmethod
    def constant(cls, num_steps: int, nu: float, beta_coef: float, gamma: float) -> "SamplerSchedule":
        ones = torch.ones(num_steps, dtype=torch.float64)
        return cls(nu=ones * nu, beta_coef=ones * beta_coef, gamma=ones * gamma)

    @classmethod
    def from_sigmas(
        cls,
        sigmas: Sequence[float],
        eta: float = 1.0,
        model_timesteps: Optional[Sequence[float]] = None,
    ) -> "SamplerSchedule":
        """Ancestral Euler coefficients for an epsilon-predicting model.

        One ancestral step from sigma_from to sigma_to is
        x + (sigma_down - sigma_from) * eps_theta + sigma_up * noise,
        so nu = 1, beta = sigma_down - sigma_from and gamma = sigma_up.

        Args:
            sigmas: Descending noise levels, T + 1 entries ending at the clean level
            eta: Ancestral noise scale (1 is the standard sampler)
            model_timesteps: Model timestep for each of the T steps, noisiest first
        """
        if len(sigmas) < 2:
            raise ValueError("Need at least two sigmas to build a schedule")
        num_steps = len(sigmas) - 1
        nu, beta, gamma = [], [], []
        # Step t consumes sigmas[T - t] -> sigmas[T - t + 1]
        for t in range(1, num_steps + 1):
            sigma_from = float(sigmas[num_steps - t])
            sigma_to = float(sigmas[num_steps - t + 1])
            sigma_up = 0.0
            if eta and sigma_from > 0:
                sigma_up = min(
                    sigma_to,
                    eta * math.sqrt(max(sigma_to**2 * (sigma_from**2 - sigma_to**2) / sigma_from**2, 0.0)),
                )
            sigma_down = math.sqrt(max(sigma_to**2 - sigma_up**2, 0.0))
            nu.append(1.0)
            beta.append(sigma_down - sigma_from)
            gamma.append(sigma_up)
        return cls(
            nu=torch.tensor(nu, dtype=torch.float64),
            beta_coef=torch.tensor(beta, dtype=torch.float64),
            gamma=torch.tensor(gamma, dtype=torch.float64),
            model_timesteps=tuple(float(x) for x in model_timesteps) if model_timesteps is not None else None,
            sigmas=tuple(float(s) for s in sigmas),
        )

    def sigma_from(self, t: int) -> float:
        """Noise level the model sees at step t (needs `sigmas`)."""
        if self.sigmas is None:
            raise ValueError("Schedule carries no sigmas")
        return self.sigmas[self.num_steps - t]

    def model_timestep(self, t: int) -> float:
        if self.model_timesteps is None:
            return float(t)
        return self.model_timesteps[self.num_steps - t]


@dataclass
class AttentionCache:
    """Self-attention maps recorded by the inversion branch, keyed by (step, layer)."""

    maps: Dict[Tuple[int, str], torch.Tensor] = field(default_factory=dict)
    layer_ids: List[str] = field(default_factory=list)
    storage_device: Optional[torch.device] = None

    def record(self, t: int, layer_id: str, attention_map: torch.Tensor) -> None:
        key = (t, layer_id)
        if key in self.maps:
            raise ValueError(f"Attention map for step {t}, layer {layer_id} already recorded")
        row_sums = attention_map.float().sum(dim=-1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=ROW_SUM_TOLERANCE):
            raise ValueError(f"Attention map for step {t}, layer {layer_id} is not row-stochastic")
        stored = attention_map.detach()
        if self.storage_device is not None:
            stored = stored.to(self.storage_device)
        self.maps[key] = stored
        if layer_id not in self.layer_ids:
            self.layer_ids.append(layer_id)

    def get(self, t: int, layer_id: str) -> torch.Tensor:
        try:
            return self.maps[(t, layer_id)]
        except KeyError:
            raise KeyError(f"No cached attention map for step {t}, layer {layer_id}") from None

    def steps(self) -> List[int]:
        return sorted({step for step, _ in self.maps})

    def __len__(self) -> int:
        return len(self.maps)

    def clear(self) -> None:
        self.maps.clear()
        self.layer_ids.clear()


@dataclass(frozen=True)
class FusionParams:
    """Cross-attention value scale alpha and injection step i."""

    alpha: float
    inject_step: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")
        if self.inject_step < 0:
            raise ValueError(f"inject_step must be non-negative, got {self.inject_step}")

    def check_bounds(self, alpha_min: float, alpha_max: float, num_steps: int) -> None:
        if not alpha_min <= self.alpha <= alpha_max:
            raise ValueError(f"alpha={self.alpha} outside [{alpha_min}, {alpha_max}]")
        if self.inject_step > num_steps:
            raise ValueError(f"inject_step={self.inject_step} outside [0, {num_steps}]")


@dataclass(frozen=True)
class NoiseBank:
    """Per-step sampling noise; slot t-1 holds eps_t. Immutable so every fusion pass sees the same bank."""

    eps: Tuple[torch.Tensor, ...]

    def __post_init__(self) -> None:
        if not self.eps:
            raise ValueError("Noise bank needs at least one step")
        shapes = {tuple(e.shape) for e in self.eps}
        if len(shapes) != 1:
            raise ValueError(f"Noise bank entries differ in shape: {sorted(shapes)}")
        for t, e in enumerate(self.eps, start=1):
            require_finite(e, f"noise eps_{t}")

    @property
    def num_steps(self) -> int:
        return len(self.eps)

    def __getitem__(self, t: int) -> torch.Tensor:
        if not 1 <= t <= self.num_steps:
            raise IndexError(f"Noise step t={t} outside [1, {self.num_steps}]")
        return self.eps[t - 1]

    def __iter__(self) -> Iterator[torch.Tensor]:
        return iter(self.eps)

    def with_step(self, t: int, eps_t: torch.Tensor) -> "NoiseBank":
        """Copy of the bank with slot t replaced."""
        if tuple(eps_t.shape) != tuple(self[t].shape):
            raise ValueError(f"eps_{t} shape {tuple(eps_t.shape)} does not match {tuple(self[t].shape)}")
        updated = list(self.eps)
        updated[t - 1] = eps_t.detach().clone()
        return NoiseBank(tuple(updated))

    def fingerprint(self) -> str:
        """SHA-256 over the raw noise values."""
        digest = hashlib.sha256()
        for e in self.eps:
            digest.update(e.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()
