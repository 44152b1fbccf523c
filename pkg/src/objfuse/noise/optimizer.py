"""Per-step noise optimization trading reconstruction fidelity against Gaussian-likeness."""

import logging
import math
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, Field

from ..engine.types import LatentCode, NoiseBank, SamplerSchedule, TextEmbedding
from ..errors import NonFiniteError

if TYPE_CHECKING:
    from ..engine.diffusion import FusionEngine

logger = logging.getLogger(__name__)

# Variance floor for constant noise draws
VARIANCE_FLOOR = 1e-12

TensorLike = Union[LatentCode, torch.Tensor]


class BalanceConfig(BaseModel):
    """Stopping ratio and descent settings for the noise optimizer."""

    lambda_ratio: float = Field(default=125.0, gt=0, description="Target ratio L_r / L_n")
    step_size: float = Field(default=0.1, gt=0, description="Step length along the normalized gradient")
    max_inner_iters: int = Field(default=50, ge=1, description="Iteration cap per step")


class LossReport(BaseModel):
    """Loss values for one timestep after optimization."""

    t: int
    l_r: float = Field(ge=0)
    l_n: float = Field(ge=0)
    ratio: Optional[float] = None  # None when l_n is 0
    iterations_used: int = 0
    capped: bool = False
    stalled: bool = False
    degenerate_noise: bool = False


def _data(x: TensorLike) -> torch.Tensor:
    return x.data if isinstance(x, LatentCode) else x


def reconstruction_residual(
    z_prime_prev: TensorLike,
    z_hat_t: TensorLike,
    denoiser_out: torch.Tensor,
    eps_t: torch.Tensor,
    schedule: SamplerSchedule,
    t: int,
) -> torch.Tensor:
    """r = z'_{t-1} - (nu_t z_t + beta_t eps_theta + gamma_t eps_t)."""
    target = _data(z_prime_prev)
    current = _data(z_hat_t)
    shapes = {tuple(target.shape), tuple(current.shape), tuple(denoiser_out.shape), tuple(eps_t.shape)}
    if len(shapes) != 1:
        raise ValueError(f"Residual operands disagree on shape: {sorted(shapes)}")
    nu, beta, gamma = schedule.coefficients(t)
    return target.double() - (nu * current.double() + beta * denoiser_out.double() + gamma * eps_t.double())


def reconstruction_loss(
    z_prime_prev: TensorLike,
    z_hat_t: TensorLike,
    denoiser_out: torch.Tensor,
    eps_t: torch.Tensor,
    schedule: SamplerSchedule,
    t: int,
) -> float:
    """Euclidean norm of the reconstruction residual over the flattened latent."""
    residual = reconstruction_residual(z_prime_prev, z_hat_t, denoiser_out, eps_t, schedule, t)
    return float(torch.linalg.vector_norm(residual))


def reconstruction_grad(
    z_prime_prev: TensorLike,
    z_hat_t: TensorLike,
    denoiser_out: torch.Tensor,
    eps_t: torch.Tensor,
    schedule: SamplerSchedule,
    t: int,
) -> torch.Tensor:
    """Closed-form gradient of L_r with respect to eps_t: -gamma_t r / ||r|| (zero at r = 0)."""
    residual = reconstruction_residual(z_prime_prev, z_hat_t, denoiser_out, eps_t, schedule, t)
    norm = float(torch.linalg.vector_norm(residual))
    if norm == 0.0:
        return torch.zeros_like(residual)
    _, _, gamma = schedule.coefficients(t)
    return -gamma * residual / norm


def gaussian_kl_divergence(eps_t: torch.Tensor) -> Tuple[float, bool]:
    """KL from the moment-matched Gaussian of the entries of eps_t to N(0, 1).

    Uses the population mean and variance: 0.5 * (mu^2 + var - 1 - ln var).

    Returns:
        The divergence and whether the variance had to be floored
    """
    flat = eps_t.detach().reshape(-1).double()
    if flat.numel() < 2:
        raise ValueError(f"KL estimate needs at least 2 entries, got {flat.numel()}")
    mu = float(flat.mean())
    var = float(flat.var(unbiased=False))
    degenerate = var < VARIANCE_FLOOR
    if degenerate:
        var = VARIANCE_FLOOR
    value = 0.5 * (mu**2 + var - 1.0 - math.log(var))
    return max(value, 0.0), degenerate


def gaussian_kl_loss(eps_t: torch.Tensor) -> float:
    return gaussian_kl_divergence(eps_t)[0]


def _ratio(l_r: float, l_n: float) -> float:
    if l_n > 0:
        return l_r / l_n
    return 0.0 if l_r == 0 else math.inf


def optimize_noise(
    z_hat_t: TensorLike,
    z_prime_prev: TensorLike,
    eps_t: torch.Tensor,
    schedule: SamplerSchedule,
    t: int,
    config: BalanceConfig,
    denoiser_out: torch.Tensor,
) -> Tuple[torch.Tensor, LossReport]:
    """Descend L_r along its normalized gradient until L_r / L_n <= lambda.

    The step length is capped at ||r|| / gamma^2, the exact line minimizer,
    so L_r never increases. L_n only gates the loop.

    Args:
        z_hat_t: Inversion-branch latent at step t
        z_prime_prev: Standard-path latent z'_{t-1}
        eps_t: Initial noise for step t (not modified)
        schedule: Sampler coefficients
        t: Step in [1, T]
        config: Ratio target and descent settings
        denoiser_out: eps_theta(z_hat_t, t, null embedding), fixed during the loop

    Returns:
        Optimized noise and its loss report
    """
    eps = eps_t.detach().clone()
    _, _, gamma = schedule.coefficients(t)

    def measure(candidate: torch.Tensor) -> Tuple[float, float, bool]:
        l_r = reconstruction_loss(z_prime_prev, z_hat_t, denoiser_out, candidate, schedule, t)
        l_n, degenerate = gaussian_kl_divergence(candidate)
        if not (math.isfinite(l_r) and math.isfinite(l_n)):
            raise NonFiniteError(f"Non-finite balance loss at t={t}: L_r={l_r}, L_n={l_n}")
        return l_r, l_n, degenerate

    l_r, l_n, degenerate = measure(eps)
    ratio = _ratio(l_r, l_n)
    iterations = 0
    stalled = False

    while ratio > config.lambda_ratio and iterations < config.max_inner_iters:
        if gamma == 0.0:
            # eps_t does not enter the residual
            stalled = True
            logger.warning(f"Noise optimization at t={t} stalled: gamma is 0")
            break
        residual = reconstruction_residual(z_prime_prev, z_hat_t, denoiser_out, eps, schedule, t)
        norm = float(torch.linalg.vector_norm(residual))
        if norm == 0.0:
            break
        grad = -gamma * residual / norm
        step = min(config.step_size, norm / gamma**2)
        eps = (eps.double() - step * grad).to(eps_t.dtype)
        iterations += 1
        l_r, l_n, degenerate = measure(eps)
        ratio = _ratio(l_r, l_n)

    capped = not stalled and ratio > config.lambda_ratio
    if capped:
        logger.warning(f"Noise optimization at t={t} hit the iteration cap (ratio={ratio:.2f})")
    if degenerate:
        logger.warning(f"Noise at t={t} has near-zero variance; KL computed with a floored variance")
    logger.debug(f"t={t}: L_r={l_r:.4f} L_n={l_n:.4f} ratio={ratio:.2f} after {iterations} iterations")

    report = LossReport(
        t=t,
        l_r=l_r,
        l_n=l_n,
        ratio=ratio if l_n > 0 else None,
        iterations_used=iterations,
        capped=capped,
        stalled=stalled,
        degenerate_noise=degenerate,
    )
    return eps, report


def measure_noise(
    z_hat_t: TensorLike,
    z_prime_prev: TensorLike,
    eps_t: torch.Tensor,
    schedule: SamplerSchedule,
    t: int,
    denoiser_out: torch.Tensor,
) -> LossReport:
    """Loss report of eps_t as is, without descent."""
    l_r = reconstruction_loss(z_prime_prev, z_hat_t, denoiser_out, eps_t, schedule, t)
    l_n, degenerate = gaussian_kl_divergence(eps_t)
    return LossReport(t=t, l_r=l_r, l_n=l_n, ratio=_ratio(l_r, l_n) if l_n > 0 else None, degenerate_noise=degenerate)


def balance_inversion(
    engine: "FusionEngine",
    trajectory: Sequence[LatentCode],
    noise: NoiseBank,
    null_embedding: TextEmbedding,
    schedule: SamplerSchedule,
    config: BalanceConfig,
    optimize: bool = True,
) -> Tuple[NoiseBank, List[LossReport], LatentCode]:
    """Run the inversion branch from z'_T down to step 0, optimizing eps_t at every step.

    Steps run t = T..1 because each z_{t-1} depends on the optimized eps_t.
    The engine's attention cache receives the self-attention maps of every step.
    With `optimize=False` the recorded noise is kept and only measured.

    Returns:
        Optimized noise bank, loss reports ordered by t, and the reconstructed z_0
    """
    num_steps = schedule.num_steps
    if len(trajectory) != num_steps + 1:
        raise ValueError(f"Trajectory has {len(trajectory)} latents, expected {num_steps + 1}")

    z_hat = trajectory[num_steps]
    reports: List[LossReport] = []
    for t in range(num_steps, 0, -1):
        denoiser_out = engine.capture_noise(z_hat, t, null_embedding, schedule)
        if optimize:
            eps_star, report = optimize_noise(z_hat, trajectory[t - 1], noise[t], schedule, t, config, denoiser_out)
        else:
            eps_star = noise[t]
            report = measure_noise(z_hat, trajectory[t - 1], eps_star, schedule, t, denoiser_out)
        noise = noise.with_step(t, eps_star)
        z_hat = engine.step_latent(z_hat, t, denoiser_out, eps_star, schedule)
        reports.append(report)

    reports.sort(key=lambda r: r.t)
    capped = sum(r.capped for r in reports)
    logger.info(f"Balanced inversion over {num_steps} steps done ({capped} capped)")
    return noise, reports, z_hat
