"""Noise optimizer balancing fidelity and editability of the sampling noise."""

from .optimizer import (
    BalanceConfig,
    LossReport,
    balance_inversion,
    gaussian_kl_divergence,
    gaussian_kl_loss,
    measure_noise,
    optimize_noise,
    reconstruction_grad,
    reconstruction_loss,
    reconstruction_residual,
)

__all__ = [
    "BalanceConfig",
    "LossReport",
    "balance_inversion",
    "gaussian_kl_divergence",
    "gaussian_kl_loss",
    "measure_noise",
    "optimize_noise",
    "reconstruction_grad",
    "reconstruction_loss",
    "reconstruction_residual",
]
