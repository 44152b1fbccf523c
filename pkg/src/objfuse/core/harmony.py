"""Harmony score and balance similarity between image and text fidelity."""

import math
from dataclasses import dataclass

from pydantic import BaseModel, Field, model_validator


class HarmonyConfig(BaseModel):
    """Score weights, the alpha search interval and the fidelity band for the injection controller."""

    k: float = Field(default=2.3, gt=0, description="Scale ratio between image and text similarity")
    beta_weight: float = Field(default=1.0, ge=0, description="Weight of the imbalance penalty")
    alpha_min: float = Field(default=0.0, description="Lower bound of the cross-attention scale")
    alpha_max: float = Field(default=2.0, description="Upper bound of the cross-attention scale")
    alpha_tol: float = Field(default=0.1, gt=0, description="Bracket width at which the search stops")
    isim_min: float = Field(default=0.45, ge=0, le=1, description="Lower edge of the fidelity band")
    isim_max: float = Field(default=0.85, ge=0, le=1, description="Upper edge of the fidelity band")

    @model_validator(mode="after")
    def _check_bounds(self) -> "HarmonyConfig":
        if not self.alpha_min < self.alpha_max:
            raise ValueError(f"alpha_min ({self.alpha_min}) must be below alpha_max ({self.alpha_max})")
        if not self.isim_min < self.isim_max:
            raise ValueError(f"isim_min ({self.isim_min}) must be below isim_max ({self.isim_max})")
        return self


def clamp_unit(value: float) -> float:
    """Clamp a raw similarity into [0, 1]; negative cosines become 0."""
    _require_finite(value, "similarity")
    return min(1.0, max(0.0, float(value)))


@dataclass(frozen=True)
class SimilarityPair:
    """Image-image (i_sim) and text-image (t_sim) similarity of one generated image."""

    i_sim: float
    t_sim: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "i_sim", clamp_unit(self.i_sim))
        object.__setattr__(self, "t_sim", clamp_unit(self.t_sim))


def _require_finite(value: float, name: str) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")


def score_F(pair: SimilarityPair, config: HarmonyConfig) -> float:
    """Harmony score: similarity sum minus the weighted imbalance.

    With beta_weight = 1 this is exactly 2 * min(I, k*T).

    Args:
        pair: Clamped similarity pair
        config: Score weights

    Returns:
        (I + k*T) - beta * |I - k*T|
    """
    _require_finite(pair.i_sim, "i_sim")
    _require_finite(pair.t_sim, "t_sim")
    weighted_text = config.k * pair.t_sim
    if config.beta_weight == 1.0:
        return 2.0 * min(pair.i_sim, weighted_text)
    return (pair.i_sim + weighted_text) - config.beta_weight * abs(pair.i_sim - weighted_text)


def balance_Bsim(pair: SimilarityPair, config: HarmonyConfig) -> float:
    """Balance similarity |I - k*T|; 0 means a perfectly even blend."""
    _require_finite(pair.i_sim, "i_sim")
    _require_finite(pair.t_sim, "t_sim")
    return abs(pair.i_sim - config.k * pair.t_sim)
