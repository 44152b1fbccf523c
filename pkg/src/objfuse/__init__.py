"""objfuse: fuse an object image with an object text inside a diffusion process."""

__version__ = "0.1.0"

from .core import HarmonyConfig, SimilarityPair, balance_Bsim, golden_section_search, score_F
from .errors import (
    BackendUnavailableError,
    EvaluationError,
    ManifestError,
    NonFiniteError,
    ObjfuseError,
    StageError,
)

__all__ = [
    "__version__",
    "HarmonyConfig",
    "SimilarityPair",
    "balance_Bsim",
    "golden_section_search",
    "score_F",
    "BackendUnavailableError",
    "EvaluationError",
    "ManifestError",
    "NonFiniteError",
    "ObjfuseError",
    "StageError",
]
