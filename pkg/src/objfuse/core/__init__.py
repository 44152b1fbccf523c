"""Model-free math: harmony score, balance similarity and the derivative-free controllers."""

from .harmony import HarmonyConfig, SimilarityPair, balance_Bsim, clamp_unit, score_F
from .search import PHI, SearchTrace, adjust_injection_step, golden_section_search

__all__ = [
    "HarmonyConfig",
    "SimilarityPair",
    "SearchTrace",
    "PHI",
    "balance_Bsim",
    "clamp_unit",
    "score_F",
    "golden_section_search",
    "adjust_injection_step",
]
