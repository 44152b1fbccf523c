"""Kruskal-Wallis H test for comparing methods over per-pair scores."""

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

# Exact permutation p-values are offered below this per-group size
EXACT_MAX_GROUP_SIZE = 10


@dataclass(frozen=True)
class KruskalResult:
    statistic: float
    pvalue: float
    df: int
    underflow: bool = False
    degenerate: bool = False
    method: str = "chi2"

    def __iter__(self) -> Iterator[float]:
        yield self.statistic
        yield self.pvalue


def _h_statistic(groups: Sequence[np.ndarray]) -> float:
    """Tie-corrected H from mean-rank deviations: 12/(N(N+1)) * sum n_i (Rbar_i - (N+1)/2)^2 / C."""
    pooled = np.concatenate(groups)
    n_total = pooled.size
    ranks = stats.rankdata(pooled)
    correction = stats.tiecorrect(ranks)
    if correction == 0:
        return 0.0
    center = (n_total + 1) / 2.0
    total = 0.0
    offset = 0
    for group in groups:
        group_ranks = ranks[offset : offset + group.size]
        offset += group.size
        total += group.size * (group_ranks.mean() - center) ** 2
    return float(12.0 / (n_total * (n_total + 1)) * total / correction)


def kruskal_wallis_h(
    *groups: Sequence[float],
    exact: bool = False,
    n_resamples: int = 9999,
    seed: int = 0,
) -> KruskalResult:
    """Rank-based H statistic with average ranks for ties and a chi-squared p-value.

    Args:
        *groups: Two or more non-empty groups of finite values
        exact: Use a permutation p-value when every group has fewer than 10 values
        n_resamples: Permutation budget (exhaustive when the partitions fit)
        seed: Seed for sampled permutations

    Returns:
        KruskalResult, unpackable as (H, p)
    """
    if len(groups) < 2:
        raise ValueError(f"Kruskal-Wallis needs at least 2 groups, got {len(groups)}")
    arrays = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    for index, array in enumerate(arrays):
        if array.size == 0:
            raise ValueError(f"Group {index} is empty")
        if not np.all(np.isfinite(array)):
            raise ValueError(f"Group {index} contains non-finite values")
    df = len(arrays) - 1

    pooled = np.concatenate(arrays)
    if np.all(pooled == pooled[0]):
        logger.warning("All values identical across groups: H = 0, p = 1")
        return KruskalResult(statistic=0.0, pvalue=1.0, df=df, degenerate=True)

    h = _h_statistic(arrays)

    if exact and all(a.size < EXACT_MAX_GROUP_SIZE for a in arrays):
        result = stats.permutation_test(
            arrays,
            lambda *samples: _h_statistic(samples),
            permutation_type="independent",
            alternative="greater",
            n_resamples=n_resamples,
            vectorized=False,
            random_state=seed,
        )
        return KruskalResult(statistic=h, pvalue=float(result.pvalue), df=df, method="permutation")

    pvalue = float(stats.chi2.sf(h, df))
    underflow = pvalue == 0.0
    if underflow:
        pvalue = float(np.nextafter(0.0, 1.0))
        logger.warning(f"p-value underflow at H={h:.2f}; reporting the smallest positive float")
    return KruskalResult(statistic=h, pvalue=pvalue, df=df, underflow=underflow)
