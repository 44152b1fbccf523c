"""Derivative-free control: golden-section search over alpha and the banded injection-step controller."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Tuple

from ..errors import EvaluationError
from .harmony import HarmonyConfig

logger = logging.getLogger(__name__)

# Golden ratio
PHI = (1 + math.sqrt(5)) / 2

TieBreak = Literal["symmetric", "left"]


@dataclass
class SearchTrace:
    """Every objective evaluation of one search, in call order."""

    evaluations: List[Tuple[float, float]] = field(default_factory=list)
    alpha_star: Optional[float] = None
    converged: bool = False

    @property
    def evaluation_count(self) -> int:
        return len(self.evaluations)

    def best(self) -> Tuple[float, float]:
        """Evaluated (alpha, F) with the highest score."""
        if not self.evaluations:
            raise ValueError("Search trace is empty")
        return max(self.evaluations, key=lambda item: item[1])


def golden_section_search(
    objective: Callable[[float], float],
    a: float,
    b: float,
    tol: float,
    tie_break: TieBreak = "symmetric",
    max_evaluations: Optional[int] = None,
) -> Tuple[float, SearchTrace]:
    """Maximize a unimodal objective on [a, b] by golden-section bracketing.

    Interior points are alpha1 = b - (b - a)/phi and alpha2 = a + (b - a)/phi.
    If F(alpha1) > F(alpha2) the bracket becomes [a, alpha2], otherwise
    [alpha1, b]. On an exact tie the default ``symmetric`` rule keeps
    [alpha1, alpha2]; ``left`` applies the else-branch (a = alpha1) literally.
    The surviving interior point is reused, so every alpha is evaluated once.

    Args:
        objective: Callback alpha -> score
        a: Lower bound
        b: Upper bound
        tol: Stop once b - a <= tol
        tie_break: Rule for F(alpha1) == F(alpha2)
        max_evaluations: Optional evaluation budget; exhausting it leaves converged False

    Returns:
        Midpoint of the final bracket and the search trace
    """
    if not a < b:
        raise ValueError(f"Search bracket requires a < b, got a={a}, b={b}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    trace = SearchTrace()
    memo: Dict[float, float] = {}

    def evaluate(alpha: float) -> float:
        if alpha in memo:
            return memo[alpha]
        try:
            value = float(objective(alpha))
        except EvaluationError:
            raise
        except Exception as e:
            raise EvaluationError(f"Objective failed at alpha={alpha}: {e}", alpha=alpha) from e
        if not math.isfinite(value):
            raise EvaluationError(f"Objective returned {value} at alpha={alpha}", alpha=alpha)
        memo[alpha] = value
        trace.evaluations.append((alpha, value))
        logger.debug(f"F({alpha:.4f}) = {value:.4f}")
        return value

    def budget_left(needed: int) -> bool:
        return max_evaluations is None or trace.evaluation_count + needed <= max_evaluations

    if b - a <= tol:
        trace.alpha_star = (a + b) / 2
        trace.converged = True
        return trace.alpha_star, trace

    if not budget_left(2):
        trace.alpha_star = (a + b) / 2
        return trace.alpha_star, trace

    c = b - (b - a) / PHI
    d = a + (b - a) / PHI
    fc = evaluate(c)
    fd = evaluate(d)

    converged = True
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            if b - a <= tol:
                break
            if not budget_left(1):
                converged = False
                break
            c = b - (b - a) / PHI
            fc = evaluate(c)
        elif fc < fd or tie_break == "left":
            a, c, fc = c, d, fd
            if b - a <= tol:
                break
            if not budget_left(1):
                converged = False
                break
            d = a + (b - a) / PHI
            fd = evaluate(d)
        else:
            a, b = c, d
            if b - a <= tol:
                break
            if not budget_left(2):
                converged = False
                break
            c = b - (b - a) / PHI
            d = a + (b - a) / PHI
            fc = evaluate(c)
            fd = evaluate(d)

    trace.alpha_star = (a + b) / 2
    trace.converged = converged
    logger.info(
        f"Golden-section search finished: alpha*={trace.alpha_star:.4f} "
        f"after {trace.evaluation_count} evaluations (converged={converged})"
    )
    return trace.alpha_star, trace


def adjust_injection_step(
    isim_at: Callable[[int], float],
    i_init: int,
    i_min: int,
    i_max: int,
    max_iter: int,
    config: HarmonyConfig,
) -> int:
    """Move the injection step one unit at a time until image similarity is inside the fidelity band.

    Larger i means more injected steps and higher image similarity, so a
    similarity below the band moves i up and one above the band moves it down.

    Args:
        isim_at: Callback i -> image similarity of the fused result
        i_init: Starting injection step
        i_min: Lowest allowed step
        i_max: Highest allowed step
        max_iter: Probe budget
        config: Supplies isim_min and isim_max

    Returns:
        The first in-band step, or the last step reached when the budget runs out
    """
    if not i_min <= i_init <= i_max:
        raise ValueError(f"Injection bounds violated: need {i_min} <= {i_init} <= {i_max}")
    if max_iter < 0:
        raise ValueError(f"max_iter must be non-negative, got {max_iter}")

    i = i_init
    for iteration in range(max_iter):
        try:
            isim = float(isim_at(i))
        except EvaluationError:
            raise
        except Exception as e:
            raise EvaluationError(f"Image similarity probe failed at i={i}: {e}", inject_step=i) from e
        if not math.isfinite(isim):
            raise EvaluationError(f"Image similarity probe returned {isim} at i={i}", inject_step=i)

        if config.isim_min <= isim <= config.isim_max:
            logger.info(f"Injection step {i} in band (I_sim={isim:.3f}) after {iteration + 1} probes")
            return i

        step = 1 if isim < config.isim_min else -1
        next_i = min(i_max, max(i_min, i + step))
        logger.debug(f"I_sim({i})={isim:.3f} outside [{config.isim_min}, {config.isim_max}], moving to {next_i}")
        if next_i == i:
            logger.warning(f"Injection step pinned at bound {i} with I_sim={isim:.3f}")
            return i
        i = next_i

    return i
