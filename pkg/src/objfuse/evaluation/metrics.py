"""Metric tables over run reports: per-method means, method comparisons and trace exports."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..core.harmony import HarmonyConfig, SimilarityPair, balance_Bsim, score_F
from ..errors import EvaluationError
from ..pipeline.config import RunReport
from .stats import kruskal_wallis_h

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["DINO-I", "CLIP-T", "AES", "HPS", "Fscore", "Bsim"]

# Raw column -> table column
_RAW_TO_TABLE = {
    "i_sim": "DINO-I",
    "t_sim": "CLIP-T",
    "aes": "AES",
    "hps": "HPS",
    "fscore": "Fscore",
    "bsim": "Bsim",
}
_TABLE_TO_RAW = {v: k for k, v in _RAW_TO_TABLE.items()}

RAW_COLUMNS = [
    "method",
    "image_id",
    "text_id",
    "image_category",
    "text_category",
    "i_sim",
    "t_sim",
    "aes",
    "hps",
    "fscore",
    "bsim",
    "reported_fscore",
    "reported_bsim",
]

# Tolerance for the report-vs-recomputed cross-check
CROSS_CHECK_TOL = 1e-9


@dataclass
class MetricTable:
    """Per-pair raw values plus the (k, beta) used to score them."""

    raw: pd.DataFrame
    k: float
    beta_weight: float
    mismatches: List[str] = field(default_factory=list)

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(self.raw["method"]))

    def summary(self, by: str = "method") -> pd.DataFrame:
        """Column means per group, in table column order; all-missing optional columns stay NaN."""
        grouped = self.raw.groupby(by, sort=False)[list(_RAW_TO_TABLE)].mean()
        table = grouped.rename(columns=_RAW_TO_TABLE)[TABLE_COLUMNS]
        table.index.name = by
        return table

    def scores_of_means(self) -> pd.DataFrame:
        """Fscore and Bsim of each method's mean (DINO-I, CLIP-T) pair."""
        config = HarmonyConfig(k=self.k, beta_weight=self.beta_weight)
        rows = {}
        for method, group in self.raw.groupby("method", sort=False):
            pair = SimilarityPair(float(group["i_sim"].mean()), float(group["t_sim"].mean()))
            rows[method] = {"Fscore": score_F(pair, config), "Bsim": balance_Bsim(pair, config)}
        return pd.DataFrame.from_dict(rows, orient="index")

    def to_text(self, by: str = "method") -> str:
        """Aligned plain-text rendering; missing optional metrics render empty."""
        return self.summary(by).to_string(float_format=lambda x: f"{x:.3f}", na_rep="")

    def to_dict(self) -> Dict[str, Any]:
        summary = self.summary()
        rows = {
            method: {col: (None if pd.isna(val) else float(val)) for col, val in row.items()}
            for method, row in summary.iterrows()
        }
        return {
            "k": self.k,
            "beta_weight": self.beta_weight,
            "columns": TABLE_COLUMNS,
            "rows": rows,
            "pairs": int(len(self.raw)),
            "mismatches": list(self.mismatches),
        }

    def values(self, method: str, metric: str) -> np.ndarray:
        """Per-pair values of one method; `metric` may be a table or raw column name."""
        column = _TABLE_TO_RAW.get(metric, metric)
        return self.raw.loc[self.raw["method"] == method, column].dropna().to_numpy(dtype=np.float64)

    @classmethod
    def concat(cls, tables: Sequence["MetricTable"]) -> "MetricTable":
        if not tables:
            raise ValueError("No tables to concatenate")
        k, beta = tables[0].k, tables[0].beta_weight
        if any(t.k != k or t.beta_weight != beta for t in tables):
            raise ValueError("Tables scored with different (k, beta) cannot be concatenated; rescore first")
        raw = pd.concat([t.raw for t in tables], ignore_index=True)
        return cls(raw=raw, k=k, beta_weight=beta, mismatches=[m for t in tables for m in t.mismatches])


def _pair_label(report: RunReport) -> str:
    return f"{report.method}:{report.image_id}__{report.text_id}"


def aggregate_metrics(
    reports: Iterable[RunReport],
    config: Optional[HarmonyConfig] = None,
    method: Optional[str] = None,
) -> MetricTable:
    """Build a metric table from successful run reports.

    Fscore and Bsim are recomputed per pair from (I_sim, T_sim) with the given
    (k, beta) and cross-checked against the values stored in each report when
    the report was scored with the same (k, beta).

    Args:
        reports: Run reports; failed runs are skipped
        config: Score weights, default k = 2.3 and beta = 1
        method: Overrides the method name stored in the reports

    Returns:
        MetricTable with one raw row per pair
    """
    config = config or HarmonyConfig()
    rows = []
    mismatches: List[str] = []
    skipped = 0
    for report in reports:
        if report.status != "ok" or report.i_sim is None or report.t_sim is None:
            skipped += 1
            continue
        pair = SimilarityPair(report.i_sim, report.t_sim)
        fscore = score_F(pair, config)
        bsim = balance_Bsim(pair, config)
        same_weights = report.k == config.k and report.beta_weight == config.beta_weight
        if same_weights and report.f_score is not None and report.b_sim is not None:
            if abs(report.f_score - fscore) > CROSS_CHECK_TOL or abs(report.b_sim - bsim) > CROSS_CHECK_TOL:
                label = _pair_label(report)
                logger.warning(
                    f"Stored scores of {label} disagree with recomputation: "
                    f"F {report.f_score} vs {fscore}, Bsim {report.b_sim} vs {bsim}"
                )
                mismatches.append(label)
        rows.append(
            {
                "method": method or report.method,
                "image_id": report.image_id,
                "text_id": report.text_id,
                "image_category": report.image_category,
                "text_category": report.text_category,
                "i_sim": report.i_sim,
                "t_sim": report.t_sim,
                "aes": report.aes,
                "hps": report.hps,
                "fscore": fscore,
                "bsim": bsim,
                "reported_fscore": report.f_score,
                "reported_bsim": report.b_sim,
            }
        )
    if skipped:
        logger.warning(f"Skipped {skipped} failed or unscored reports")
    if not rows:
        raise EvaluationError("No successful reports to aggregate")
    raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
    for column in ("aes", "hps", "reported_fscore", "reported_bsim"):
        raw[column] = pd.to_numeric(raw[column], errors="coerce")
    return MetricTable(raw=raw, k=config.k, beta_weight=config.beta_weight, mismatches=mismatches)


def rescore_table(table: MetricTable, k: float, beta_weight: Optional[float] = None) -> MetricTable:
    """Recompute Fscore and Bsim for every pair under another (k, beta)."""
    config = HarmonyConfig(k=k, beta_weight=table.beta_weight if beta_weight is None else beta_weight)
    raw = table.raw.copy()
    pairs = [SimilarityPair(i, t) for i, t in zip(raw["i_sim"], raw["t_sim"])]
    raw["fscore"] = [score_F(p, config) for p in pairs]
    raw["bsim"] = [balance_Bsim(p, config) for p in pairs]
    return MetricTable(raw=raw, k=config.k, beta_weight=config.beta_weight)


def compare_methods(
    table: MetricTable,
    reference: str,
    metrics: Sequence[str] = ("DINO-I", "CLIP-T", "Fscore", "Bsim"),
    exact: bool = False,
) -> pd.DataFrame:
    """Kruskal-Wallis H and p between `reference` and every other method, per metric."""
    methods = table.methods
    if reference not in methods:
        raise ValueError(f"Reference method {reference!r} not in table (methods: {methods})")
    rows = []
    for other in methods:
        if other == reference:
            continue
        for metric in metrics:
            ref_values = table.values(reference, metric)
            other_values = table.values(other, metric)
            if ref_values.size == 0 or other_values.size == 0:
                logger.warning(f"No {metric} values for {reference} vs {other}; skipped")
                continue
            result = kruskal_wallis_h(ref_values, other_values, exact=exact)
            rows.append(
                {
                    "method": other,
                    "metric": metric,
                    "H": result.statistic,
                    "p": result.pvalue,
                    "underflow": result.underflow,
                    "degenerate": result.degenerate,
                }
            )
    return pd.DataFrame(rows, columns=["method", "metric", "H", "p", "underflow", "degenerate"])


def comparison_text(comparison: pd.DataFrame) -> str:
    """H (p) cells with methods as rows and metrics as columns."""
    if comparison.empty:
        return ""
    cells = comparison.assign(cell=[f"{h:.2f} ({p:.6f})" for h, p in zip(comparison["H"], comparison["p"])])
    pivot = cells.pivot(index="method", columns="metric", values="cell")
    ordered = [m for m in comparison["metric"].drop_duplicates()]
    return pivot[ordered].to_string()


def alpha_trace_frame(report: RunReport) -> pd.DataFrame:
    """Evaluation order, alpha and harmony score of a run's alpha search."""
    rows = [{"order": n, "alpha": alpha, "f_score": score} for n, (alpha, score) in enumerate(report.search_trace)]
    frame = pd.DataFrame(rows, columns=["order", "alpha", "f_score"])
    frame.insert(0, "run", f"{report.image_id}__{report.text_id}" if report.image_id else report.config_hash[:12])
    return frame
