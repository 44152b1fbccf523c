"""Metric aggregation and rank statistics for comparing fusion methods."""

from .stats import KruskalResult, kruskal_wallis_h
from .metrics import (
    TABLE_COLUMNS,
    MetricTable,
    aggregate_metrics,
    alpha_trace_frame,
    compare_methods,
    comparison_text,
    rescore_table,
)

__all__ = [
    "TABLE_COLUMNS",
    "KruskalResult",
    "MetricTable",
    "aggregate_metrics",
    "alpha_trace_frame",
    "compare_methods",
    "comparison_text",
    "kruskal_wallis_h",
    "rescore_table",
]
