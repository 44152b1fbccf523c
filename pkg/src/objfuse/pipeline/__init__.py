"""Novel object synthesis pipeline: configuration, manifests, single runs and batches."""

from .config import FUSION_TEMPLATE, RunConfig, RunReport
from .manifest import DatasetManifest, ImageEntry, PairEntry, TextEntry, load_manifest
from .storage import load_reports, write_report
from .runner import FusionPipeline, FusionSession, build_backend, build_pipeline, build_scorer, run_synthesis
from .batch import BatchResult, run_batch, select_pairs

__all__ = [
    "FUSION_TEMPLATE",
    "BatchResult",
    "DatasetManifest",
    "FusionPipeline",
    "FusionSession",
    "ImageEntry",
    "PairEntry",
    "RunConfig",
    "RunReport",
    "TextEntry",
    "build_backend",
    "build_pipeline",
    "build_scorer",
    "load_manifest",
    "load_reports",
    "run_batch",
    "run_synthesis",
    "select_pairs",
    "write_report",
]
