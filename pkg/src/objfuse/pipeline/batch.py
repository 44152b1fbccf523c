"""Batch execution over a dataset manifest with per-pair isolation."""

import logging
import random
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Tuple

from tqdm import tqdm

from ..settings import settings
from .config import RunConfig, RunReport
from .manifest import DatasetManifest, ImageEntry, TextEntry
from .runner import FusionPipeline
from .storage import write_json_atomic, write_report

if TYPE_CHECKING:
    from ..evaluation.metrics import MetricTable

logger = logging.getLogger(__name__)


@dataclass
class BatchResult:
    reports: List[RunReport]
    table: Optional["MetricTable"]

    @property
    def failed(self) -> List[RunReport]:
        return [r for r in self.reports if r.status != "ok"]


def select_pairs(
    manifest: DatasetManifest, subsample: Optional[int] = None, seed: int = 0
) -> List[Tuple[ImageEntry, TextEntry]]:
    """All pairs, or a seeded subsample kept in manifest order."""
    pairs = manifest.pairs()
    if subsample is None or subsample >= len(pairs):
        return pairs
    if subsample < 1:
        raise ValueError(f"subsample must be positive, got {subsample}")
    chosen = sorted(random.Random(seed).sample(range(len(pairs)), subsample))
    return [pairs[i] for i in chosen]


def pair_config(template: RunConfig, manifest: DatasetManifest, image: ImageEntry, text: TextEntry) -> RunConfig:
    return template.model_copy(
        update={
            "image_path": manifest.image_path(image),
            "text_prompt": text.label,
            "image_label": image.name,
            "text_label": text.label,
            "image_id": image.id,
            "text_id": text.id,
            "image_category": image.category,
            "text_category": text.category,
            "run_id": f"{image.id}__{text.id}",
        }
    )


def _failed_report(config: RunConfig, error: Exception) -> RunReport:
    return RunReport(
        status="failed",
        failed_stage="batch",
        error=str(error),
        method=config.method,
        image_id=config.image_id,
        text_id=config.text_id,
        image_category=config.image_category,
        text_category=config.text_category,
        k=config.harmony.k,
        beta_weight=config.harmony.beta_weight,
        seed=config.seed,
        config_hash=config.config_hash(),
    )


def run_batch(
    pipeline: FusionPipeline,
    manifest: DatasetManifest,
    template: RunConfig,
    subsample: Optional[int] = None,
    workers: Optional[int] = None,
) -> BatchResult:
    """Run every selected pair, write per-pair reports and the aggregate table.

    Layout under template.output_dir: reports/<image>__<text>.json,
    images/<image>__<text>.png, aggregate.json and aggregate.txt.

    Args:
        pipeline: Pipeline shared by all pairs (each run gets its own engine)
        manifest: Validated manifest
        template: Settings shared by every pair
        subsample: Number of pairs to draw with the template seed
        workers: Concurrent pairs; exclusive backends run one at a time

    Returns:
        Reports in pair order and the aggregate table (None when every pair failed)
    """
    from ..evaluation.metrics import aggregate_metrics

    out_dir = Path(template.output_dir)
    pairs = select_pairs(manifest, subsample, template.seed)
    configs = [pair_config(template, manifest, image, text) for image, text in pairs]
    workers = workers or settings.BATCH_WORKERS
    if pipeline.backend.exclusive and workers > 1:
        logger.info(f"Backend {pipeline.backend.name} is exclusive; running pairs sequentially")
        workers = 1
    logger.info(f"Batch of {len(configs)} pairs with {workers} workers -> {out_dir}")

    def run_one(config: RunConfig) -> RunReport:
        run_id = config.resolved_run_id()
        report_path = out_dir / "reports" / f"{run_id}.json"
        try:
            return pipeline.run_synthesis(
                config, report_path=report_path, image_path=out_dir / "images" / f"{run_id}.png"
            )
        except Exception as e:
            logger.error(f"Pair {run_id} failed: {e}")
            report = _failed_report(config, e)
            write_report(report, report_path)
            return report

    reports: List[Optional[RunReport]] = [None] * len(configs)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(run_one, config): index for index, config in enumerate(configs)}
        for future in tqdm(as_completed(futures), total=len(futures), desc="pairs", disable=len(futures) < 2):
            reports[futures[future]] = future.result()

    finished = [r for r in reports if r is not None]
    failures = sum(r.status != "ok" for r in finished)
    if failures:
        logger.warning(f"{failures}/{len(finished)} pairs failed")

    table = None
    if failures < len(finished):
        table = aggregate_metrics(finished, template.harmony)
        write_json_atomic(out_dir / "aggregate.json", table.to_dict())
        (out_dir / "aggregate.txt").write_text(table.to_text() + "\n", encoding="utf-8")
    return BatchResult(reports=finished, table=table)
