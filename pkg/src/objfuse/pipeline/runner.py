"""
End-to-end novel object synthesis.

encode -> invert -> balance noise -> adjust injection step -> search alpha
-> synthesize -> score -> persist, with every stage timed and failures
captured in a partial report.
"""

import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from ..core.harmony import HarmonyConfig, SimilarityPair, balance_Bsim, score_F
from ..core.search import adjust_injection_step, golden_section_search
from ..engine.backends.base import DiffusionBackend
from ..engine.diffusion import FusionEngine
from ..engine.images import load_image, save_image
from ..engine.types import AttentionCache, FusionParams, LatentCode, NoiseBank, SamplerSchedule, TextEmbedding
from ..errors import StageError
from ..noise.optimizer import BalanceConfig, LossReport, balance_inversion
from ..perception.scoring import QualityScorer, SimilarityBackend, SimilarityScorer
from .config import RunConfig, RunReport
from .storage import write_report

logger = logging.getLogger(__name__)

# Scale used while probing injection steps
ALPHA_PROBE = 1.0

SWEEP_COLUMNS = ["alpha", "inject_step", "i_sim", "t_sim", "f_score", "b_sim"]
LAMBDA_SWEEP_COLUMNS = ["lambda", "recon_i_sim", "edit_i_sim", "edit_t_sim", "mean_l_r", "mean_l_n", "capped_steps"]


@dataclass
class FusionSession:
    """Inverted, noise-balanced state of one source image, ready for fusion passes.

    Every evaluation reuses the same z_T, noise bank and attention cache, so
    scores vary only through (alpha, i). Results are memoized per (alpha, i).
    """

    engine: FusionEngine
    scorer: SimilarityScorer
    harmony: HarmonyConfig
    schedule: SamplerSchedule
    source_image: torch.Tensor
    object_text: str
    text_embedding: TextEmbedding
    null_embedding: TextEmbedding
    z_T: LatentCode
    noise: NoiseBank
    cache: AttentionCache
    loss_reports: List[LossReport] = field(default_factory=list)
    _memo: Dict[Tuple[float, int], SimilarityPair] = field(default_factory=dict)

    def synthesize(self, alpha: float, inject_step: int) -> torch.Tensor:
        params = FusionParams(alpha=alpha, inject_step=inject_step)
        params.check_bounds(self.harmony.alpha_min, self.harmony.alpha_max, self.schedule.num_steps)
        return self.engine.synthesize_with_params(
            self.z_T, self.noise, self.text_embedding, params, self.cache, self.schedule
        )

    def reconstruct(self) -> torch.Tensor:
        """Null-text pass replaying self-attention at every step with alpha = 1."""
        params = FusionParams(alpha=1.0, inject_step=self.schedule.num_steps)
        return self.engine.synthesize_with_params(
            self.z_T, self.noise, self.null_embedding, params, self.cache, self.schedule
        )

    def evaluate(self, alpha: float, inject_step: int) -> SimilarityPair:
        key = (alpha, inject_step)
        if key not in self._memo:
            candidate = self.synthesize(alpha, inject_step)
            pair = self.scorer.score(self.source_image, self.object_text, candidate)
            logger.debug(f"alpha={alpha:.4f} i={inject_step}: I_sim={pair.i_sim:.4f} T_sim={pair.t_sim:.4f}")
            self._memo[key] = pair
        return self._memo[key]

    def isim(self, inject_step: int, alpha: float = ALPHA_PROBE) -> float:
        return self.evaluate(alpha, inject_step).i_sim

    def probes(self, alpha: float) -> List[Tuple[int, float]]:
        """(i, I_sim) of every injection step evaluated at `alpha`, in evaluation order."""
        return [(i, pair.i_sim) for (a, i), pair in self._memo.items() if a == alpha]

    def harmony_score(self, alpha: float, inject_step: int) -> float:
        return score_F(self.evaluate(alpha, inject_step), self.harmony)

    def sweep(self, points: Iterable[Tuple[float, int]]) -> pd.DataFrame:
        rows = []
        for alpha, inject_step in points:
            pair = self.evaluate(alpha, inject_step)
            rows.append(
                {
                    "alpha": alpha,
                    "inject_step": inject_step,
                    "i_sim": pair.i_sim,
                    "t_sim": pair.t_sim,
                    "f_score": score_F(pair, self.harmony),
                    "b_sim": balance_Bsim(pair, self.harmony),
                }
            )
        return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


@contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage {name} failed: {e}")
        raise StageError(name, str(e)) from e
    finally:
        timings[name] = time.perf_counter() - start
    logger.info(f"Stage {name} done in {timings[name]:.2f}s")


def _alpha_probe(harmony: HarmonyConfig) -> float:
    return min(harmony.alpha_max, max(harmony.alpha_min, ALPHA_PROBE))


class FusionPipeline:
    """Runs novel object synthesis over one diffusion backend and one perception scorer."""

    def __init__(
        self,
        backend: DiffusionBackend,
        scorer: SimilarityScorer,
        quality_scorers: Sequence[QualityScorer] = (),
    ):
        self.backend = backend
        self.scorer = scorer
        self.quality_scorers = {q.name: q for q in quality_scorers}
        # Exclusive backends serve one run at a time
        self._backend_lock = threading.Lock() if backend.exclusive else None

    def _prepare(self, config: RunConfig, timings: Dict[str, float]) -> FusionSession:
        with _stage("config", timings):
            config.check_paths()
            source = load_image(config.image_path, self.backend.image_size, self.backend.channels)

        with _stage("encode", timings):
            engine = FusionEngine(
                self.backend,
                seed=config.seed,
                renoise_iters=config.renoise_iters,
                orientation=config.orientation,
            )
            z_0 = engine.encode_image(source)
            prompt = config.prompt()
            if not prompt:
                logger.warning("Empty object text: fusion branch conditions on the null embedding")
            conditioning = engine.conditioning(prompt)
            schedule = engine.make_schedule(config.num_steps)

        with _stage("invert", timings):
            trajectory, noise = engine.invert(z_0, schedule, conditioning.null_embedding)

        with _stage("balance", timings):
            if not config.balance_noise:
                logger.info("Noise balancing disabled: keeping the recorded inversion noise")
            noise, loss_reports, _ = balance_inversion(
                engine,
                trajectory,
                noise,
                conditioning.null_embedding,
                schedule,
                config.balance,
                optimize=config.balance_noise,
            )

        return FusionSession(
            engine=engine,
            scorer=self.scorer,
            harmony=config.harmony,
            schedule=schedule,
            source_image=source,
            object_text=config.text_prompt,
            text_embedding=conditioning.text_embedding,
            null_embedding=conditioning.null_embedding,
            z_T=trajectory[schedule.num_steps],
            noise=noise,
            cache=engine.cache,
            loss_reports=loss_reports,
        )

    def prepare(self, config: RunConfig) -> FusionSession:
        return self._prepare(config, {})

    def run_synthesis(
        self,
        config: RunConfig,
        report_path: Optional[Path] = None,
        image_path: Optional[Path] = None,
    ) -> RunReport:
        """Run the full synthesis for one (image, text) pair and persist its report.

        Args:
            config: Run configuration
            report_path: Report location, default <output_dir>/<run_id>/report.json
            image_path: Image location, default <output_dir>/<run_id>/fused.png

        Returns:
            The run report; failed stages are named in it rather than raised
        """
        try:
            if self._backend_lock is None:
                return self._run(config, report_path, image_path)
            with self._backend_lock:
                return self._run(config, report_path, image_path)
        finally:
            # Embeddings are reused within one run only
            self.scorer.clear()

    def _run(self, config: RunConfig, report_path: Optional[Path], image_path: Optional[Path]) -> RunReport:
        started = time.perf_counter()
        run_dir = config.output_dir / config.resolved_run_id()
        report_path = report_path or run_dir / "report.json"
        image_path = image_path or run_dir / "fused.png"
        harmony = config.harmony
        num_steps = config.num_steps

        timings: Dict[str, float] = {}
        report = RunReport(
            method=config.method,
            image_id=config.image_id,
            text_id=config.text_id,
            image_category=config.image_category,
            text_category=config.text_category,
            prompt=config.prompt(),
            k=harmony.k,
            beta_weight=harmony.beta_weight,
            balance_noise=config.balance_noise,
            seed=config.seed,
            config_hash=config.config_hash(),
        )
        logger.info(f"Run {config.resolved_run_id()}: image={config.image_path} text={config.text_prompt!r}")

        try:
            session = self._prepare(config, timings)
            report.loss_reports = session.loss_reports
            report.noise_fingerprint = session.noise.fingerprint()

            with _stage("adjust_inject", timings):
                if config.fixed_inject_step is not None:
                    i_star = config.fixed_inject_step
                else:
                    alpha_probe = _alpha_probe(harmony)
                    i_star = adjust_injection_step(
                        lambda i: session.isim(i, alpha_probe),
                        i_init=num_steps // 2,
                        i_min=0,
                        i_max=num_steps,
                        max_iter=config.adjust_budget,
                        config=harmony,
                    )
                    report.inject_probes = session.probes(alpha_probe)
                report.i_star = i_star

            with _stage("alpha_search", timings):
                if config.fixed_alpha is not None:
                    alpha_star = config.fixed_alpha
                else:
                    alpha_star, trace = golden_section_search(
                        lambda alpha: session.harmony_score(alpha, i_star),
                        harmony.alpha_min,
                        harmony.alpha_max,
                        harmony.alpha_tol,
                    )
                    report.search_trace = list(trace.evaluations)
                    report.search_converged = trace.converged
                report.alpha_star = alpha_star

            with _stage("synthesize", timings):
                fused = session.synthesize(alpha_star, i_star)

            with _stage("score", timings):
                pair = self.scorer.score(session.source_image, config.text_prompt, fused)
                report.i_sim = pair.i_sim
                report.t_sim = pair.t_sim
                report.f_score = score_F(pair, harmony)
                report.b_sim = balance_Bsim(pair, harmony)
                report.perception_resolution = self.scorer.native_resolution
                for name, scorer in self.quality_scorers.items():
                    if name in ("aes", "hps"):
                        setattr(report, name, float(scorer.score(fused)))

            with _stage("persist", timings):
                save_image(fused, image_path)
                report.output_image_path = str(image_path)
                report.stage_timings = dict(timings)
                report.wall_time = time.perf_counter() - started
                write_report(report, report_path)

        except StageError as e:
            report.status = "failed"
            report.failed_stage = e.stage
            report.error = str(e)
            report.stage_timings = dict(timings)
            report.wall_time = time.perf_counter() - started
            if e.stage != "persist":
                try:
                    write_report(report, report_path)
                except OSError as write_error:
                    logger.error(f"Could not persist partial report: {write_error}")
            return report

        logger.info(
            f"Run {config.resolved_run_id()} done in {report.wall_time:.2f}s: alpha*={report.alpha_star:.3f} "
            f"i*={report.i_star} I_sim={report.i_sim:.3f} T_sim={report.t_sim:.3f} F={report.f_score:.3f}"
        )
        return report

    def sweep_alpha(
        self, config: RunConfig, alphas: Sequence[float], inject_step: Optional[int] = None
    ) -> pd.DataFrame:
        """Score grid over alpha at a fixed injection step (default: override or T // 2)."""
        if inject_step is None:
            inject_step = config.fixed_inject_step if config.fixed_inject_step is not None else config.num_steps // 2
        try:
            session = self.prepare(config)
            return session.sweep((float(alpha), inject_step) for alpha in alphas)
        finally:
            self.scorer.clear()

    def sweep_inject(
        self, config: RunConfig, inject_steps: Sequence[int], alpha: Optional[float] = None
    ) -> pd.DataFrame:
        """Score grid over injection steps at a fixed alpha (default: override or 1)."""
        if alpha is None:
            alpha = config.fixed_alpha if config.fixed_alpha is not None else _alpha_probe(config.harmony)
        try:
            session = self.prepare(config)
            return session.sweep((alpha, int(i)) for i in inject_steps)
        finally:
            self.scorer.clear()

    def sweep_lambda(
        self,
        config: RunConfig,
        lambdas: Sequence[float],
        alpha: Optional[float] = None,
        inject_step: Optional[int] = None,
    ) -> pd.DataFrame:
        """Reconstruction fidelity and direct-edit scores per noise-balance ratio.

        Every lambda re-runs the balanced inversion. The reconstruction is the
        null-text pass with alpha = 1 and injection at every step, scored against
        the source with image_similarity. The direct edit is the fusion pass with
        the object text at (alpha, inject_step), defaulting like sweep_alpha and
        sweep_inject; edit_t_sim is NaN for an empty text.

        Args:
            config: Run configuration; its balance settings other than lambda are kept
            lambdas: Target ratios L_r / L_n, each > 0
            alpha: Direct-edit cross-attention scale
            inject_step: Direct-edit injection step

        Returns:
            One row per lambda in LAMBDA_SWEEP_COLUMNS order
        """
        if alpha is None:
            alpha = config.fixed_alpha if config.fixed_alpha is not None else _alpha_probe(config.harmony)
        if inject_step is None:
            inject_step = config.fixed_inject_step if config.fixed_inject_step is not None else config.num_steps // 2
        base = config.balance.model_dump(exclude={"lambda_ratio"})

        rows = []
        try:
            for value in lambdas:
                balance = BalanceConfig(**base, lambda_ratio=float(value))
                session = self.prepare(config.model_copy(update={"balance": balance, "balance_noise": True}))
                recon_i_sim = self.scorer.image_similarity(session.source_image, session.reconstruct())
                edited = session.synthesize(alpha, inject_step)
                edit_t_sim = (
                    self.scorer.text_similarity(session.object_text, edited) if session.object_text else float("nan")
                )
                reports = session.loss_reports
                rows.append(
                    {
                        "lambda": balance.lambda_ratio,
                        "recon_i_sim": recon_i_sim,
                        "edit_i_sim": self.scorer.image_similarity(session.source_image, edited),
                        "edit_t_sim": edit_t_sim,
                        "mean_l_r": sum(r.l_r for r in reports) / len(reports),
                        "mean_l_n": sum(r.l_n for r in reports) / len(reports),
                        "capped_steps": sum(r.capped for r in reports),
                    }
                )
                logger.info(f"lambda={balance.lambda_ratio:g}: reconstruction I_sim={recon_i_sim:.4f}")
                # Candidates never repeat across lambdas
                self.scorer.clear()
        finally:
            self.scorer.clear()
        return pd.DataFrame(rows, columns=LAMBDA_SWEEP_COLUMNS)


def build_backend(name: str, seed: int = 0) -> DiffusionBackend:
    if name == "toy":
        from ..engine.backends.toy import ToyBackend

        return ToyBackend(seed=seed)
    if name == "sdxl":
        from ..engine.backends.sdxl import SdxlTurboBackend

        return SdxlTurboBackend()
    raise ValueError(f"Unknown backend: {name}")


def build_scorer(mode: str) -> SimilarityScorer:
    if mode not in ("models", "remote", "mock"):
        raise ValueError(f"Unknown perception mode: {mode}")
    return SimilarityScorer.from_backend(SimilarityBackend.from_settings(mode))


def build_pipeline(config: RunConfig) -> FusionPipeline:
    return FusionPipeline(build_backend(config.backend), build_scorer(config.perception))


def run_synthesis(config: RunConfig) -> RunReport:
    """Build the configured backend and scorer and run one synthesis."""
    return build_pipeline(config).run_synthesis(config)
