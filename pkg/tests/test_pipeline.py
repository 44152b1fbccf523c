"""Tests for run configuration, report storage and the end-to-end synthesis pipeline."""

import json
import math
import time
from unittest.mock import Mock, patch

import pytest
from pydantic import ValidationError

from objfuse.core.harmony import HarmonyConfig, SimilarityPair, balance_Bsim, score_F
from objfuse.engine.diffusion import FusionEngine
from objfuse.errors import StageError
from objfuse.noise.optimizer import BalanceConfig
from objfuse.pipeline.config import FUSION_TEMPLATE, RunConfig, RunReport
from objfuse.pipeline.runner import FusionPipeline, build_backend, build_scorer
from objfuse.pipeline.storage import load_report, load_reports, write_json_atomic, write_report

VOLATILE = {"wall_time", "stage_timings"}


@pytest.fixture
def toy_config(source_png, temp_dir):
    return RunConfig(
        image_path=source_png,
        text_prompt="peacock",
        backend="toy",
        perception="mock",
        output_dir=temp_dir / "runs",
        run_id="toy",
    )


@pytest.fixture
def toy_pipeline(toy_backend, mock_scorer):
    return FusionPipeline(toy_backend, mock_scorer)


class TestRunConfig:
    """Test cases for RunConfig."""

    def test_defaults(self, source_png):
        config = RunConfig(image_path=source_png)
        assert config.num_steps == 4
        assert config.adjust_budget == 2
        assert config.harmony.k == 2.3
        assert config.balance.lambda_ratio == 125.0
        assert not config.fusion_template

    def test_explicit_adjust_budget(self, source_png):
        assert RunConfig(image_path=source_png, max_adjust_iters=5).adjust_budget == 5

    def test_fixed_alpha_outside_bounds(self, source_png):
        with pytest.raises(ValidationError, match="fixed_alpha"):
            RunConfig(image_path=source_png, fixed_alpha=2.5)

    def test_fixed_inject_step_outside_range(self, source_png):
        with pytest.raises(ValidationError, match="fixed_inject_step"):
            RunConfig(image_path=source_png, fixed_inject_step=5)

    def test_prompt_template(self, source_png):
        config = RunConfig(
            image_path=source_png, text_prompt="harp", image_label="owl", text_label="harp", fusion_template=True
        )
        assert config.prompt() == FUSION_TEMPLATE.format(image="owl", text="harp")
        assert config.model_copy(update={"fusion_template": False}).prompt() == "harp"

    def test_hash_ignores_output_location(self, source_png, temp_dir):
        a = RunConfig(image_path=source_png, output_dir=temp_dir / "a", run_id="x")
        b = RunConfig(image_path=source_png, output_dir=temp_dir / "b", run_id="y")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != RunConfig(image_path=source_png, seed=1).config_hash()

    def test_resolved_run_id(self, source_png):
        assert RunConfig(image_path=source_png, image_id="img_owl", text_id="txt_harp").resolved_run_id() == (
            "img_owl__txt_harp"
        )
        assert RunConfig(image_path=source_png).resolved_run_id().startswith("run_")

    def test_missing_image(self, temp_dir):
        with pytest.raises(FileNotFoundError):
            RunConfig(image_path=temp_dir / "missing.png").check_paths()


class TestStorage:
    def test_report_round_trip(self, temp_dir):
        report = RunReport(i_sim=0.7, t_sim=0.3, search_trace=[(0.76, 1.2)])
        path = write_report(report, temp_dir / "nested" / "report.json")
        assert load_report(path) == report

    def test_atomic_write_leaves_no_temp_files(self, temp_dir):
        write_json_atomic(temp_dir / "a.json", {"b": 1, "a": 2})
        assert [p.name for p in temp_dir.iterdir()] == ["a.json"]
        assert json.loads((temp_dir / "a.json").read_text()) == {"a": 2, "b": 1}

    def test_load_reports_skips_aggregate_and_junk(self, temp_dir):
        write_report(RunReport(image_id="a"), temp_dir / "r1" / "report.json")
        write_report(RunReport(image_id="b"), temp_dir / "r2" / "report.json")
        write_json_atomic(temp_dir / "aggregate.json", {"rows": {}})
        (temp_dir / "notes.json").write_text("{not json", encoding="utf-8")
        reports = load_reports(temp_dir)
        assert [r.image_id for r in reports] == ["a", "b"]

    def test_load_reports_missing_dir(self, temp_dir):
        with pytest.raises(FileNotFoundError):
            load_reports(temp_dir / "nope")


class TestRunSynthesis:
    """Test cases for FusionPipeline.run_synthesis on the toy backend."""

    def test_alpha_lands_on_similarity_crossing(self, toy_backend, linear_scorer, alpha_image, toy_config):
        pipeline = FusionPipeline(toy_backend, linear_scorer)
        with patch.object(FusionEngine, "synthesize_with_params", new=alpha_image):
            report = pipeline.run_synthesis(toy_config)

        assert report.status == "ok", report.error
        crossing = linear_scorer.crossing(toy_config.harmony.k)
        assert abs(report.alpha_star - crossing) <= toy_config.harmony.alpha_tol
        assert 0 <= report.i_star <= 4
        assert report.search_converged
        assert report.search_trace
        assert all(0.0 <= alpha <= 2.0 for alpha, _ in report.search_trace)

    def test_injection_step_frozen_before_search(self, toy_backend, linear_scorer, alpha_image, toy_config):
        pipeline = FusionPipeline(toy_backend, linear_scorer)
        seen = []
        original = alpha_image

        def recording(self, z_T, noise, text_embedding, params, cache, schedule):
            seen.append((params.alpha, params.inject_step, noise.fingerprint()))
            return original(self, z_T, noise, text_embedding, params, cache, schedule)

        with patch.object(FusionEngine, "synthesize_with_params", new=recording):
            report = pipeline.run_synthesis(toy_config)

        searched = seen[len(report.inject_probes):]
        assert {inject for _, inject, _ in searched} == {report.i_star}
        assert len({fingerprint for _, _, fingerprint in seen}) == 1
        assert report.noise_fingerprint == seen[0][2]

    def test_report_scores_recompute_exactly(self, toy_pipeline, toy_config):
        started = time.perf_counter()
        report = toy_pipeline.run_synthesis(toy_config)
        assert time.perf_counter() - started < 5.0
        assert report.wall_time < 5.0
        assert report.status == "ok", report.error
        pair = SimilarityPair(report.i_sim, report.t_sim)
        assert report.f_score == score_F(pair, toy_config.harmony)
        assert report.b_sim == balance_Bsim(pair, toy_config.harmony)
        assert [r.t for r in report.loss_reports] == [1, 2, 3, 4]
        assert 0.0 <= report.alpha_star <= 2.0

    def test_outputs_persisted(self, toy_pipeline, toy_config):
        report = toy_pipeline.run_synthesis(toy_config)
        run_dir = toy_config.output_dir / "toy"
        assert (run_dir / "fused.png").is_file()
        assert report.output_image_path == str(run_dir / "fused.png")
        assert load_report(run_dir / "report.json").config_hash == toy_config.config_hash()
        stages = {"config", "encode", "invert", "balance", "adjust_inject", "alpha_search", "synthesize", "score"}
        assert stages <= set(report.stage_timings)

    def test_reconstruction_path(self, toy_pipeline, toy_config):
        config = toy_config.model_copy(update={"text_prompt": "", "fixed_alpha": 1.0, "fixed_inject_step": 4})
        report = toy_pipeline.run_synthesis(config)
        assert report.status == "ok", report.error
        assert report.i_sim >= 0.95
        assert report.t_sim == 0.0
        assert report.search_trace == []
        assert report.alpha_star == 1.0 and report.i_star == 4

    def test_deterministic_reports(self, toy_backend, toy_config):
        dumps = []
        for _ in range(2):
            pipeline = FusionPipeline(toy_backend, build_scorer("mock"))
            report = pipeline.run_synthesis(toy_config)
            dumps.append(report.model_dump_json(exclude=VOLATILE))
        assert dumps[0] == dumps[1]

    def test_missing_image_fails_config_stage(self, toy_pipeline, toy_config, temp_dir):
        config = toy_config.model_copy(update={"image_path": temp_dir / "gone.png"})
        report = toy_pipeline.run_synthesis(config)
        assert report.status == "failed"
        assert report.failed_stage == "config"
        assert "gone.png" in report.error
        assert load_report(config.output_dir / "toy" / "report.json").failed_stage == "config"

    def test_scoring_failure_keeps_completed_stages(self, toy_backend, toy_config):
        scorer = build_scorer("mock")
        pipeline = FusionPipeline(toy_backend, scorer)
        config = toy_config.model_copy(update={"fixed_alpha": 0.5, "fixed_inject_step": 2})
        with patch.object(scorer, "score", side_effect=RuntimeError("perception down")):
            report = pipeline.run_synthesis(config)
        assert report.failed_stage == "score"
        assert "perception down" in report.error
        assert report.alpha_star == 0.5
        assert len(report.loss_reports) == 4
        assert "score" in report.stage_timings

    def test_quality_scorers_fill_optional_columns(self, toy_backend, mock_scorer, toy_config):
        aes = Mock()
        aes.name = "aes"
        aes.score.return_value = 5.5
        pipeline = FusionPipeline(toy_backend, mock_scorer, quality_scorers=[aes])
        report = pipeline.run_synthesis(toy_config)
        assert report.aes == 5.5
        assert report.hps is None

    def test_without_noise_balancing(self, toy_pipeline, toy_config):
        tight = BalanceConfig(lambda_ratio=1e-6, max_inner_iters=500)
        balanced = toy_pipeline.run_synthesis(toy_config.model_copy(update={"balance": tight}))
        assert balanced.balance_noise
        assert any(r.iterations_used > 0 for r in balanced.loss_reports)

        config = toy_config.model_copy(update={"balance": tight, "balance_noise": False, "run_id": "raw"})
        report = toy_pipeline.run_synthesis(config)
        assert report.status == "ok", report.error
        assert not report.balance_noise
        assert [r.t for r in report.loss_reports] == [1, 2, 3, 4]
        assert all(r.iterations_used == 0 and not r.capped for r in report.loss_reports)
        assert load_report(config.output_dir / "raw" / "report.json").balance_noise is False


class TestSweeps:
    def test_alpha_sweep_columns(self, toy_pipeline, toy_config):
        frame = toy_pipeline.sweep_alpha(toy_config, [0.0, 1.0, 2.0])
        assert list(frame.columns) == ["alpha", "inject_step", "i_sim", "t_sim", "f_score", "b_sim"]
        assert frame["alpha"].tolist() == [0.0, 1.0, 2.0]
        assert set(frame["inject_step"]) == {2}

    def test_inject_sweep(self, toy_pipeline, toy_config):
        frame = toy_pipeline.sweep_inject(toy_config, [0, 4])
        assert frame["inject_step"].tolist() == [0, 4]
        assert set(frame["alpha"]) == {1.0}

    def test_lambda_sweep(self, toy_pipeline, toy_config):
        config = toy_config.model_copy(update={"balance": BalanceConfig(max_inner_iters=500)})
        frame = toy_pipeline.sweep_lambda(config, [1e-6, 125.0])
        assert list(frame.columns) == [
            "lambda",
            "recon_i_sim",
            "edit_i_sim",
            "edit_t_sim",
            "mean_l_r",
            "mean_l_n",
            "capped_steps",
        ]
        tight, loose = frame.to_dict("records")
        assert (tight["lambda"], loose["lambda"]) == (1e-6, 125.0)
        assert tight["capped_steps"] == loose["capped_steps"] == 0
        assert tight["mean_l_r"] < loose["mean_l_r"]
        assert tight["recon_i_sim"] >= 0.99
        assert tight["recon_i_sim"] >= loose["recon_i_sim"] - 1e-6
        for row in (tight, loose):
            assert 0.0 <= row["edit_i_sim"] <= 1.0
            assert 0.0 <= row["edit_t_sim"] <= 1.0
        assert toy_pipeline.scorer.memo_size == 0

    def test_lambda_sweep_without_text(self, toy_pipeline, toy_config):
        config = toy_config.model_copy(update={"text_prompt": ""})
        frame = toy_pipeline.sweep_lambda(config, [125.0], alpha=1.0, inject_step=4)
        assert math.isnan(frame["edit_t_sim"].iloc[0])
        assert frame["edit_i_sim"].iloc[0] == pytest.approx(frame["recon_i_sim"].iloc[0])

    def test_lambda_sweep_rejects_negative_ratio(self, toy_pipeline, toy_config):
        with pytest.raises(ValidationError):
            toy_pipeline.sweep_lambda(toy_config, [-1.0])

    def test_session_memoizes_evaluations(self, toy_pipeline, toy_config):
        session = toy_pipeline.prepare(toy_config)
        engine = session.engine
        with patch.object(engine, "synthesize_with_params", wraps=engine.synthesize_with_params) as spy:
            session.evaluate(1.0, 2)
            session.evaluate(1.0, 2)
        assert spy.call_count == 1
        assert session.probes(1.0) == [(2, session.isim(2))]


class TestBuilders:
    def test_toy_backend(self):
        assert build_backend("toy").name == "toy"

    def test_unknown_backend(self):
        with pytest.raises(ValueError, match="Unknown backend"):
            build_backend("dalle")

    def test_unknown_perception(self):
        with pytest.raises(ValueError, match="Unknown perception"):
            build_scorer("oracle")

    def test_stage_error_names_stage(self):
        assert str(StageError("balance", "boom")) == "balance: boom"


@pytest.mark.gpu
class TestReferenceBackend:
    """Real SDXL-Turbo backend with local perception models."""

    def test_reconstruction_similarity(self, png_factory, temp_dir):
        from objfuse.engine.backends.sdxl import SdxlTurboBackend

        backend = SdxlTurboBackend()
        pipeline = FusionPipeline(backend, build_scorer("models"))
        config = RunConfig(
            image_path=png_factory("rooster.png"),
            text_prompt="",
            fixed_alpha=1.0,
            fixed_inject_step=4,
            output_dir=temp_dir / "runs",
        )
        report = pipeline.run_synthesis(config)
        assert report.status == "ok", report.error
        assert report.i_sim >= 0.85
        assert report.wall_time <= 60.0

    def test_fusion_scores_both_sides(self, png_factory, temp_dir):
        config = RunConfig(
            image_path=png_factory("rooster.png"),
            text_prompt="iron",
            harmony=HarmonyConfig(),
            output_dir=temp_dir / "runs",
        )
        from objfuse.pipeline.runner import build_pipeline

        report = build_pipeline(config).run_synthesis(config)
        assert report.status == "ok", report.error
        assert report.i_sim >= 0.2 and report.t_sim >= 0.2
