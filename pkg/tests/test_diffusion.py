"""Tests for the dual-branch diffusion engine on the toy backend."""

import pytest
import torch

from objfuse.engine.attention import AttentionController
from objfuse.engine.backends.hardware import resolve_device
from objfuse.engine.backends.toy import TOY_CROSS_LAYER, TOY_SELF_LAYER, ToyBackend
from objfuse.engine.diffusion import FusionEngine
from objfuse.engine.images import load_image, psnr, save_image, to_pil
from objfuse.engine.types import (
    AttentionCache,
    FusionParams,
    LatentCode,
    NoiseBank,
    SamplerSchedule,
    TextEmbedding,
)
from objfuse.errors import NonFiniteError
from objfuse.noise.optimizer import BalanceConfig, balance_inversion


class ZeroDenoiser(ToyBackend):
    """Toy backend whose noise prediction is identically zero."""

    def __init__(self, nu: float = 1.0, beta: float = 0.0, gamma: float = 0.0):
        super().__init__(nu=nu, beta=beta, gamma=gamma)

    def denoise(self, latent, t, embedding, controller, schedule):
        return torch.zeros_like(latent, dtype=torch.float64)


class FrozenDenoiser(ToyBackend):
    """Toy backend returning one fixed noise prediction for every input."""

    def __init__(self, out: torch.Tensor, nu: float, beta: float, gamma: float):
        super().__init__(nu=nu, beta=beta, gamma=gamma)
        self.out = out

    def denoise(self, latent, t, embedding, controller, schedule):
        return self.out.clone()


def latent(seed: int = 0, timestep: int = 0) -> LatentCode:
    generator = torch.Generator().manual_seed(seed)
    return LatentCode(torch.rand(1, 8, 8, generator=generator, dtype=torch.float64), timestep=timestep)


class TestEncoders:
    def test_toy_latent_is_identity(self, engine, source_tensor):
        z_0 = engine.encode_image(source_tensor)
        assert z_0.shape == (1, 8, 8)
        assert z_0.timestep == 0
        assert torch.equal(z_0.data, source_tensor)

    def test_zero_image_encodes(self, engine):
        z_0 = engine.encode_image(torch.zeros(1, 8, 8))
        assert torch.isfinite(z_0.data).all()

    def test_wrong_image_shape(self, engine):
        with pytest.raises(ValueError, match="backend contract"):
            engine.encode_image(torch.zeros(3, 8, 8))

    def test_non_finite_image(self, engine):
        image = torch.zeros(1, 8, 8)
        image[0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError):
            engine.encode_image(image)

    def test_round_trip_meets_psnr_floor(self, engine, toy_backend, source_tensor):
        decoded = engine.decode(engine.encode_image(source_tensor))
        assert psnr(source_tensor, decoded) >= toy_backend.reconstruction_psnr_floor

    def test_text_embedding_shape_and_determinism(self, engine):
        first = engine.encode_text("peacock")
        second = engine.encode_text("peacock")
        assert tuple(first.tokens.shape) == (4, 16)
        assert torch.equal(first.tokens, second.tokens)
        assert not torch.equal(first.tokens, engine.encode_null().tokens)

    def test_empty_text_rejected(self, engine):
        with pytest.raises(ValueError, match="encode_null"):
            engine.encode_text("")

    def test_empty_text_conditions_on_null(self, engine):
        conditioning = engine.conditioning("")
        assert torch.equal(conditioning.text_embedding.tokens, conditioning.null_embedding.tokens)


class TestSingleSteps:
    """Test cases for the inversion, noise-addition and fusion steps."""

    def test_identity_sampler(self):
        engine = FusionEngine(ZeroDenoiser(nu=1.0, gamma=0.0))
        schedule = engine.make_schedule(4)
        z = latent(timestep=3)
        null = engine.encode_null()
        out = engine.inversion_denoise_step(z, 3, null, torch.randn(1, 8, 8, dtype=torch.float64), schedule)
        assert torch.equal(out.data, z.data)
        assert out.timestep == 2

    def test_linear_form_adds_noise(self):
        engine = FusionEngine(ZeroDenoiser(nu=1.0, beta=0.0, gamma=1.0))
        schedule = engine.make_schedule(4)
        z = latent(timestep=2)
        ones = torch.ones(1, 8, 8, dtype=torch.float64)
        out = engine.inversion_denoise_step(z, 2, engine.encode_null(), ones, schedule)
        assert torch.allclose(out.data, z.data + 1.0)

    def test_capture_records_one_map_per_layer(self, engine, schedule):
        cache = AttentionCache()
        engine.inversion_denoise_step(
            latent(timestep=4), 4, engine.encode_null(), torch.zeros(1, 8, 8, dtype=torch.float64), schedule, cache
        )
        assert len(cache) == 1
        assert cache.layer_ids == [TOY_SELF_LAYER]
        row_sums = cache.get(4, TOY_SELF_LAYER).sum(dim=-1)
        assert torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-4)

    def test_add_noise_halves_under_zero_denoiser(self):
        engine = FusionEngine(ZeroDenoiser(nu=2.0, gamma=0.0))
        schedule = engine.make_schedule(4)
        z = latent(timestep=0)
        out = engine.add_noise_step(z, 1, engine.encode_null(), torch.zeros(1, 8, 8, dtype=torch.float64), schedule)
        assert torch.allclose(out.data, z.data / 2.0)
        assert out.timestep == 1

    def test_add_noise_inverts_denoise_step(self):
        engine = FusionEngine(ZeroDenoiser(nu=1.0, beta=0.3, gamma=0.5))
        schedule = engine.make_schedule(4)
        null = engine.encode_null()
        z = latent(seed=4, timestep=1)
        eps = torch.randn(1, 8, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
        noised = engine.add_noise_step(z, 2, null, eps, schedule)
        restored = engine.inversion_denoise_step(noised, 2, null, eps, schedule)
        assert torch.allclose(restored.data, z.data, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_inversion_identity_with_frozen_denoiser(self, seed):
        generator = torch.Generator().manual_seed(seed)
        nu = float(torch.empty(1).uniform_(0.2, 2.0, generator=generator))
        if seed % 2:
            nu = -nu
        beta = float(torch.empty(1).uniform_(-1.0, 1.0, generator=generator))
        gamma = float(torch.empty(1).uniform_(0.0, 1.0, generator=generator))
        frozen = torch.randn(1, 8, 8, generator=generator, dtype=torch.float64)
        eps = torch.randn(1, 8, 8, generator=generator, dtype=torch.float64)
        engine = FusionEngine(FrozenDenoiser(frozen, nu, beta, gamma))
        schedule = engine.make_schedule(4)
        null = engine.encode_null()
        z = LatentCode(torch.randn(1, 8, 8, generator=generator, dtype=torch.float64), timestep=2)

        noised = engine.add_noise_step(z, 3, null, eps, schedule)
        restored = engine.inversion_denoise_step(noised, 3, null, eps, schedule)
        relative = torch.linalg.vector_norm(restored.data - z.data) / torch.linalg.vector_norm(z.data)
        assert float(relative) < 1e-6

    def test_renoise_iterations_re_evaluate_denoiser(self, toy_backend):
        plain = FusionEngine(toy_backend, renoise_iters=0)
        renoised = FusionEngine(toy_backend, renoise_iters=2)
        schedule = plain.make_schedule(4)
        null = plain.encode_null()
        z = latent(seed=1)
        eps = torch.zeros(1, 8, 8, dtype=torch.float64)
        with_calls = []
        original = toy_backend.denoise

        def counting(*args, **kwargs):
            with_calls.append(1)
            return original(*args, **kwargs)

        toy_backend.denoise = counting
        a = plain.add_noise_step(z, 1, null, eps, schedule)
        assert len(with_calls) == 1
        b = renoised.add_noise_step(z, 1, null, eps, schedule)
        assert len(with_calls) == 4
        assert not torch.equal(a.data, b.data)

    def test_negative_renoise_rejected(self, toy_backend):
        with pytest.raises(ValueError, match="renoise_iters"):
            FusionEngine(toy_backend, renoise_iters=-1)

    def test_noise_shape_mismatch(self, engine, schedule):
        with pytest.raises(ValueError, match="Noise shape"):
            engine.step_latent(latent(timestep=1), 1, torch.zeros(1, 8, 8), torch.zeros(1, 4, 4), schedule)

    def test_step_out_of_range(self, engine, schedule):
        with pytest.raises(ValueError, match="outside"):
            engine.predict_noise(latent(), 5, engine.encode_null(), AttentionController.plain(5, 4), schedule)

    def test_non_finite_denoiser_output(self, toy_backend, schedule):
        toy_backend.denoise = lambda *args, **kwargs: torch.full((1, 8, 8), float("nan"), dtype=torch.float64)
        engine = FusionEngine(toy_backend)
        with pytest.raises(NonFiniteError, match="denoiser output"):
            engine.predict_noise(latent(), 1, engine.encode_null(), AttentionController.plain(1, 4), schedule)

    def test_fusion_degenerates_to_inversion(self, engine, schedule):
        null = engine.encode_null()
        z = latent(seed=2, timestep=3)
        eps = torch.randn(1, 8, 8, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
        cache = AttentionCache()
        inverted = engine.inversion_denoise_step(z, 3, null, eps, schedule, cache)
        fused = engine.fusion_denoise_step(z, 3, null, FusionParams(alpha=1.0, inject_step=0), cache, eps, schedule)
        assert torch.equal(inverted.data, fused.data)

    def test_cross_attention_contribution_grows_with_alpha(self, toy_backend, schedule):
        text = toy_backend.encode_text("peacock").tokens
        hidden = torch.randn(64, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        norms = []
        for alpha in (0.0, 1.0, 2.0):
            controller = AttentionController.fuse(1, 4, AttentionCache(), FusionParams(alpha=alpha, inject_step=0))
            out = controller.cross_attention(
                TOY_CROSS_LAYER, hidden @ toy_backend.w_cq, text @ toy_backend.w_ck, text @ toy_backend.w_cv
            )
            norms.append(float(torch.linalg.vector_norm(out)))
        assert norms[0] == 0.0
        assert norms[0] < norms[1] < norms[2]


@pytest.fixture
def balanced(engine, schedule, source_tensor):
    z_0 = engine.encode_image(source_tensor)
    null = engine.encode_null()
    trajectory, noise = engine.invert(z_0, schedule, null)
    bank, reports, z_hat_0 = balance_inversion(engine, trajectory, noise, null, schedule, BalanceConfig())
    return trajectory, bank, reports, z_hat_0, null


class TestTrajectories:
    """Test cases for invert, fusion_trajectory and synthesize_with_params."""

    def test_invert_indexing(self, engine, schedule, source_tensor):
        z_0 = engine.encode_image(source_tensor)
        trajectory, bank = engine.invert(z_0, schedule, engine.encode_null())
        assert len(trajectory) == 5
        assert trajectory[0] is z_0
        assert [z.timestep for z in trajectory] == [0, 1, 2, 3, 4]
        assert all(torch.isfinite(z.data).all() for z in trajectory)
        assert bank.num_steps == 4
        assert engine.noise is bank

    def test_invert_is_seed_deterministic(self, toy_backend, source_tensor):
        runs = []
        for _ in range(2):
            engine = FusionEngine(toy_backend, seed=3)
            schedule = engine.make_schedule(4)
            trajectory, bank = engine.invert(engine.encode_image(source_tensor), schedule, engine.encode_null())
            runs.append((trajectory, bank))
        assert all(torch.equal(a.data, b.data) for a, b in zip(runs[0][0], runs[1][0]))
        assert runs[0][1].fingerprint() == runs[1][1].fingerprint()

    def test_different_seeds_differ(self, toy_backend):
        a = FusionEngine(toy_backend, seed=0).draw_noise(4, (1, 8, 8), torch.float64)
        b = FusionEngine(toy_backend, seed=1).draw_noise(4, (1, 8, 8), torch.float64)
        assert a.fingerprint() != b.fingerprint()

    def test_invert_needs_clean_latent(self, engine, schedule):
        with pytest.raises(ValueError, match="clean latent"):
            engine.invert(latent(timestep=2), schedule, engine.encode_null())

    def test_full_injection_reproduces_inversion_branch(self, engine, schedule, balanced):
        trajectory, bank, _, z_hat_0, null = balanced
        params = FusionParams(alpha=1.0, inject_step=4)
        latents = engine.fusion_trajectory(trajectory[4], bank, null, params, engine.cache, schedule)
        assert [z.timestep for z in latents] == [4, 3, 2, 1, 0]
        relative = torch.linalg.vector_norm(latents[-1].data - z_hat_0.data) / torch.linalg.vector_norm(z_hat_0.data)
        assert float(relative) < 1e-5

    def test_full_injection_reconstructs_source(self, engine, schedule, balanced, source_tensor):
        trajectory, bank, _, _, null = balanced
        image = engine.synthesize_with_params(
            trajectory[4], bank, null, FusionParams(alpha=1.0, inject_step=4), engine.cache, schedule
        )
        assert psnr(source_tensor, image) > 20.0

    def test_synthesis_is_deterministic_and_finite(self, engine, schedule, balanced):
        trajectory, bank, _, _, _ = balanced
        text = engine.encode_text("peacock")
        params = FusionParams(alpha=1.4, inject_step=2)
        first = engine.synthesize_with_params(trajectory[4], bank, text, params, engine.cache, schedule)
        second = engine.synthesize_with_params(trajectory[4], bank, text, params, engine.cache, schedule)
        assert tuple(first.shape) == (1, 8, 8)
        assert torch.isfinite(first).all()
        assert torch.equal(first, second)

    def test_bank_length_must_match_schedule(self, engine, schedule, balanced):
        trajectory, _, _, _, null = balanced
        short = NoiseBank((torch.zeros(1, 8, 8, dtype=torch.float64),))
        with pytest.raises(ValueError, match="Noise bank has 1 steps"):
            engine.fusion_trajectory(trajectory[4], short, null, FusionParams(1.0, 0), engine.cache, schedule)

    def test_reset_clears_state(self, engine, balanced):
        engine.reset()
        assert len(engine.cache) == 0
        assert engine.noise is None


class TestTypes:
    def test_sigma_schedule_is_ancestral_euler(self):
        schedule = SamplerSchedule.from_sigmas([14.6, 4.0, 1.0, 0.3, 0.0], model_timesteps=[999, 749, 499, 249])
        assert schedule.num_steps == 4
        nu, beta, gamma = schedule.coefficients(1)
        # Last step lands on sigma 0: no fresh noise
        assert (nu, gamma) == (1.0, 0.0)
        assert beta == pytest.approx(-0.3)
        assert schedule.sigma_from(4) == 14.6
        assert schedule.model_timestep(4) == 999.0

    def test_ancestral_split_preserves_variance(self):
        schedule = SamplerSchedule.from_sigmas([10.0, 2.0])
        _, beta, gamma = schedule.coefficients(1)
        sigma_down = beta + 10.0
        assert sigma_down**2 + gamma**2 == pytest.approx(4.0)

    def test_zero_nu_rejected(self):
        with pytest.raises(ValueError, match="nu must be non-zero"):
            SamplerSchedule.constant(4, 0.0, 0.1, 0.1)

    def test_noise_bank_with_step_is_a_copy(self):
        bank = NoiseBank(tuple(torch.zeros(1, 8, 8) for _ in range(2)))
        updated = bank.with_step(2, torch.ones(1, 8, 8))
        assert torch.equal(bank[2], torch.zeros(1, 8, 8))
        assert torch.equal(updated[2], torch.ones(1, 8, 8))
        assert bank.fingerprint() != updated.fingerprint()

    def test_noise_bank_index_range(self):
        bank = NoiseBank((torch.zeros(2, 2),))
        with pytest.raises(IndexError):
            bank[0]

    def test_latent_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            LatentCode(torch.full((1, 2, 2), float("inf")), timestep=0)

    def test_cache_rejects_non_stochastic_map(self):
        with pytest.raises(ValueError, match="row-stochastic"):
            AttentionCache().record(1, "layer", torch.ones(3, 3))

    def test_embedding_dims_must_agree(self):
        from objfuse.engine.types import ConditioningEmbeddings

        with pytest.raises(ValueError, match="disagree on dim"):
            ConditioningEmbeddings(TextEmbedding(torch.zeros(2, 4)), TextEmbedding(torch.zeros(2, 5)))


class TestImages:
    def test_load_rescales_and_normalizes(self, png_factory):
        path = png_factory("big.png")
        image = load_image(path, size=4, channels=1)
        assert tuple(image.shape) == (1, 4, 4)
        assert float(image.min()) >= 0.0 and float(image.max()) <= 1.0

    def test_load_rgb(self, png_factory):
        assert tuple(load_image(png_factory("rgb.png"), size=8, channels=3).shape) == (3, 8, 8)

    def test_missing_file(self, temp_dir):
        with pytest.raises(FileNotFoundError):
            load_image(temp_dir / "nope.png", size=8)

    def test_malformed_file(self, temp_dir):
        path = temp_dir / "bad.png"
        path.write_bytes(b"not an image")
        with pytest.raises(ValueError, match="Malformed image"):
            load_image(path, size=8)

    def test_save_then_load(self, temp_dir, source_tensor):
        path = save_image(source_tensor, temp_dir / "out" / "img.png")
        loaded = load_image(path, size=8, channels=1).double()
        assert psnr(source_tensor, loaded) > 40.0
        assert list((temp_dir / "out").iterdir()) == [path]

    def test_to_pil_rejects_batches(self):
        with pytest.raises(ValueError, match="image tensor"):
            to_pil(torch.zeros(2, 1, 8, 8))


class TestHardware:
    def test_cpu_preference(self):
        assert resolve_device("cpu").type == "cpu"

    def test_unknown_preference(self):
        with pytest.raises(ValueError, match="Unknown device"):
            resolve_device("tpu")
