"""Shared fixtures: toy backend, engine, source images and scripted scorers."""

import os
import tempfile
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pytest
import torch
from PIL import Image

from objfuse.core.harmony import SimilarityPair
from objfuse.engine.backends.toy import ToyBackend
from objfuse.engine.diffusion import FusionEngine
from objfuse.perception.clients import MockEmbeddingClient
from objfuse.perception.scoring import SimilarityScorer


def pytest_collection_modifyitems(config, items):
    if os.environ.get("OBJFUSE_RUN_GPU_TESTS") == "1":
        return
    skip_gpu = pytest.mark.skip(reason="set OBJFUSE_RUN_GPU_TESTS=1 to run real-backend tests")
    for item in items:
        if "gpu" in item.keywords:
            item.add_marker(skip_gpu)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    with tempfile.TemporaryDirectory() as tmp_dir:
        yield Path(tmp_dir)


@pytest.fixture
def toy_backend():
    return ToyBackend(seed=0)


@pytest.fixture
def engine(toy_backend):
    return FusionEngine(toy_backend, seed=0)


@pytest.fixture
def schedule(engine):
    return engine.make_schedule(4)


@pytest.fixture
def source_tensor():
    """Deterministic 8x8 gradient image in [0.1, 0.9]."""
    ramp = torch.linspace(0.1, 0.9, 64, dtype=torch.float64).reshape(1, 8, 8)
    return ramp


def write_gray_png(path: Path, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    pixels = (rng.uniform(0.2, 0.8, size=(8, 8)) * 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="L").save(path)
    return path


@pytest.fixture
def source_png(temp_dir):
    return write_gray_png(temp_dir / "inputs" / "source.png")


@pytest.fixture
def mock_scorer():
    """Flattened-pixel image embeddings and seeded text vectors."""
    return SimilarityScorer(MockEmbeddingClient(), MockEmbeddingClient(), max_in_flight=2)


class LinearScorer:
    """Scorer whose candidate images encode alpha as their mean pixel.

    I(alpha) falls and T(alpha) rises linearly, so 2 * min(I, k*T) peaks where
    the two lines cross.
    """

    def __init__(self, i0: float = 0.9, i_slope: float = -0.3, t0: float = 0.1, t_slope: float = 0.15):
        self.i0 = i0
        self.i_slope = i_slope
        self.t0 = t0
        self.t_slope = t_slope
        self.calls = 0

    @property
    def native_resolution(self) -> Dict[str, Optional[int]]:
        return {"image": None, "text_image": None}

    def crossing(self, k: float) -> float:
        return (self.i0 - k * self.t0) / (k * self.t_slope - self.i_slope)

    def score(self, reference: torch.Tensor, text: str, candidate: torch.Tensor) -> SimilarityPair:
        self.calls += 1
        alpha = float(candidate.double().mean())
        return SimilarityPair(self.i0 + self.i_slope * alpha, self.t0 + self.t_slope * alpha)

    def clear(self) -> None:
        pass


@pytest.fixture
def linear_scorer():
    return LinearScorer()


def _alpha_image(self, z_T, noise, text_embedding, params, cache, schedule):
    return torch.full((1, 8, 8), params.alpha, dtype=torch.float64)


@pytest.fixture
def alpha_image():
    """Stand-in for FusionEngine.synthesize_with_params: an image filled with alpha."""
    return _alpha_image


@pytest.fixture
def png_factory(temp_dir):
    def make(name: str, seed: int = 0) -> Path:
        return write_gray_png(temp_dir / "inputs" / name, seed)

    return make
