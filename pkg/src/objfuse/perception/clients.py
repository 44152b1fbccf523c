"""Embedding model clients: local DINO-class and CLIP-class models, a serving endpoint, and a mock."""

import base64
import hashlib
import io
import logging
from abc import ABC, abstractmethod
from typing import Callable, Dict, Optional

import numpy as np
import requests
import torch

from ..engine.backends.hardware import init_hardware, resolve_device
from ..engine.images import to_pil
from ..errors import BackendUnavailableError
from ..settings import settings

logger = logging.getLogger(__name__)


class EmbeddingClient(ABC):
    """Maps images and texts to vectors. Images are (channels, H, W) tensors in [0, 1]."""

    name: str = "base"

    @property
    def native_resolution(self) -> Optional[int]:
        """Square input size the model rescales candidates to, if known."""
        return None

    @abstractmethod
    def embed_image(self, image: torch.Tensor) -> np.ndarray:
        pass

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        pass


class DinoImageClient(EmbeddingClient):
    """Image-only client returning the pooled representation of a DINO-class model."""

    name = "dino"

    def __init__(self, model_id: Optional[str] = None, device: Optional[str] = None):
        self.model_id = model_id or settings.IMAGE_FEATURE_MODEL
        self.device = str(resolve_device(device))
        self._processor = None
        self._model = None

    def _load(self) -> None:
        if self._model is not None:
            return
        init_hardware(self.device)
        logger.info(f"Loading image feature model {self.model_id} on {self.device.upper()}")
        try:
            from transformers import AutoImageProcessor, AutoModel

            cache_dir = str(settings.MODEL_CACHE_DIR) if settings.MODEL_CACHE_DIR else None
            self._processor = AutoImageProcessor.from_pretrained(self.model_id, cache_dir=cache_dir)
            self._model = AutoModel.from_pretrained(self.model_id, cache_dir=cache_dir).to(self.device).eval()
        except Exception as e:
            raise BackendUnavailableError(f"Failed to load image feature model {self.model_id}: {e}") from e

    @property
    def native_resolution(self) -> Optional[int]:
        self._load()
        crop = getattr(self._processor, "crop_size", None) or {}
        return crop.get("height") if isinstance(crop, dict) else None

    @torch.no_grad()
    def embed_image(self, image: torch.Tensor) -> np.ndarray:
        self._load()
        inputs = self._processor(images=to_pil(image).convert("RGB"), return_tensors="pt").to(self.device)
        outputs = self._model(**inputs)
        pooled = outputs.pooler_output if outputs.pooler_output is not None else outputs.last_hidden_state[:, 0]
        return pooled[0].float().cpu().numpy()

    def embed_text(self, text: str) -> np.ndarray:
        raise BackendUnavailableError(f"{self.model_id} is an image-only model")


class ClipClient(EmbeddingClient):
    """Joint text-image client through sentence-transformers' CLIP wrapper."""

    name = "clip"

    def __init__(self, model_id: Optional[str] = None, device: Optional[str] = None):
        self.model_id = model_id or settings.TEXT_IMAGE_MODEL
        self.device = str(resolve_device(device))
        self._model = None

    def _load(self):
        if self._model is None:
            init_hardware(self.device)
            logger.info(f"Loading text-image model {self.model_id} on {self.device.upper()}")
            try:
                from sentence_transformers import SentenceTransformer

                cache_dir = str(settings.MODEL_CACHE_DIR) if settings.MODEL_CACHE_DIR else None
                self._model = SentenceTransformer(self.model_id, device=self.device, cache_folder=cache_dir)
            except Exception as e:
                raise BackendUnavailableError(f"Failed to load text-image model {self.model_id}: {e}") from e
        return self._model

    @property
    def native_resolution(self) -> Optional[int]:
        return 224

    def embed_image(self, image: torch.Tensor) -> np.ndarray:
        return np.asarray(self._load().encode(to_pil(image).convert("RGB")), dtype=np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        return np.asarray(self._load().encode(text), dtype=np.float64)


class RemoteEmbeddingClient(EmbeddingClient):
    """Client for an embedding service exposing `POST {endpoint}/embed`.

    Request body: {"model": ..., "kind": "image"|"text", "input": ...} with images
    sent as base64 PNG. Response body: {"embedding": [...]}.
    """

    name = "remote"

    def __init__(self, model: str, endpoint: Optional[str] = None, timeout: Optional[float] = None):
        endpoint = endpoint or settings.EMBEDDING_ENDPOINT
        if not endpoint:
            raise BackendUnavailableError("No embedding endpoint configured (set OBJFUSE_EMBEDDING_ENDPOINT)")
        self.base_url = endpoint.rstrip("/")
        self.model = model
        self.timeout = timeout or settings.REQUEST_TIMEOUT

    def _post(self, kind: str, payload: str) -> np.ndarray:
        try:
            response = requests.post(
                f"{self.base_url}/embed",
                json={"model": self.model, "kind": kind, "input": payload},
                timeout=self.timeout,
                headers={"Content-Type": "application/json"},
            )
            response.raise_for_status()
            embedding = response.json()["embedding"]
        except requests.RequestException as e:
            error_msg = f"Embedding request failed: {e}"
            logger.error(error_msg)
            raise BackendUnavailableError(error_msg) from e
        except (KeyError, ValueError) as e:
            error_msg = f"Failed to parse embedding response: {e}"
            logger.error(error_msg)
            raise BackendUnavailableError(error_msg) from e
        return np.asarray(embedding, dtype=np.float64)

    def embed_image(self, image: torch.Tensor) -> np.ndarray:
        buffer = io.BytesIO()
        to_pil(image).save(buffer, format="PNG")
        return self._post("image", base64.b64encode(buffer.getvalue()).decode("ascii"))

    def embed_text(self, text: str) -> np.ndarray:
        return self._post("text", text)


class MockEmbeddingClient(EmbeddingClient):
    """Deterministic client for tests.

    Images embed as their flattened pixels unless `image_fn` is given; texts
    embed as seeded Gaussian vectors unless listed in `text_vectors`.
    """

    name = "mock"

    def __init__(
        self,
        dim: int = 64,
        seed: int = 0,
        text_vectors: Optional[Dict[str, np.ndarray]] = None,
        image_fn: Optional[Callable[[torch.Tensor], np.ndarray]] = None,
    ):
        self.dim = dim
        self.seed = seed
        self.text_vectors = {k: np.asarray(v, dtype=np.float64) for k, v in (text_vectors or {}).items()}
        self.image_fn = image_fn

    def embed_image(self, image: torch.Tensor) -> np.ndarray:
        if self.image_fn is not None:
            return np.asarray(self.image_fn(image), dtype=np.float64)
        return image.detach().cpu().double().reshape(-1).numpy()

    def embed_text(self, text: str) -> np.ndarray:
        if text in self.text_vectors:
            return self.text_vectors[text]
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return rng.standard_normal(self.dim)
