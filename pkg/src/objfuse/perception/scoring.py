"""Image-image and text-image similarity scoring with an in-flight limit and an embedding memo."""

import hashlib
import logging
import threading
from typing import Dict, Optional, Protocol, Tuple, runtime_checkable

import numpy as np
import torch
from pydantic import BaseModel, model_validator

from ..core.harmony import SimilarityPair, clamp_unit
from ..settings import settings
from .clients import ClipClient, DinoImageClient, EmbeddingClient, MockEmbeddingClient, RemoteEmbeddingClient

logger = logging.getLogger(__name__)


class SimilarityBackend(BaseModel):
    """Which perception models to use: local weights, a serving endpoint, or mocks."""

    image_model_id: Optional[str] = None
    textimage_model_id: Optional[str] = None
    device: Optional[str] = None
    endpoint: Optional[str] = None
    mock: bool = False

    @model_validator(mode="after")
    def _check_models(self) -> "SimilarityBackend":
        if not self.mock and not (self.image_model_id and self.textimage_model_id):
            raise ValueError("Both image_model_id and textimage_model_id are required unless mock is set")
        return self

    @classmethod
    def from_settings(cls, mode: str = "models") -> "SimilarityBackend":
        if mode == "mock":
            return cls(mock=True)
        return cls(
            image_model_id=settings.IMAGE_FEATURE_MODEL,
            textimage_model_id=settings.TEXT_IMAGE_MODEL,
            device=settings.DEVICE,
            endpoint=settings.EMBEDDING_ENDPOINT if mode == "remote" else None,
        )


@runtime_checkable
class QualityScorer(Protocol):
    """Optional learned quality scorer (aesthetic or human-preference style)."""

    name: str

    def score(self, image: torch.Tensor) -> float: ...


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Raw cosine of two vectors; 0 when either is the zero vector."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"Embedding dims differ: {a.shape[0]} vs {b.shape[0]}")
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b) / denom)


def _image_digest(image: torch.Tensor) -> str:
    array = image.detach().cpu().contiguous().numpy()
    digest = hashlib.sha256(array.tobytes())
    digest.update(str(array.shape).encode("utf-8"))
    return digest.hexdigest()


class SimilarityScorer:
    """Scores candidates against the source image (I_sim) and the object text (T_sim).

    Calls are safe to issue from several threads; at most `max_in_flight`
    embedding calls run at once.
    """

    def __init__(
        self,
        image_client: EmbeddingClient,
        text_image_client: EmbeddingClient,
        max_in_flight: Optional[int] = None,
    ):
        self.image_client = image_client
        self.text_image_client = text_image_client
        self._slots = threading.BoundedSemaphore(max_in_flight or settings.SCORING_MAX_IN_FLIGHT)
        self._memo: Dict[Tuple[str, str, str], np.ndarray] = {}
        self._memo_lock = threading.Lock()

    @classmethod
    def from_backend(cls, backend: SimilarityBackend, max_in_flight: Optional[int] = None) -> "SimilarityScorer":
        if backend.mock:
            return cls(MockEmbeddingClient(), MockEmbeddingClient(), max_in_flight)
        if backend.endpoint:
            image_client: EmbeddingClient = RemoteEmbeddingClient(backend.image_model_id, backend.endpoint)
            text_client: EmbeddingClient = RemoteEmbeddingClient(backend.textimage_model_id, backend.endpoint)
        else:
            image_client = DinoImageClient(backend.image_model_id, backend.device)
            text_client = ClipClient(backend.textimage_model_id, backend.device)
        return cls(image_client, text_client, max_in_flight)

    @property
    def native_resolution(self) -> Dict[str, Optional[int]]:
        return {
            "image": self.image_client.native_resolution,
            "text_image": self.text_image_client.native_resolution,
        }

    def _embed(self, client: EmbeddingClient, kind: str, key: str, compute) -> np.ndarray:
        memo_key = (f"{client.name}:{id(client)}", kind, key)
        with self._memo_lock:
            cached = self._memo.get(memo_key)
        if cached is not None:
            return cached
        with self._slots:
            vector = np.asarray(compute(), dtype=np.float64)
        if not np.all(np.isfinite(vector)):
            raise ValueError(f"{client.name} returned a non-finite {kind} embedding")
        with self._memo_lock:
            self._memo[memo_key] = vector
        return vector

    def _image_vector(self, client: EmbeddingClient, image: torch.Tensor) -> np.ndarray:
        return self._embed(client, "image", _image_digest(image), lambda: client.embed_image(image))

    def _text_vector(self, client: EmbeddingClient, text: str) -> np.ndarray:
        return self._embed(client, "text", text, lambda: client.embed_text(text))

    def _raw_image_cosine(self, reference: torch.Tensor, candidate: torch.Tensor) -> float:
        client = self.image_client
        return cosine_similarity(self._image_vector(client, reference), self._image_vector(client, candidate))

    def _raw_text_cosine(self, text: str, candidate: torch.Tensor) -> float:
        if not text:
            raise ValueError("text_similarity needs a non-empty text")
        client = self.text_image_client
        return cosine_similarity(self._text_vector(client, text), self._image_vector(client, candidate))

    def image_similarity(self, reference: torch.Tensor, candidate: torch.Tensor) -> float:
        """Clamped cosine of image-feature embeddings."""
        return clamp_unit(self._raw_image_cosine(reference, candidate))

    def text_similarity(self, text: str, candidate: torch.Tensor) -> float:
        """Clamped cosine between the text and image embeddings of the joint model."""
        return clamp_unit(self._raw_text_cosine(text, candidate))

    def score(self, reference: torch.Tensor, text: str, candidate: torch.Tensor) -> SimilarityPair:
        """(I_sim, T_sim) of a candidate; an empty text scores T_sim = 0."""
        i_raw = self._raw_image_cosine(reference, candidate)
        if text:
            t_raw = self._raw_text_cosine(text, candidate)
        else:
            logger.warning("Empty object text: T_sim fixed at 0")
            t_raw = 0.0
        if i_raw < 0 or t_raw < 0:
            logger.debug(f"Negative cosine clamped to 0 (I={i_raw:.4f}, T={t_raw:.4f})")
        return SimilarityPair(i_sim=i_raw, t_sim=t_raw)

    def clear(self) -> None:
        with self._memo_lock:
            self._memo.clear()

    @property
    def memo_size(self) -> int:
        with self._memo_lock:
            return len(self._memo)
