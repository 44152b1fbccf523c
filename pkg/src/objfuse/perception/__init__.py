"""Similarity scoring between images and between text and image."""

from .clients import ClipClient, DinoImageClient, EmbeddingClient, MockEmbeddingClient, RemoteEmbeddingClient
from .scoring import QualityScorer, SimilarityBackend, SimilarityScorer, cosine_similarity

__all__ = [
    "ClipClient",
    "DinoImageClient",
    "EmbeddingClient",
    "MockEmbeddingClient",
    "QualityScorer",
    "RemoteEmbeddingClient",
    "SimilarityBackend",
    "SimilarityScorer",
    "cosine_similarity",
]
