"""
Pydantic settings for objfuse.
"""

from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings with environment variable support."""

    model_config = SettingsConfigDict(
        env_prefix="OBJFUSE_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",  # Ignore unrelated environment variables
        protected_namespaces=(),
    )

    # Where Hugging Face weights are cached
    MODEL_CACHE_DIR: Optional[Path] = None

    # Model identifiers
    DIFFUSION_MODEL: str = "stabilityai/sdxl-turbo"
    IMAGE_FEATURE_MODEL: str = "facebook/dinov2-base"
    TEXT_IMAGE_MODEL: str = "clip-ViT-B-32"

    # Serving endpoint for perception embeddings (used with --perception remote)
    EMBEDDING_ENDPOINT: Optional[str] = None
    REQUEST_TIMEOUT: float = 60.0

    # Hardware settings
    DEVICE: str = "auto"  # auto | cpu | cuda
    MAX_GPU_MEMORY_FRACTION: float = 0.9
    CPU_THREADS: int = 8

    # Concurrency
    SCORING_MAX_IN_FLIGHT: int = 4
    BATCH_WORKERS: int = 1

    # Outputs
    OUTPUT_DIR: Path = Path("runs")
    LOG_LEVEL: str = "INFO"


# Global settings instance
settings = Settings()
