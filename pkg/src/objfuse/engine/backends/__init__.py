"""Diffusion backend adapters."""

from .base import DiffusionBackend
from .toy import ToyBackend

__all__ = ["DiffusionBackend", "ToyBackend", "SdxlTurboBackend"]


def __getattr__(name: str):
    # Keeps diffusers out of the import path until the reference backend is requested
    if name == "SdxlTurboBackend":
        from .sdxl import SdxlTurboBackend

        return SdxlTurboBackend
    raise AttributeError(name)
