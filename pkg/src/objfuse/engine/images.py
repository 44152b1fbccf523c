"""Image file I/O between PIL and (channels, height, width) tensors in [0, 1]."""

import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError


def load_image(path: Union[str, Path], size: int, channels: int = 3) -> torch.Tensor:
    """Load an image file, rescale it to size x size and return a float tensor in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            img = img.resize((size, size), Image.Resampling.BICUBIC)
            array = np.asarray(img, dtype=np.float32) / 255.0
    except UnidentifiedImageError as e:
        raise ValueError(f"Malformed image {path}: {e}") from e
    if array.ndim == 2:
        array = array[None, :, :]
    else:
        array = array.transpose(2, 0, 1)
    return torch.from_numpy(array.copy())


def to_pil(image: torch.Tensor) -> Image.Image:
    """Convert a (channels, height, width) tensor in [0, 1] to a PIL image."""
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"Expected a (1|3, H, W) image tensor, got {tuple(image.shape)}")
    array = (image.detach().cpu().float().clamp(0.0, 1.0).numpy() * 255.0).round().astype(np.uint8)
    if array.shape[0] == 1:
        return Image.fromarray(array[0], mode="L")
    return Image.fromarray(array.transpose(1, 2, 0), mode="RGB")


def save_image(image: torch.Tensor, path: Union[str, Path]) -> Path:
    """Write a PNG atomically (temp file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".png.tmp")
    os.close(fd)
    try:
        to_pil(image).save(tmp_name, format="PNG")
        os.replace(tmp_name, path)
    except Exception:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def psnr(reference: torch.Tensor, candidate: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(torch.mean((reference.double() - candidate.double()) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(1.0 / mse))
