"""
Hardware runtime setup for diffusion and perception models.
Resolve the device once, apply CUDA / CPU knobs, then hand the device to backends.
"""

from __future__ import annotations

import logging
import os
from typing import Dict, Optional

import torch

from ...settings import settings

logger = logging.getLogger(__name__)

_initialized = False


def resolve_device(preference: Optional[str] = None) -> torch.device:
    """Map an `auto|cpu|cuda` preference onto an available torch device."""
    choice = (preference or settings.DEVICE).lower()
    if choice == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    if choice.startswith("cuda") and not torch.cuda.is_available():
        logger.warning(f"Device {choice} requested but CUDA is not available, falling back to CPU")
        return torch.device("cpu")
    if choice != "cpu" and not choice.startswith("cuda"):
        raise ValueError(f"Unknown device preference: {choice}")
    return torch.device(choice)


def init_hardware(preference: Optional[str] = None) -> torch.device:
    """Apply thread, TF32 and memory-fraction settings once per process and return the device."""
    global _initialized
    device = resolve_device(preference)
    if _initialized:
        return device

    # ----- CPU -------------------------------------------------------------
    os.environ.setdefault("OMP_NUM_THREADS", str(settings.CPU_THREADS))
    os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")  # avoid deadlocks in batch workers
    torch.set_num_threads(settings.CPU_THREADS)

    # ----- GPU -------------------------------------------------------------
    if device.type == "cuda":
        torch.backends.cuda.matmul.allow_tf32 = True
        torch.backends.cudnn.allow_tf32 = True
        torch.backends.cudnn.benchmark = True
        torch.cuda.set_per_process_memory_fraction(settings.MAX_GPU_MEMORY_FRACTION)
        os.environ.setdefault("PYTORCH_CUDA_ALLOC_CONF", "expandable_segments:True")
        torch.cuda.empty_cache()
        gpu_props = torch.cuda.get_device_properties(0)
        logger.info(
            f"Hardware initialized: {gpu_props.name}, {gpu_props.total_memory / (1024**3):.1f}GB, "
            f"memory fraction {settings.MAX_GPU_MEMORY_FRACTION}, threads={settings.CPU_THREADS}"
        )
    else:
        logger.info(f"Hardware initialized: CPU-only mode, threads={settings.CPU_THREADS}")

    _initialized = True
    return device


def get_memory_info() -> Dict[str, float]:
    """Current GPU memory usage in GB (zeros on CPU)."""
    if not torch.cuda.is_available():
        return {"gpu_allocated": 0.0, "gpu_cached": 0.0, "gpu_total": 0.0, "gpu_free": 0.0}
    total = torch.cuda.get_device_properties(0).total_memory / (1024**3)
    allocated = torch.cuda.memory_allocated() / (1024**3)
    return {
        "gpu_allocated": allocated,
        "gpu_cached": torch.cuda.memory_reserved() / (1024**3),
        "gpu_total": total,
        "gpu_free": total - allocated,
    }
