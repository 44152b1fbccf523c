"""Run configuration and run report schemas."""

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from ..core.harmony import HarmonyConfig
from ..engine.attention import InjectionOrientation
from ..noise.optimizer import BalanceConfig, LossReport
from ..settings import settings

FUSION_TEMPLATE = "a photo of an {image} creatively fused with a {text}"

# Fields that locate outputs rather than change results
_OUTPUT_FIELDS = {"output_dir", "run_id"}


class RunConfig(BaseModel):
    """Everything that determines one fusion run."""

    image_path: Path
    text_prompt: str = Field(default="", description="Object text; empty conditions on the null embedding")
    image_label: Optional[str] = Field(default=None, description="Object class of the image, used by the template")
    text_label: Optional[str] = Field(default=None, description="Object class of the text, used by the template")
    seed: int = 0
    harmony: HarmonyConfig = Field(default_factory=HarmonyConfig)
    balance: BalanceConfig = Field(default_factory=BalanceConfig)
    balance_noise: bool = Field(default=True, description="False keeps the recorded inversion noise (ablation)")
    backend: Literal["sdxl", "toy"] = "sdxl"
    perception: Literal["models", "remote", "mock"] = "models"
    num_steps: int = Field(default=4, ge=1)
    max_adjust_iters: Optional[int] = Field(default=None, ge=0, description="Adjust-inject budget, default T // 2")
    renoise_iters: int = Field(default=0, ge=0)
    orientation: InjectionOrientation = InjectionOrientation.FIRST_STEPS
    fixed_alpha: Optional[float] = None
    fixed_inject_step: Optional[int] = Field(default=None, ge=0)
    fusion_template: bool = False
    output_dir: Path = Field(default_factory=lambda: settings.OUTPUT_DIR)
    run_id: Optional[str] = None
    method: str = "objfuse"
    image_id: Optional[str] = None
    text_id: Optional[str] = None
    image_category: Optional[str] = None
    text_category: Optional[str] = None

    @model_validator(mode="after")
    def _check_overrides(self) -> "RunConfig":
        if self.fixed_alpha is not None and not self.harmony.alpha_min <= self.fixed_alpha <= self.harmony.alpha_max:
            raise ValueError(
                f"fixed_alpha={self.fixed_alpha} outside [{self.harmony.alpha_min}, {self.harmony.alpha_max}]"
            )
        if self.fixed_inject_step is not None and self.fixed_inject_step > self.num_steps:
            raise ValueError(f"fixed_inject_step={self.fixed_inject_step} outside [0, {self.num_steps}]")
        return self

    @property
    def adjust_budget(self) -> int:
        return self.num_steps // 2 if self.max_adjust_iters is None else self.max_adjust_iters

    def check_paths(self) -> None:
        if not self.image_path.is_file():
            raise FileNotFoundError(f"Image not found: {self.image_path}")

    def prompt(self) -> str:
        """Conditioning prompt: the raw object text, or the fusion template when enabled."""
        if self.fusion_template and self.image_label:
            return FUSION_TEMPLATE.format(image=self.image_label, text=self.text_label or self.text_prompt)
        return self.text_prompt

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every result-affecting field."""
        payload = self.model_dump(mode="json", exclude=_OUTPUT_FIELDS)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        if self.image_id and self.text_id:
            return f"{self.image_id}__{self.text_id}"
        return f"run_{self.config_hash()[:12]}"


class RunReport(BaseModel):
    """Outcome of one run. Failed runs keep whatever stages completed."""

    status: Literal["ok", "failed"] = "ok"
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    method: str = "objfuse"
    image_id: Optional[str] = None
    text_id: Optional[str] = None
    image_category: Optional[str] = None
    text_category: Optional[str] = None
    prompt: Optional[str] = None

    alpha_star: Optional[float] = None
    i_star: Optional[int] = None
    i_sim: Optional[float] = None
    t_sim: Optional[float] = None
    f_score: Optional[float] = None
    b_sim: Optional[float] = None
    k: float = 2.3
    beta_weight: float = 1.0
    balance_noise: bool = True
    aes: Optional[float] = None
    hps: Optional[float] = None

    search_trace: List[Tuple[float, float]] = Field(default_factory=list)
    search_converged: Optional[bool] = None
    inject_probes: List[Tuple[int, float]] = Field(default_factory=list)
    loss_reports: List[LossReport] = Field(default_factory=list)

    wall_time: float = 0.0
    stage_timings: Dict[str, float] = Field(default_factory=dict)
    output_image_path: Optional[str] = None
    seed: int = 0
    config_hash: str = ""
    noise_fingerprint: Optional[str] = None
    perception_resolution: Dict[str, Optional[int]] = Field(default_factory=dict)
