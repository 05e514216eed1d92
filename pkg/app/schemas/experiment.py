"""
Pydantic schemas for experiment configuration.
"""
import hashlib
import json
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ScratchInit(str, Enum):
    """Initialization of the from-scratch baseline sampler."""
    IDENTITY = "identity"
    RANDOM = "random"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    """Toy problem and dataset sizes."""
    gammas: List[float] = Field(default=[3.0, 2.0, 1.0, 0.0], min_length=1, description="Operator shifts γ ≥ 0")
    sigma: float = Field(0.4, gt=0, description="Noise standard deviation of both fidelities")
    n_pretrain_pairs: int = Field(5000, gt=0, description="Low-fidelity (y, x) training pairs")
    x_true: Optional[List[float]] = Field(None, description="Unknown model; defaults to a fixed prior draw")

    @field_validator("gammas")
    @classmethod
    def _non_negative(cls, v: List[float]) -> List[float]:
        if any(g < 0 for g in v):
            raise ValueError("gamma values must be non-negative")
        return v

    @field_validator("x_true")
    @classmethod
    def _two_dimensional(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and len(v) != 2:
            raise ValueError("x_true must have two entries")
        return v


class FlowConfig(_Section):
    """Architecture shared by both lanes and by the samplers."""
    n_blocks: int = Field(8, gt=0, description="Hierarchical coupling blocks per lane")
    hidden: int = Field(64, gt=0, description="Conditioner hidden width")
    clamp: float = Field(5.0, gt=0, description="Log-scale clamp bound")
    negative_slope: float = Field(0.01, ge=0, lt=1)


class PhaseConfig(_Section):
    """Optimizer settings of one training phase."""
    epochs: int = Field(..., gt=0)
    batch_size: int = Field(64, gt=0)
    lr: float = Field(1e-3, gt=0)
    decay: float = Field(0.9, gt=0, le=1)
    decay_every: int = Field(1, gt=0, description="Epochs between learning-rate decays")
    max_grad_norm: Optional[float] = Field(1.0, gt=0, description="Global gradient-norm clip; null disables")
    spike_tolerance: Optional[float] = Field(
        20.0, gt=0, description="Roll back a step when the next objective exceeds the recent median by this many MADs"
    )


class LatentPhaseConfig(PhaseConfig):
    n_latent: int = Field(1000, gt=0, description="Fixed latent training set size")


class ScratchConfig(LatentPhaseConfig):
    init: ScratchInit = ScratchInit.IDENTITY
    init_scale: float = Field(0.05, gt=0, description="Weight scale for random initialization")


class SgldConfig(_Section):
    n_steps: int = Field(200_000, gt=0)
    step_a: float = Field(1.0, gt=0)
    step_b: float = Field(1e4, ge=0)
    step_gamma: float = Field(0.55, gt=0.5, le=1.0)
    burn_in: int = Field(50_000, ge=0)
    stride: int = Field(10, gt=0)

    @model_validator(mode="after")
    def _burn_in_below_steps(self) -> "SgldConfig":
        if self.n_steps <= self.burn_in:
            raise ValueError("n_steps must exceed burn_in")
        return self


class EvaluationConfig(_Section):
    n_eval: int = Field(10_000, ge=10_000, description="Fresh latent draws per KL proxy")
    agreement_n_se: float = Field(3.0, gt=0, description="Combined standard errors allowed between posterior estimates")


class SamplingConfig(_Section):
    n_samples: int = Field(1000, gt=0)


class GridConfig(_Section):
    """Rectangular grid for density CSVs and the quadrature oracle."""
    x1_min: float = -4.0
    x1_max: float = 4.0
    x2_min: float = -4.0
    x2_max: float = 4.0
    n1: int = Field(401, ge=2)
    n2: int = Field(401, ge=2)

    @model_validator(mode="after")
    def _ordered(self) -> "GridConfig":
        if not (self.x1_min < self.x1_max and self.x2_min < self.x2_max):
            raise ValueError("grid bounds must be increasing")
        return self


class SeedConfig(_Section):
    data: int = Field(0, ge=0)
    init: int = Field(1, ge=0)
    train: int = Field(2, ge=0)
    eval: int = Field(3, ge=0)

    @classmethod
    def from_base(cls, seed: int) -> "SeedConfig":
        return cls(data=seed, init=seed + 1, train=seed + 2, eval=seed + 3)


class ExperimentConfig(_Section):
    """Complete description of a run; serialized as JSON, one object per section."""
    data: DataConfig = DataConfig()
    flow: FlowConfig = FlowConfig()
    pretrain: PhaseConfig = PhaseConfig(epochs=25)
    finetune: LatentPhaseConfig = LatentPhaseConfig(epochs=5)
    scratch: ScratchConfig = ScratchConfig(epochs=25)
    sgld: SgldConfig = SgldConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    sampling: SamplingConfig = SamplingConfig()
    grid: GridConfig = GridConfig()
    seeds: SeedConfig = SeedConfig()
    output_dir: str = "runs"
    trace_timing: bool = Field(False, description="Record wall-clock seconds in traces (breaks byte-identical reruns)")

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.model_validate_json(text)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def provenance(self) -> str:
        s = self.seeds
        return f"config_hash={self.config_hash()} seeds=data:{s.data},init:{s.init},train:{s.train},eval:{s.eval}"
