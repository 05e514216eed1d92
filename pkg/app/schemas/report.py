"""
Pydantic schemas for training traces and evaluation reports.
"""
import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class TraceRow(BaseModel):
    """One optimizer step."""
    phase: str
    epoch: int = Field(..., ge=1)
    step: int = Field(..., ge=1)
    objective: float
    lr: float
    seconds: float = 0.0

    @field_validator("objective")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("objective must be finite")
        return v


class TrainingTrace(BaseModel):
    """Per-step objective records of one or more training phases."""
    rows: List[TraceRow] = []
    rolled_back: int = Field(0, ge=0, description="Steps undone after an objective spike")

    @model_validator(mode="after")
    def _steps_increase(self) -> "TrainingTrace":
        last: Dict[str, int] = {}
        for row in self.rows:
            if row.phase in last and row.step <= last[row.phase]:
                raise ValueError(f"steps must increase within phase '{row.phase}'")
            last[row.phase] = row.step
        return self

    def append(self, row: TraceRow) -> None:
        previous = next((r for r in reversed(self.rows) if r.phase == row.phase), None)
        if previous is not None and row.step <= previous.step:
            raise ValueError(f"steps must increase within phase '{row.phase}'")
        self.rows.append(row)

    def epoch_means(self, phase: Optional[str] = None) -> Dict[int, float]:
        sums: Dict[int, List[float]] = {}
        for row in self.rows:
            if phase is None or row.phase == phase:
                sums.setdefault(row.epoch, []).append(row.objective)
        return {epoch: sum(values) / len(values) for epoch, values in sorted(sums.items())}


class KlReport(BaseModel):
    """One row of the γ sweep: KL proxies of the three posterior estimates."""
    gamma: float
    kl_low_fidelity: float
    kl_scratch: float
    kl_preconditioned: float
    n_eval_samples: int = Field(..., ge=10_000)
    seed: int

    @field_validator("kl_low_fidelity", "kl_scratch", "kl_preconditioned")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("KL proxy must be finite")
        return v


class SweepFailure(BaseModel):
    """A sweep row that did not complete."""
    gamma: float
    seed: int
    error: str


class MomentSummary(BaseModel):
    """JSON-friendly mean/covariance summary of a sample set."""
    n: int
    mean: List[float]
    covariance: List[List[float]]
    mean_standard_error: List[float]
    effective_sample_size: Optional[float] = None


class CommandSummary(BaseModel):
    """What a pipeline command produced."""
    command: str
    config_hash: str
    artifacts: Dict[str, str] = {}
    metrics: Dict[str, float] = {}
    moments: Dict[str, MomentSummary] = {}
    agreement: Dict[str, bool] = {}
    kl_reports: List[KlReport] = []
    failures: List[SweepFailure] = []
