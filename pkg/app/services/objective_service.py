"""
Objective Service - conditional maximum-likelihood pretraining, the variational
(KL) objective and preconditioned fine-tuning, with their Adam training loops.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Iterator, List, Optional, Protocol, Union

import numpy as np

from app.core import diffcore as dc
from app.core.diffcore import Adam, Tensor, clip_grad_norm, lr_schedule
from app.core.exceptions import DimensionError, NonFiniteError, UsageError
from app.models.flows import (
    ConditionalFlow,
    ConditionalSampler,
    FlowSampler,
    FrozenConditionalPrior,
    standard_normal_logpdf,
)
from app.schemas.report import TraceRow, TrainingTrace
from app.services.problem_service import Dataset, ForwardOperator

logger = logging.getLogger(__name__)

Sampler = Union[FlowSampler, ConditionalSampler]
Clock = Callable[[], float]

DEFAULT_MAX_GRAD_NORM = 1.0
DEFAULT_SPIKE_TOLERANCE = 20.0


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic Gaussian measurement noise."""
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise UsageError(f"noise standard deviation must be positive, got {self.sigma}")


class PriorDensity(Protocol):
    def logprob(self, x: Tensor) -> Tensor:
        """log π_prior for each row of x, differentiable in x."""


class StandardNormalPrior:
    def logprob(self, x: Tensor) -> Tensor:
        return standard_normal_logpdf(x)


class ConditionalFlowPrior:
    """The frozen low-fidelity posterior at observation y, used as a prior."""

    def __init__(self, prior: FrozenConditionalPrior, y: np.ndarray):
        self.prior = prior
        self.y = np.asarray(y, dtype=np.float64)

    def logprob(self, x: Tensor) -> Tensor:
        return conditional_prior_logprob(self.prior, self.y, x)


def _finite_scalar(loss: Tensor, what: str) -> Tensor:
    if not math.isfinite(loss.item()):
        raise NonFiniteError(f"{what} is not finite ({loss.item()})", op=what)
    return loss


def mle_loss(flow: ConditionalFlow, y: Union[np.ndarray, Tensor], x: Union[np.ndarray, Tensor]) -> Tensor:
    """Batch mean of ½‖G(y, x)‖² − log|det ∇G(y, x)|."""
    y, x = dc.as_tensor(y), dc.as_tensor(x)
    if y.ndim == 1:
        y, x = dc.reshape(y, (1, y.shape[0])), dc.reshape(x, (1, x.shape[0]))
    if y.shape[0] == 0 or x.shape[0] == 0:
        raise UsageError("mle_loss needs a non-empty batch")
    z_y, z_x, logdet = flow.forward(y, x)
    per_example = dc.scale(dc.sq_norm(z_y, axis=1) + dc.sq_norm(z_x, axis=1), 0.5) - logdet
    return _finite_scalar(dc.mean(per_example), "mle_loss")


def conditional_prior_logprob(
    prior: FrozenConditionalPrior,
    y: np.ndarray,
    x: Union[np.ndarray, Tensor],
) -> Tensor:
    """log π_z(G_x(y, x)) + log|det ∇_x G_x(y, x)|, differentiable in x only.

    A vector x gives a scalar tensor; a batch gives one value per row.
    """
    x = dc.as_tensor(x)
    if x.ndim == 1:
        return dc.reshape(prior.logprob(y, x), ())
    return prior.logprob(y, x)


def vi_loss(
    sampler: Sampler,
    operator: ForwardOperator,
    y: np.ndarray,
    prior: PriorDensity,
    noise: NoiseModel,
    z_batch: Union[np.ndarray, Tensor],
) -> Tensor:
    """Monte Carlo mean of ‖F(T(z)) − y‖²/(2σ²) − log π_prior(T(z)) − log|det ∇_z T(z)|."""
    z = dc.as_tensor(z_batch)
    if z.ndim != 2 or z.shape[0] == 0:
        raise UsageError(f"z_batch must be a non-empty (batch, dim) array, got shape {z.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (operator.matrix.shape[0],):
        raise DimensionError(f"y must have shape ({operator.matrix.shape[0]},), got {y.shape}")
    x, logdet = sampler.sample_with_logdet(z, y)
    misfit = dc.scale(dc.sq_norm(operator.apply(x) - y, axis=1), 0.5 / noise.sigma ** 2)
    per_sample = misfit - prior.logprob(x) - logdet
    return _finite_scalar(dc.mean(per_sample), "vi_loss")


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class StepGuard:
    """Rolls back the last optimizer step when the next batch objective jumps
    far above its recent level.

    A jump is more than ``tolerance`` median absolute deviations (at least one
    nat) above the median of the last ``window`` accepted objectives. Nothing
    is rejected during the first ``warmup`` steps, and after ``patience``
    consecutive rejections the next batch is accepted regardless.
    """

    def __init__(
        self,
        tolerance: Optional[float] = DEFAULT_SPIKE_TOLERANCE,
        window: int = 50,
        warmup: int = 20,
        patience: int = 5,
    ):
        self.tolerance = tolerance
        self.recent: Deque[float] = deque(maxlen=window)
        self.warmup = warmup
        self.patience = patience
        self.rejected = 0
        self._streak = 0

    def is_spike(self, objective: float) -> bool:
        if self.tolerance is None or len(self.recent) < self.warmup or self._streak >= self.patience:
            return False
        values = np.asarray(self.recent)
        median = float(np.median(values))
        spread = max(1.0, float(np.median(np.abs(values - median))))
        return objective > median + self.tolerance * spread

    def reject(self) -> None:
        self.rejected += 1
        self._streak += 1

    def accept(self, objective: float) -> None:
        self.recent.append(objective)
        self._streak = 0


def _log_epoch(trace: TrainingTrace, phase: str, epoch: int, lr: float) -> None:
    rows = [r.objective for r in trace.rows if r.phase == phase and r.epoch == epoch]
    if not rows:
        logger.warning(f"[{phase}] epoch {epoch}: every step was rolled back")
        return
    logger.info(f"[{phase}] epoch {epoch}: mean objective {np.mean(rows):.4f} (lr {lr:.3g}, {len(rows)} steps)")


def _optimize(
    params: List[Tensor],
    objective: Callable[[np.ndarray], Tensor],
    batches: Callable[[], Iterator[np.ndarray]],
    epochs: int,
    lr: float,
    decay: float,
    decay_every: int,
    phase: str,
    clock: Optional[Clock],
    max_grad_norm: Optional[float],
    spike_tolerance: Optional[float],
) -> TrainingTrace:
    """Adam with per-epoch decay, global-norm gradient clipping and spike rollback."""
    optimizer = Adam(params, lr=lr)
    guard = StepGuard(spike_tolerance)
    trace = TrainingTrace()
    start = clock() if clock else 0.0
    step = 0
    before_last_step = optimizer.snapshot()
    for epoch in range(epochs):
        optimizer.lr = lr_schedule(epoch, lr, decay, decay_every)
        for index in batches():
            optimizer.zero_grad()
            loss = objective(index)
            value = loss.item()
            if guard.is_spike(value):
                optimizer.restore(before_last_step)
                guard.reject()
                logger.warning(f"[{phase}] epoch {epoch + 1}: objective jumped to {value:.4g}, "
                               f"rolled back step {step}")
                continue
            guard.accept(value)
            before_last_step = optimizer.snapshot()
            loss.backward()
            if max_grad_norm is not None:
                clip_grad_norm(optimizer.params, max_grad_norm)
            optimizer.step()
            step += 1
            trace.append(TraceRow(
                phase=phase, epoch=epoch + 1, step=step, objective=value, lr=optimizer.lr,
                seconds=(clock() - start) if clock else 0.0,
            ))
        _log_epoch(trace, phase, epoch + 1, optimizer.lr)
    trace.rolled_back = guard.rejected
    if guard.rejected:
        logger.warning(f"[{phase}] {guard.rejected} optimizer steps rolled back")
    return trace


def train_mle(
    flow: ConditionalFlow,
    dataset: Dataset,
    epochs: int = 25,
    batch_size: int = 64,
    lr: float = 1e-3,
    decay: float = 0.9,
    seed: int = 0,
    decay_every: int = 1,
    phase: str = "pretrain",
    clock: Optional[Clock] = None,
    max_grad_norm: Optional[float] = DEFAULT_MAX_GRAD_NORM,
    spike_tolerance: Optional[float] = DEFAULT_SPIKE_TOLERANCE,
) -> TrainingTrace:
    """Shuffled mini-batch Adam on ``mle_loss`` with per-epoch learning-rate decay."""
    n = len(dataset)
    if n < batch_size:
        raise UsageError(f"dataset of {n} pairs is smaller than batch size {batch_size}")
    rng = np.random.default_rng(seed)
    return _optimize(
        flow.trainable_parameters(),
        lambda index: mle_loss(flow, dataset.y[index], dataset.x[index]),
        lambda: _batches(rng, n, batch_size),
        epochs, lr, decay, decay_every, phase, clock, max_grad_norm, spike_tolerance,
    )


def train_vi(
    sampler: Sampler,
    operator: ForwardOperator,
    y: np.ndarray,
    prior: PriorDensity,
    noise: NoiseModel,
    n_latent: int = 1000,
    epochs: int = 5,
    batch_size: int = 64,
    lr: float = 1e-3,
    decay: float = 0.9,
    seed: int = 0,
    decay_every: int = 1,
    phase: str = "finetune",
    clock: Optional[Clock] = None,
    max_grad_norm: Optional[float] = DEFAULT_MAX_GRAD_NORM,
    spike_tolerance: Optional[float] = DEFAULT_SPIKE_TOLERANCE,
) -> TrainingTrace:
    """Adam on ``vi_loss`` over a fixed latent set drawn once and reshuffled each epoch."""
    if n_latent < batch_size:
        raise UsageError(f"latent set of {n_latent} is smaller than batch size {batch_size}")
    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((n_latent, sampler.dim))
    return _optimize(
        sampler.trainable_parameters(),
        lambda index: vi_loss(sampler, operator, y, prior, noise, latents[index]),
        lambda: _batches(rng, n_latent, batch_size),
        epochs, lr, decay, decay_every, phase, clock, max_grad_norm, spike_tolerance,
    )
