"""
Sampler Service - posterior draws from trained flows and a stochastic gradient
Langevin dynamics reference sampler.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from app.core import diffcore as dc
from app.core.exceptions import NonFiniteError, UsageError
from app.models.flows import ConditionalFlow, ConditionalSampler, FlowSampler

logger = logging.getLogger(__name__)

FlowSource = Union[FlowSampler, ConditionalSampler, ConditionalFlow]

NOISE_BLOCK = 10_000


def flow_samples(
    source: FlowSource,
    n: int,
    rng: np.random.Generator,
    y: Optional[np.ndarray] = None,
    return_latents: bool = False,
):
    """Draw z ~ N(0, I) and map it to model space.

    Conditional sources (a ``ConditionalFlow`` or an unbound ``ConditionalSampler``)
    need the observation ``y``.
    """
    if n < 1:
        raise UsageError(f"sample count must be positive, got {n}")
    dim = source.dx if isinstance(source, ConditionalFlow) else source.dim
    z = rng.standard_normal((n, dim))
    with dc.no_grad():
        if isinstance(source, ConditionalFlow):
            if y is None:
                raise UsageError("sampling a conditional flow needs the observation y")
            x, _ = source.posterior_sample(y, dc.Tensor(z))
        else:
            x, _ = source.sample_with_logdet(dc.Tensor(z), y)
    return (x.values, z) if return_latents else x.values


@dataclass
class Chain:
    """Retained SGLD states, shape (n_retained, d) or (n_retained, n_chains, d), plus their schedule."""
    samples: np.ndarray
    step_sizes: np.ndarray
    burn_in: int
    stride: int
    seed: Optional[int] = None

    def __len__(self) -> int:
        return self.samples.shape[0]


def sgld_step_sizes(n_steps: int, step_a: float, step_b: float, step_gamma: float) -> np.ndarray:
    """ε_t = a (b + t)^(−γ) for t = 0 .. n_steps − 1."""
    t = np.arange(n_steps, dtype=np.float64)
    return step_a * (step_b + t) ** (-step_gamma)


def sgld(
    log_target_grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    n_steps: int,
    step_a: float,
    step_b: float,
    step_gamma: float,
    burn_in: int,
    stride: int,
    rng: np.random.Generator,
    inject_noise: bool = True,
    seed: Optional[int] = None,
) -> Chain:
    """x_{t+1} = x_t + (ε_t/2) ∇log π(x_t) + η_t, η_t ~ N(0, ε_t I).

    ``x0`` of shape (d,) runs one chain; shape (n_chains, d) advances independent
    chains in lockstep, with ``log_target_grad`` applied row-wise. With
    ``inject_noise=False`` the update is plain gradient ascent.
    """
    if not 0.5 < step_gamma <= 1.0:
        raise UsageError(f"step_gamma must lie in (0.5, 1], got {step_gamma}")
    if n_steps <= burn_in:
        raise UsageError(f"n_steps ({n_steps}) must exceed burn_in ({burn_in})")
    if stride < 1:
        raise UsageError(f"stride must be positive, got {stride}")
    x = np.array(x0, dtype=np.float64)
    eps = sgld_step_sizes(n_steps, step_a, step_b, step_gamma)
    half_eps = 0.5 * eps
    noise_scale = np.sqrt(eps) if inject_noise else np.zeros(n_steps)
    retained = []
    for block_start in range(0, n_steps, NOISE_BLOCK):
        block = min(NOISE_BLOCK, n_steps - block_start)
        noise = rng.standard_normal((block,) + x.shape)
        for offset in range(block):
            t = block_start + offset
            x = x + half_eps[t] * log_target_grad(x) + noise_scale[t] * noise[offset]
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"SGLD state became non-finite at step {t}", op="sgld", step=t)
            if t >= burn_in and (t - burn_in) % stride == 0:
                retained.append(x)
    logger.info(f"SGLD retained {len(retained)} of {n_steps} states (burn-in {burn_in}, stride {stride})")
    return Chain(samples=np.array(retained), step_sizes=eps, burn_in=burn_in, stride=stride, seed=seed)
