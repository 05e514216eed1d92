"""
Problem Service - Rosenbrock prior, linear forward operators and the
low-/high-fidelity datasets of the 2D toy problem.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from app.core import diffcore as dc
from app.core.diffcore import Tensor
from app.core.exceptions import DimensionError, DomainError, UsageError

logger = logging.getLogger(__name__)

# x2 | x1 ~ N(x1², 1/2): the exponent -(x2 - x1²)² equals -(x2 - x1²)² / (2 · 1/2)
ROSENBROCK_CONDITIONAL_STD = np.sqrt(0.5)


def rosenbrock_logpdf(x: Union[np.ndarray, Tensor]) -> Union[np.ndarray, Tensor]:
    """Unnormalized log-density -x1²/2 - (x2 - x1²)² along the last axis.

    Arrays give arrays; tensors of shape (batch, 2) give differentiable (batch,) tensors.
    """
    if isinstance(x, Tensor):
        if x.ndim != 2 or x.shape[1] != 2:
            raise DimensionError(f"Rosenbrock expects shape (batch, 2), got {x.shape}")
        x1, x2 = dc.split(x, [1, 1], axis=1)
        x1 = dc.reshape(x1, (x.shape[0],))
        x2 = dc.reshape(x2, (x.shape[0],))
        return dc.scale(dc.square(x1), -0.5) - dc.square(x2 - dc.square(x1))
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise DimensionError(f"Rosenbrock expects a trailing dimension of 2, got {x.shape}")
    x1, x2 = x[..., 0], x[..., 1]
    return -0.5 * x1 ** 2 - (x2 - x1 ** 2) ** 2


def rosenbrock_grad(x: np.ndarray) -> np.ndarray:
    """Analytic gradient of ``rosenbrock_logpdf`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    r = x2 - x1 ** 2
    return np.stack([-x1 + 4.0 * x1 * r, -2.0 * r], axis=-1)


def rosenbrock_sample(rng: np.random.Generator, n: int) -> np.ndarray:
    """Exact draws: x1 ~ N(0, 1), x2 | x1 ~ N(x1², 1/2)."""
    if n < 1:
        raise UsageError(f"sample count must be positive, got {n}")
    x1 = rng.standard_normal(n)
    x2 = x1 ** 2 + ROSENBROCK_CONDITIONAL_STD * rng.standard_normal(n)
    return np.stack([x1, x2], axis=1)


def spectral_radius(matrix: np.ndarray) -> float:
    """Largest eigenvalue modulus; closed form for 2×2 (complex roots by modulus)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionError(f"spectral radius needs a square matrix, got {matrix.shape}")
    if matrix.shape == (2, 2):
        half_trace = 0.5 * (matrix[0, 0] + matrix[1, 1])
        det = matrix[0, 0] * matrix[1, 1] - matrix[0, 1] * matrix[1, 0]
        disc = half_trace ** 2 - det
        if disc >= 0.0:
            root = np.sqrt(disc)
            return float(max(abs(half_trace + root), abs(half_trace - root)))
        # complex conjugate pair: |λ|² = det
        return float(np.sqrt(det))
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def build_forward_matrix(
    gamma: float,
    rng: np.random.Generator,
    perturbation: Optional[np.ndarray] = None,
) -> np.ndarray:
    """A = Ā / ρ(Ā) with Ā = Γ + γI and Γ standard normal (drawn unless given)."""
    if gamma < 0:
        raise UsageError(f"gamma must be non-negative, got {gamma}")
    if perturbation is None:
        perturbation = rng.standard_normal((2, 2))
    a_bar = np.asarray(perturbation, dtype=np.float64) + gamma * np.eye(2)
    rho = spectral_radius(a_bar)
    if rho == 0.0:
        raise DomainError("forward matrix has zero spectral radius")
    return a_bar / rho


@dataclass(frozen=True)
class ForwardOperator:
    """x -> A x with isotropic Gaussian noise of standard deviation sigma."""
    matrix: np.ndarray
    sigma: float
    kind: str = "linear"
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise UsageError(f"noise level must be non-negative, got {self.sigma}")

    @classmethod
    def identity(cls, sigma: float, dim: int = 2) -> "ForwardOperator":
        return cls(matrix=np.eye(dim), sigma=sigma, kind="identity")

    @classmethod
    def random(cls, gamma: float, sigma: float, rng: np.random.Generator) -> "ForwardOperator":
        return cls(matrix=build_forward_matrix(gamma, rng), sigma=sigma, kind="random", gamma=gamma)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def apply(self, x: Union[np.ndarray, Tensor]) -> Union[np.ndarray, Tensor]:
        """Noiseless A x for rows of x."""
        if isinstance(x, Tensor):
            return dc.matmul(x, Tensor(self.matrix.T))
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def simulate(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.apply(x) + self.sigma * rng.standard_normal(x.shape[:-1] + (self.matrix.shape[0],))


@dataclass
class DatasetProvenance:
    gamma: Optional[float]
    sigma: float
    seed: Optional[int]
    operator_kind: str

    def header(self) -> str:
        return f"gamma={self.gamma} sigma={self.sigma} seed={self.seed} operator={self.operator_kind}"


@dataclass
class Dataset:
    """Joint (y, x) pairs; rows align."""
    y: np.ndarray
    x: np.ndarray
    provenance: DatasetProvenance
    operator: Optional[ForwardOperator] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.x.shape[0]


def generate_pairs(
    prior_sampler: Callable[[np.random.Generator, int], np.ndarray],
    operator: ForwardOperator,
    n: int,
    rng: np.random.Generator,
    seed: Optional[int] = None,
) -> Dataset:
    """x from the prior, y = A x + σ ε."""
    if n < 1:
        raise UsageError(f"dataset size must be positive, got {n}")
    x = prior_sampler(rng, n)
    y = operator.simulate(x, rng)
    provenance = DatasetProvenance(gamma=operator.gamma, sigma=operator.sigma, seed=seed, operator_kind=operator.kind)
    logger.info(f"Generated {n} pairs ({provenance.header()})")
    return Dataset(y=y, x=x, provenance=provenance, operator=operator)


def observed_data(x_true: np.ndarray, operator: ForwardOperator, rng: np.random.Generator) -> np.ndarray:
    """A single high-fidelity observation y = A x_true + σ ε."""
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_true.shape != (operator.dim,):
        raise DimensionError(f"x_true must have shape ({operator.dim},), got {x_true.shape}")
    return operator.simulate(x_true, rng)


class RosenbrockPrior:
    """Analytic prior density for the objectives."""

    def logprob(self, x: Tensor) -> Tensor:
        return rosenbrock_logpdf(x)


def posterior_log_target(operator: ForwardOperator, y: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Unnormalized high-fidelity log-posterior on arrays of shape (..., 2)."""
    y = np.asarray(y, dtype=np.float64)

    def _logpdf(x: np.ndarray) -> np.ndarray:
        resid = operator.apply(x) - y
        return -0.5 * np.sum(resid ** 2, axis=-1) / operator.sigma ** 2 + rosenbrock_logpdf(x)

    return _logpdf


def posterior_log_target_grad(operator: ForwardOperator, y: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Gradient of ``posterior_log_target``: -Aᵀ(Ax - y)/σ² + ∇ log π_prior."""
    y = np.asarray(y, dtype=np.float64)
    a = operator.matrix
    inv_var = 1.0 / operator.sigma ** 2

    def _grad(x: np.ndarray) -> np.ndarray:
        return -inv_var * ((x @ a.T - y) @ a) + rosenbrock_grad(x)

    return _grad
