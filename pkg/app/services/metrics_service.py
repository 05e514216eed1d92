"""
Metrics Service - KL proxy, moment diagnostics, density grids and the grid
quadrature posterior oracle.
"""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Dict, Mapping, Optional, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from app.core import diffcore as dc
from app.core.exceptions import NonFiniteError, UsageError
from app.models.flows import FlowSampler, FlowStack, standard_normal_logpdf
from app.schemas.experiment import GridConfig
from app.schemas.report import MomentSummary
from app.services.objective_service import NoiseModel, PriorDensity, Sampler, vi_loss
from app.services.problem_service import ForwardOperator

logger = logging.getLogger(__name__)

MIN_KL_SAMPLES = 10_000
KL_CHUNK = 5_000


def kl_proxy(
    sampler: Sampler,
    operator: ForwardOperator,
    y: np.ndarray,
    prior: PriorDensity,
    noise: NoiseModel,
    n: int,
    rng: np.random.Generator,
) -> float:
    """The variational objective on fresh latents: KL to the posterior plus a constant."""
    if n < MIN_KL_SAMPLES:
        raise UsageError(f"kl_proxy needs at least {MIN_KL_SAMPLES} samples, got {n}")
    z = rng.standard_normal((n, sampler.dim))
    total = 0.0
    with dc.no_grad():
        for start in range(0, n, KL_CHUNK):
            chunk = z[start:start + KL_CHUNK]
            total += vi_loss(sampler, operator, y, prior, noise, chunk).item() * chunk.shape[0]
    value = total / n
    if not np.isfinite(value):
        raise NonFiniteError(f"kl_proxy is not finite ({value})", op="kl_proxy")
    return value


def effective_sample_size(samples: np.ndarray, n_batches: int = 50) -> float:
    """Batch-means ESS, minimized over coordinates; at most the sample count."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 2 * n_batches:
        return float(n)
    size = n // n_batches
    trimmed = samples[: size * n_batches]
    batch_means = trimmed.reshape(n_batches, size, -1).mean(axis=1)
    var = trimmed.var(axis=0, ddof=1)
    batch_var = size * batch_means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ess = np.where(batch_var > 0, n * var / batch_var, n)
    return float(min(n, np.min(ess)))


@dataclass
class MomentReport:
    mean: np.ndarray
    covariance: np.ndarray
    n: int
    effective_sample_size: float

    @property
    def mean_standard_error(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance) / self.effective_sample_size)

    @property
    def covariance_standard_error(self) -> np.ndarray:
        """Gaussian approximation: var(S_ij) = (S_ii S_jj + S_ij²) / n_eff."""
        var = np.diag(self.covariance)
        return np.sqrt((np.outer(var, var) + self.covariance ** 2) / self.effective_sample_size)

    def summary(self) -> MomentSummary:
        return MomentSummary(
            n=self.n,
            mean=self.mean.tolist(),
            covariance=self.covariance.tolist(),
            mean_standard_error=self.mean_standard_error.tolist(),
            effective_sample_size=self.effective_sample_size if np.isfinite(self.effective_sample_size) else None,
        )


def moment_report(samples: np.ndarray, autocorrelated: bool = False) -> MomentReport:
    """Unbiased mean and covariance; chains use a batch-means effective size."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise UsageError("moment_report needs at least two samples of shape (n, d)")
    n = samples.shape[0]
    ess = effective_sample_size(samples) if autocorrelated else float(n)
    return MomentReport(
        mean=samples.mean(axis=0),
        covariance=np.atleast_2d(np.cov(samples, rowvar=False, ddof=1)),
        n=n,
        effective_sample_size=ess,
    )


def means_agree(a: MomentReport, b: MomentReport, n_se: float = 3.0) -> bool:
    """Means agree coordinate-wise within ``n_se`` combined standard errors."""
    combined = np.sqrt(a.mean_standard_error ** 2 + b.mean_standard_error ** 2)
    return bool(np.all(np.abs(a.mean - b.mean) <= n_se * combined))


def covariances_agree(a: MomentReport, b: MomentReport, n_se: float = 3.0) -> bool:
    combined = np.sqrt(a.covariance_standard_error ** 2 + b.covariance_standard_error ** 2)
    return bool(np.all(np.abs(a.covariance - b.covariance) <= n_se * combined))


def agreement_table(reports: Mapping[str, MomentReport], n_se: float = 3.0) -> Dict[str, bool]:
    """Pairwise checks keyed ``"a/b:mean"`` and ``"a/b:covariance"`` in insertion order."""
    table = {}
    for a, b in combinations(reports, 2):
        table[f"{a}/{b}:mean"] = means_agree(reports[a], reports[b], n_se)
        table[f"{a}/{b}:covariance"] = covariances_agree(reports[a], reports[b], n_se)
    return table


@dataclass
class DensityGrid:
    x1: np.ndarray
    x2: np.ndarray
    logp: np.ndarray  # shape (n2, n1), logp[j, i] at (x1[i], x2[j])

    def points(self) -> np.ndarray:
        g1, g2 = np.meshgrid(self.x1, self.x2)
        return np.stack([g1.ravel(), g2.ravel()], axis=1)

    def integral(self) -> float:
        """Trapezoidal integral of exp(logp) over the grid."""
        return float(trapezoid(trapezoid(np.exp(self.logp), self.x1, axis=1), self.x2))


def _grid_axes(grid: GridConfig):
    return np.linspace(grid.x1_min, grid.x1_max, grid.n1), np.linspace(grid.x2_min, grid.x2_max, grid.n2)


def density_grid(
    source: Union[FlowSampler, FlowStack, Callable[[np.ndarray], np.ndarray]],
    grid: GridConfig,
) -> DensityGrid:
    """Log-density on a rectangular grid: exact change of variables for flows,
    direct evaluation for analytic log-densities."""
    x1, x2 = _grid_axes(grid)
    result = DensityGrid(x1=x1, x2=x2, logp=np.empty((grid.n2, grid.n1)))
    points = result.points()
    if isinstance(source, (FlowSampler, FlowStack)):
        values = np.empty(points.shape[0])
        with dc.no_grad():
            for start in range(0, points.shape[0], 20_000):
                chunk = dc.Tensor(points[start:start + 20_000])
                values[start:start + 20_000] = source.log_density(chunk).values
    else:
        values = np.asarray(source(points), dtype=np.float64)
    result.logp = values.reshape(grid.n2, grid.n1)
    return result


def grid_posterior_moments(logpdf: Callable[[np.ndarray], np.ndarray], grid: GridConfig) -> MomentReport:
    """Posterior mean and covariance by quadrature of an unnormalized log-density."""
    x1, x2 = _grid_axes(grid)
    density = DensityGrid(x1=x1, x2=x2, logp=np.empty((grid.n2, grid.n1)))
    points = density.points()
    logp = np.asarray(logpdf(points), dtype=np.float64)
    weights = np.exp(logp - logsumexp(logp))
    mean = weights @ points
    centered = points - mean
    covariance = (centered * weights[:, None]).T @ centered
    return MomentReport(mean=mean, covariance=covariance, n=points.shape[0], effective_sample_size=np.inf)


def standard_normal_density_grid(grid: GridConfig) -> DensityGrid:
    """Reference grid of log N(0, I) in two dimensions."""
    return density_grid(lambda pts: standard_normal_logpdf(dc.Tensor(pts)).values, grid)
