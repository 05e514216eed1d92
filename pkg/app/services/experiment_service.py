"""
Experiment Service - the pretrain -> fine-tune pipeline, the from-scratch
baseline, the gamma sweep, flow sampling and the SGLD cross-check.

Every command takes an ``ExperimentConfig`` and an output directory, writes
its artifacts there and returns a ``CommandSummary``. The CLI and the HTTP API
are thin wrappers around ``experiment_service``.
"""
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from app.core.exceptions import FlowError, UsageError
from app.crud.crud_artifact import artifact
from app.crud.crud_checkpoint import checkpoint
from app.models.flows import ConditionalFlow, FlowSampler, FlowStack, init_from_pretrained
from app.schemas.experiment import ExperimentConfig, ScratchInit, SeedConfig
from app.schemas.report import CommandSummary, KlReport, SweepFailure, TrainingTrace
from app.services.metrics_service import (
    agreement_table,
    density_grid,
    grid_posterior_moments,
    kl_proxy,
    moment_report,
)
from app.services.objective_service import ConditionalFlowPrior, NoiseModel, train_mle, train_vi
from app.services.problem_service import (
    Dataset,
    ForwardOperator,
    RosenbrockPrior,
    generate_pairs,
    observed_data,
    posterior_log_target,
    posterior_log_target_grad,
    rosenbrock_logpdf,
    rosenbrock_sample,
)
from app.services.sampler_service import flow_samples, sgld

logger = logging.getLogger(__name__)

# independent random streams derived from the data seed
STREAM_LOW_FIDELITY, STREAM_OPERATOR, STREAM_X_TRUE, STREAM_OBSERVATION, STREAM_HIGH_FIDELITY = range(5)
# ... and from the eval seed
STREAM_KL, STREAM_SAMPLES, STREAM_SGLD = range(3)

PRETRAINED_CHECKPOINT = "pretrained.ckpt"
FINETUNED_CHECKPOINT = "finetuned.ckpt"
SCRATCH_CHECKPOINT = "scratch.ckpt"

PathLike = Union[str, Path]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _clock(config: ExperimentConfig):
    return time.perf_counter if config.trace_timing else None


def row_seed(base: int, index: int) -> int:
    """Seed of sweep row ``index``; rerunning with ``--seed`` on it reproduces the row."""
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0] % 2 ** 31)


@dataclass
class HighFidelityProblem:
    """The high-fidelity inverse problem at one gamma: operator, truth and observation."""
    gamma: float
    operator: ForwardOperator
    noise: NoiseModel
    x_true: np.ndarray
    y: np.ndarray

    def header(self) -> str:
        y = ",".join(f"{v:.17g}" for v in self.y)
        return f"gamma={self.gamma} sigma={self.noise.sigma} y={y}"


def high_fidelity_problem(config: ExperimentConfig, gamma: Optional[float] = None) -> HighFidelityProblem:
    """Operator, x_true and observed y; depends only on the data seed and gamma."""
    gamma = config.data.gammas[0] if gamma is None else gamma
    seed = config.seeds.data
    operator = ForwardOperator.random(gamma, config.data.sigma, _rng(seed, STREAM_OPERATOR))
    if config.data.x_true is not None:
        x_true = np.asarray(config.data.x_true, dtype=np.float64)
    else:
        x_true = rosenbrock_sample(_rng(seed, STREAM_X_TRUE), 1)[0]
    y = observed_data(x_true, operator, _rng(seed, STREAM_OBSERVATION))
    return HighFidelityProblem(gamma=gamma, operator=operator, noise=NoiseModel(config.data.sigma), x_true=x_true, y=y)


def low_fidelity_dataset(config: ExperimentConfig) -> Dataset:
    """Rosenbrock prior draws observed through the identity operator."""
    operator = ForwardOperator.identity(config.data.sigma)
    return generate_pairs(
        rosenbrock_sample, operator, config.data.n_pretrain_pairs,
        _rng(config.seeds.data, STREAM_LOW_FIDELITY), seed=config.seeds.data,
    )


class ExperimentService:
    def _out(self, config: ExperimentConfig, out_dir: Optional[PathLike]) -> Path:
        return Path(out_dir if out_dir is not None else config.output_dir)

    def _provenance(self, config: ExperimentConfig, command: str, *extra: str) -> List[str]:
        return [config.provenance(), f"command={command}", *extra]

    def _kl(self, sampler, problem: HighFidelityProblem, config: ExperimentConfig) -> float:
        # common latents across all flows of one report
        return kl_proxy(
            sampler, problem.operator, problem.y, RosenbrockPrior(), problem.noise,
            config.evaluation.n_eval, _rng(config.seeds.eval, STREAM_KL),
        )

    # ------------------------------------------------------------ training steps

    def _pretrain(self, config: ExperimentConfig, dataset: Dataset) -> Tuple[ConditionalFlow, TrainingTrace]:
        f = config.flow
        flow = ConditionalFlow(
            dataset.x.shape[1], dataset.y.shape[1], f.n_blocks, np.random.default_rng(config.seeds.init),
            hidden=f.hidden, clamp=f.clamp, negative_slope=f.negative_slope,
        )
        p = config.pretrain
        trace = train_mle(
            flow, dataset, epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, decay=p.decay,
            seed=config.seeds.train, decay_every=p.decay_every, clock=_clock(config),
            max_grad_norm=p.max_grad_norm, spike_tolerance=p.spike_tolerance,
        )
        return flow, trace

    def _finetune(self, config: ExperimentConfig, flow: ConditionalFlow, problem: HighFidelityProblem):
        sampler, prior = init_from_pretrained(flow)
        bound = sampler.bind(problem.y)
        kl_before = self._kl(bound, problem, config)
        p = config.finetune
        trace = train_vi(
            bound, problem.operator, problem.y, ConditionalFlowPrior(prior, problem.y), problem.noise,
            n_latent=p.n_latent, epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, decay=p.decay,
            seed=config.seeds.train, decay_every=p.decay_every, clock=_clock(config),
            max_grad_norm=p.max_grad_norm, spike_tolerance=p.spike_tolerance,
        )
        kl_after = self._kl(bound, problem, config)
        logger.info(f"Fine-tuning at gamma={problem.gamma}: KL proxy {kl_before:.4f} -> {kl_after:.4f}")
        return sampler, trace, kl_before, kl_after

    def _scratch(self, config: ExperimentConfig, problem: HighFidelityProblem):
        f, p = config.flow, config.scratch
        rng = np.random.default_rng(config.seeds.init)
        stack = FlowStack(problem.operator.dim, f.n_blocks, rng, hidden=f.hidden, clamp=f.clamp,
                          negative_slope=f.negative_slope)
        if p.init == ScratchInit.RANDOM:
            stack.randomize(rng, p.init_scale)
        sampler = FlowSampler(stack)
        kl_before = self._kl(sampler, problem, config)
        trace = train_vi(
            sampler, problem.operator, problem.y, RosenbrockPrior(), problem.noise,
            n_latent=p.n_latent, epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, decay=p.decay,
            seed=config.seeds.train, decay_every=p.decay_every, phase="scratch", clock=_clock(config),
            max_grad_norm=p.max_grad_norm, spike_tolerance=p.spike_tolerance,
        )
        kl_after = self._kl(sampler, problem, config)
        logger.info(f"Scratch training at gamma={problem.gamma}: KL proxy {kl_before:.4f} -> {kl_after:.4f}")
        return stack, trace, kl_before, kl_after

    # ------------------------------------------------------------------ commands

    def pretrain(self, config: ExperimentConfig, out_dir: Optional[PathLike] = None) -> CommandSummary:
        out = self._out(config, out_dir)
        provenance = self._provenance(config, "pretrain")
        dataset = low_fidelity_dataset(config)
        flow, trace = self._pretrain(config, dataset)
        summary = CommandSummary(command="pretrain", config_hash=config.config_hash())
        summary.artifacts["dataset"] = str(artifact.write_dataset(out / "low_fidelity_pairs.csv", dataset, provenance))
        summary.artifacts["checkpoint"] = str(checkpoint.save(flow, out / PRETRAINED_CHECKPOINT, provenance))
        summary.artifacts["trace"] = str(artifact.write_trace(out / "pretrain_trace.csv", trace, provenance))
        means = trace.epoch_means()
        summary.metrics["first_epoch_objective"] = means[min(means)]
        summary.metrics["final_epoch_objective"] = means[max(means)]
        summary.metrics["rolled_back_steps"] = trace.rolled_back
        return summary

    def finetune(
        self,
        config: ExperimentConfig,
        out_dir: Optional[PathLike] = None,
        checkpoint_path: Optional[PathLike] = None,
    ) -> CommandSummary:
        out = self._out(config, out_dir)
        flow = checkpoint.load(checkpoint_path or out / PRETRAINED_CHECKPOINT)
        if not isinstance(flow, ConditionalFlow):
            raise UsageError("fine-tuning needs a pretrained conditional flow checkpoint")
        problem = high_fidelity_problem(config)
        provenance = self._provenance(config, "finetune", problem.header())
        sampler, trace, kl_before, kl_after = self._finetune(config, flow, problem)

        high_fidelity = generate_pairs(
            rosenbrock_sample, problem.operator, config.data.n_pretrain_pairs,
            _rng(config.seeds.data, STREAM_HIGH_FIDELITY), seed=config.seeds.data,
        )
        summary = CommandSummary(command="finetune", config_hash=config.config_hash())
        summary.artifacts["checkpoint"] = str(
            checkpoint.save(sampler.to_conditional_flow(), out / FINETUNED_CHECKPOINT, provenance))
        summary.artifacts["trace"] = str(artifact.write_trace(out / "finetune_trace.csv", trace, provenance))
        summary.artifacts["dataset"] = str(
            artifact.write_dataset(out / "high_fidelity_pairs.csv", high_fidelity, provenance))
        summary.metrics.update(kl_before=kl_before, kl_after=kl_after,
                               first_epoch_objective=trace.epoch_means()[1], rolled_back_steps=trace.rolled_back)
        return summary

    def scratch(self, config: ExperimentConfig, out_dir: Optional[PathLike] = None) -> CommandSummary:
        out = self._out(config, out_dir)
        problem = high_fidelity_problem(config)
        provenance = self._provenance(config, "scratch", problem.header())
        stack, trace, kl_before, kl_after = self._scratch(config, problem)
        summary = CommandSummary(command="scratch", config_hash=config.config_hash())
        summary.artifacts["checkpoint"] = str(checkpoint.save(stack, out / SCRATCH_CHECKPOINT, provenance))
        summary.artifacts["trace"] = str(artifact.write_trace(out / "scratch_trace.csv", trace, provenance))
        summary.metrics.update(kl_before=kl_before, kl_after=kl_after,
                               first_epoch_objective=trace.epoch_means()[1], rolled_back_steps=trace.rolled_back)
        return summary

    def sweep_row(self, config: ExperimentConfig, gamma: float, seed: int) -> KlReport:
        """One gamma: fresh operator, pretrain, fine-tune and scratch, all seeded from ``seed``."""
        row_config = config.model_copy(update={"seeds": SeedConfig.from_base(seed)})
        problem = high_fidelity_problem(row_config, gamma)
        flow, _ = self._pretrain(row_config, low_fidelity_dataset(row_config))
        _, _, kl_low, kl_precond = self._finetune(row_config, flow, problem)
        _, _, _, kl_scratch = self._scratch(row_config, problem)
        return KlReport(
            gamma=gamma, kl_low_fidelity=kl_low, kl_scratch=kl_scratch, kl_preconditioned=kl_precond,
            n_eval_samples=config.evaluation.n_eval, seed=seed,
        )

    def sweep(self, config: ExperimentConfig, out_dir: Optional[PathLike] = None) -> CommandSummary:
        out = self._out(config, out_dir)
        summary = CommandSummary(command="sweep", config_hash=config.config_hash())
        for index, gamma in enumerate(config.data.gammas):
            seed = row_seed(config.seeds.data, index)
            try:
                summary.kl_reports.append(self.sweep_row(config, gamma, seed))
            except FlowError as e:
                logger.error(f"Sweep row gamma={gamma} seed={seed} failed: {e}")
                summary.failures.append(SweepFailure(gamma=gamma, seed=seed, error=str(e)))
        summary.artifacts["kl_table"] = str(artifact.write_kl_table(
            out / "kl_table.csv", summary.kl_reports, summary.failures, self._provenance(config, "sweep")))
        return summary

    def _posterior_sampler(self, model: Union[ConditionalFlow, FlowStack], problem: HighFidelityProblem):
        if isinstance(model, ConditionalFlow):
            sampler, _ = init_from_pretrained(model)
            return sampler.bind(problem.y)
        return FlowSampler(model)

    def sample(
        self,
        config: ExperimentConfig,
        out_dir: Optional[PathLike] = None,
        checkpoint_path: Optional[PathLike] = None,
        n: Optional[int] = None,
    ) -> CommandSummary:
        out = self._out(config, out_dir)
        n = config.sampling.n_samples if n is None else n
        flow = checkpoint.load(checkpoint_path or out / FINETUNED_CHECKPOINT)
        problem = high_fidelity_problem(config)
        provenance = self._provenance(config, "sample", problem.header())
        sampler = self._posterior_sampler(flow, problem)
        samples = flow_samples(sampler, n, _rng(config.seeds.eval, STREAM_SAMPLES))
        grid = density_grid(sampler, config.grid)

        summary = CommandSummary(command="sample", config_hash=config.config_hash())
        summary.artifacts["samples"] = str(artifact.write_samples(out / "flow_samples.csv", samples, provenance))
        summary.artifacts["density_grid"] = str(artifact.write_grid(out / "flow_density_grid.csv", grid, provenance))
        summary.moments["flow"] = moment_report(samples).summary()
        summary.metrics["grid_mass"] = grid.integral()
        return summary

    def mcmc(
        self,
        config: ExperimentConfig,
        out_dir: Optional[PathLike] = None,
        finetuned_path: Optional[PathLike] = None,
        scratch_path: Optional[PathLike] = None,
    ) -> CommandSummary:
        """SGLD chain and quadrature oracle, cross-checked against the trained flows.

        The fine-tuned and scratch checkpoints are taken from the given paths,
        else from the output directory when present; each contributes
        ``sampling.n_samples`` flow draws to the pairwise moment agreement.
        """
        out = self._out(config, out_dir)
        problem = high_fidelity_problem(config)
        provenance = self._provenance(config, "mcmc", problem.header())
        s = config.sgld
        chain = sgld(
            posterior_log_target_grad(problem.operator, problem.y), np.zeros(problem.operator.dim),
            s.n_steps, s.step_a, s.step_b, s.step_gamma, s.burn_in, s.stride,
            _rng(config.seeds.eval, STREAM_SGLD), seed=config.seeds.eval,
        )
        log_target = posterior_log_target(problem.operator, problem.y)
        reports = {
            "sgld": moment_report(chain.samples, autocorrelated=True),
            "quadrature": grid_posterior_moments(log_target, config.grid),
        }
        for name, path, default in (
            ("preconditioned", finetuned_path, FINETUNED_CHECKPOINT),
            ("scratch", scratch_path, SCRATCH_CHECKPOINT),
        ):
            if path is None:
                if not (out / default).is_file():
                    continue
                path = out / default
            sampler = self._posterior_sampler(checkpoint.load(path), problem)
            samples = flow_samples(sampler, config.sampling.n_samples, _rng(config.seeds.eval, STREAM_SAMPLES))
            reports[name] = moment_report(samples)

        summary = CommandSummary(command="mcmc", config_hash=config.config_hash())
        summary.artifacts["chain"] = str(artifact.write_samples(out / "sgld_chain.csv", chain.samples, provenance))
        summary.artifacts["posterior_grid"] = str(artifact.write_grid(
            out / "posterior_density_grid.csv", density_grid(log_target, config.grid), provenance))
        summary.artifacts["prior_grid"] = str(artifact.write_grid(
            out / "prior_density_grid.csv", density_grid(rosenbrock_logpdf, config.grid), provenance))
        summary.moments = {name: report.summary() for name, report in reports.items()}
        summary.agreement = agreement_table(reports, config.evaluation.agreement_n_se)
        summary.artifacts["moments"] = str(artifact.write_moments(
            out / "posterior_moments.csv", summary.moments, provenance))
        disagreements = [key for key, ok in summary.agreement.items() if not ok]
        if disagreements:
            logger.warning(f"Posterior estimates disagree: {', '.join(disagreements)}")
        return summary


experiment_service = ExperimentService()
