import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from app.core import diffcore as dc
from app.core.diffcore import Tensor
from app.core.exceptions import DimensionError, NonFiniteError, UsageError
from app.models.flows import (
    ConditionalFlow,
    FlowSampler,
    FlowStack,
    conditional_forward,
    init_from_pretrained,
    posterior_sample,
)
from app.services.objective_service import (
    ConditionalFlowPrior,
    NoiseModel,
    StandardNormalPrior,
    StepGuard,
    conditional_prior_logprob,
    mle_loss,
    train_mle,
    train_vi,
    vi_loss,
)
from app.services.problem_service import (
    Dataset,
    DatasetProvenance,
    ForwardOperator,
    RosenbrockPrior,
    generate_pairs,
)
from tests.helpers import numerical_jacobian, parameter_entry_grad

LOG_2PI = math.log(2.0 * math.pi)


def _identity_sampler(dim=2):
    return FlowSampler(FlowStack(dim, 2, np.random.default_rng(0), hidden=8))


def _gaussian_pairs(n, sigma, seed):
    """x ~ N(0, I2), y = x + sigma * eps."""
    return generate_pairs(
        lambda r, size: r.standard_normal((size, 2)),
        ForwardOperator.identity(sigma),
        n,
        np.random.default_rng(seed),
        seed=seed,
    )


LINEAR_SIGMA = 0.4


@pytest.fixture(scope="module")
def linear_gaussian_flow():
    """A small conditional flow trained to convergence on linear-Gaussian pairs."""
    flow = ConditionalFlow(2, 2, 2, np.random.default_rng(0), hidden=16)
    train_mle(flow, _gaussian_pairs(200_000, LINEAR_SIGMA, seed=3), epochs=40, batch_size=1000,
              lr=3e-3, decay=0.9, seed=1)
    return flow


def _sample_entries(param, rng, k=3):
    flat = rng.choice(param.values.size, size=min(k, param.values.size), replace=False)
    return [np.unravel_index(i, param.shape) for i in flat]


class TestMleLoss:
    def test_identity_flow_at_origin(self, small_flow):
        assert mle_loss(small_flow(), np.zeros(2), np.zeros(2)).item() == 0.0

    def test_identity_flow_is_half_squared_norm(self, small_flow):
        r = np.random.default_rng(0)
        y, x = r.normal(size=(7, 2)), r.normal(size=(7, 2))
        expected = 0.5 * np.mean(np.sum(y ** 2, axis=1) + np.sum(x ** 2, axis=1))
        assert mle_loss(small_flow(), y, x).item() == pytest.approx(expected, rel=1e-12)

    def test_identity_flow_expected_value(self, small_flow):
        r = np.random.default_rng(1)
        y, x = r.normal(size=(100_000, 2)), r.normal(size=(100_000, 2))
        assert mle_loss(small_flow(), y, x).item() == pytest.approx(2.0, abs=0.02)

    def test_empty_batch(self, small_flow):
        with pytest.raises(UsageError):
            mle_loss(small_flow(), np.zeros((0, 2)), np.zeros((0, 2)))

    def test_batch_mismatch(self, small_flow):
        with pytest.raises(DimensionError):
            mle_loss(small_flow(), np.zeros((3, 2)), np.zeros((4, 2)))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_finite_differences(self, small_flow, seed):
        flow = small_flow(seed=seed, scale=0.3)
        r = np.random.default_rng(seed)
        y, x = r.normal(size=(5, 2)), r.normal(size=(5, 2))
        flow.zero_grad()
        mle_loss(flow, y, x).backward()
        for name, param in flow.named_parameters():
            for index in _sample_entries(param, r):
                numeric = parameter_entry_grad(lambda: mle_loss(flow, y, x).item(), param, index)
                assert param.grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6), name

    def test_linear_flow_loss_is_negative_log_density_minus_gaussian_constant(self, small_flow):
        # zero output weights with random biases: every coupling is a constant affine map
        flow = small_flow()
        r = np.random.default_rng(8)
        for name, param in flow.named_parameters():
            if name.endswith("b_out"):
                param.values = 0.5 * r.normal(size=param.shape)

        def joint(u):
            z_y, z_x, _ = conditional_forward(flow, u[:2], u[2:])
            return np.concatenate([z_y.values, z_x.values])

        jacobian = numerical_jacobian(joint, np.zeros(4), h=0.5)
        inverse = np.linalg.inv(jacobian)
        density = multivariate_normal(mean=-inverse @ joint(np.zeros(4)), cov=inverse @ inverse.T)
        for u in r.normal(size=(5, 4)):
            loss = mle_loss(flow, u[:2], u[2:]).item()
            # d = dx + dy = 4
            assert -density.logpdf(u) == pytest.approx(loss + 2.0 * LOG_2PI, rel=1e-9)


class TestConditionalPriorLogprob:
    def test_identity_prior_at_origin(self, small_flow):
        _, prior = init_from_pretrained(small_flow())
        value = conditional_prior_logprob(prior, np.array([0.3, 0.1]), np.zeros(2))
        assert value.shape == ()
        assert value.item() == pytest.approx(-LOG_2PI, rel=1e-12)

    def test_identity_prior_ignores_observation(self, small_flow):
        _, prior = init_from_pretrained(small_flow())
        x = np.array([[0.5, -1.0], [1.0, 2.0]])
        a = conditional_prior_logprob(prior, np.array([1.0, 0.0]), x).values
        b = conditional_prior_logprob(prior, np.array([-3.0, 4.0]), x).values
        np.testing.assert_array_equal(a, b)

    def test_gradient_reaches_x_not_prior_weights(self, small_flow):
        _, prior = init_from_pretrained(small_flow(scale=0.3))
        x = Tensor(np.array([0.2, 0.4]), requires_grad=True)
        conditional_prior_logprob(prior, np.array([0.0, 1.0]), x).backward()
        assert x.grad is not None and np.all(np.isfinite(x.grad))
        assert all(p.grad is None for p in prior._flow.parameters())

    def test_wrong_width(self, small_flow):
        _, prior = init_from_pretrained(small_flow())
        with pytest.raises(DimensionError):
            conditional_prior_logprob(prior, np.zeros(2), np.zeros(3))


class TestViLoss:
    def test_identity_case_matches_closed_form(self):
        z = np.random.default_rng(0).normal(size=(64, 2))
        loss = vi_loss(_identity_sampler(), ForwardOperator.identity(1.0), np.zeros(2),
                       StandardNormalPrior(), NoiseModel(1.0), z)
        # misfit ½‖z‖² plus prior ½‖z‖² + log 2π, zero log-det
        expected = np.mean(np.sum(z ** 2, axis=1)) + LOG_2PI
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_identity_case_expected_value(self):
        z = np.random.default_rng(1).normal(size=(1_000_000, 2))
        with dc.no_grad():
            loss = vi_loss(_identity_sampler(), ForwardOperator.identity(1.0), np.zeros(2),
                           StandardNormalPrior(), NoiseModel(1.0), z)
        assert loss.item() == pytest.approx(2.0 + LOG_2PI, abs=0.01)

    def test_shifted_observation_adds_half_squared_norm(self):
        z = np.random.default_rng(2).normal(size=(1_000_000, 2))
        sampler, operator, noise = _identity_sampler(), ForwardOperator.identity(1.0), NoiseModel(1.0)
        with dc.no_grad():
            at_zero = vi_loss(sampler, operator, np.zeros(2), StandardNormalPrior(), noise, z).item()
            shifted = vi_loss(sampler, operator, np.array([1.0, 0.0]), StandardNormalPrior(), noise, z).item()
        assert shifted - at_zero == pytest.approx(0.5, abs=0.01)

    def test_rejects_bad_latents(self):
        with pytest.raises(UsageError):
            vi_loss(_identity_sampler(), ForwardOperator.identity(1.0), np.zeros(2),
                    StandardNormalPrior(), NoiseModel(1.0), np.zeros(2))

    def test_rejects_bad_observation(self):
        with pytest.raises(DimensionError):
            vi_loss(_identity_sampler(), ForwardOperator.identity(1.0), np.zeros(3),
                    StandardNormalPrior(), NoiseModel(1.0), np.zeros((4, 2)))

    def test_non_positive_noise(self):
        with pytest.raises(UsageError):
            NoiseModel(0.0)

    def test_divergent_sampler_fails_fast(self):
        sampler = _identity_sampler()
        with pytest.raises(NonFiniteError):
            vi_loss(sampler, ForwardOperator.identity(1.0), np.array([1e200, 0.0]), StandardNormalPrior(),
                    NoiseModel(1.0), np.ones((2, 2)))

    @pytest.mark.parametrize("prior_kind", ["rosenbrock", "conditional"])
    def test_gradient_matches_finite_differences(self, small_flow, small_stack, prior_kind):
        r = np.random.default_rng(7)
        operator = ForwardOperator.random(2.0, 0.4, r)
        y = np.array([0.3, -0.5])
        if prior_kind == "rosenbrock":
            sampler, prior = FlowSampler(small_stack(dim=2, seed=3, scale=0.2)), RosenbrockPrior()
        else:
            conditional, frozen = init_from_pretrained(small_flow(seed=4, scale=0.2))
            sampler, prior = conditional.bind(y), ConditionalFlowPrior(frozen, y)
        z = r.normal(size=(6, 2))
        noise = NoiseModel(0.4)

        def loss():
            return vi_loss(sampler, operator, y, prior, noise, z)

        sampler.zero_grad()
        loss().backward()
        for name, param in sampler.named_parameters():
            if not param.requires_grad:
                continue
            for index in _sample_entries(param, r):
                numeric = parameter_entry_grad(lambda: loss().item(), param, index)
                assert param.grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6), name

    def test_prior_constant_shifts_loss_but_not_gradients(self, small_stack):
        class ShiftedPrior:
            def __init__(self, base, shift):
                self.base, self.shift = base, shift

            def logprob(self, x):
                return self.base.logprob(x) + self.shift

        sampler = FlowSampler(small_stack(dim=2, seed=5, scale=0.2))
        operator = ForwardOperator.random(2.0, 0.4, np.random.default_rng(5))
        y, noise = np.array([0.2, 0.7]), NoiseModel(0.4)
        z = np.random.default_rng(6).normal(size=(16, 2))

        def loss_and_grads(prior):
            sampler.zero_grad()
            loss = vi_loss(sampler, operator, y, prior, noise, z)
            loss.backward()
            return loss.item(), [p.grad.copy() for p in sampler.trainable_parameters()]

        base, base_grads = loss_and_grads(RosenbrockPrior())
        shifted, shifted_grads = loss_and_grads(ShiftedPrior(RosenbrockPrior(), 3.25))
        assert shifted == pytest.approx(base - 3.25, abs=1e-12)
        for a, b in zip(base_grads, shifted_grads):
            np.testing.assert_array_equal(a, b)


class TestStepGuard:
    @staticmethod
    def _settled(guard, value=2.0, n=20):
        for _ in range(n):
            guard.accept(value)
        return guard

    def test_silent_during_warmup(self):
        guard = self._settled(StepGuard(warmup=20), n=19)
        assert not guard.is_spike(1e6)
        guard.accept(2.0)
        assert guard.is_spike(1e6)

    def test_flat_history_uses_one_nat_spread(self):
        guard = self._settled(StepGuard(tolerance=20.0))
        assert not guard.is_spike(21.9)
        assert guard.is_spike(22.1)

    def test_threshold_scales_with_median_absolute_deviation(self):
        guard = StepGuard(tolerance=20.0, warmup=5)
        for value in [0.0, 10.0, 20.0, 30.0, 40.0]:
            guard.accept(value)
        # median 20, MAD 10
        assert not guard.is_spike(219.0)
        assert guard.is_spike(221.0)

    def test_patience_forces_acceptance(self):
        guard = self._settled(StepGuard(patience=3))
        for _ in range(3):
            assert guard.is_spike(100.0)
            guard.reject()
        assert not guard.is_spike(100.0)
        guard.accept(100.0)
        assert guard.is_spike(100.0)
        assert guard.rejected == 3

    def test_disabled(self):
        assert not self._settled(StepGuard(tolerance=None)).is_spike(1e9)


class TestTrainMle:
    def test_trace_shape_and_schedule(self, small_flow):
        dataset = _gaussian_pairs(200, 0.4, seed=0)
        trace = train_mle(small_flow(), dataset, epochs=3, batch_size=64, lr=1e-3, decay=0.9, seed=0)
        # 200 / 64 -> four steps per epoch (last one partial)
        assert len(trace.rows) == 12
        assert [row.step for row in trace.rows] == list(range(1, 13))
        assert {row.epoch: row.lr for row in trace.rows} == pytest.approx({1: 1e-3, 2: 9e-4, 3: 8.1e-4})
        assert all(row.seconds == 0.0 for row in trace.rows)

    def test_same_seed_gives_identical_traces(self, small_flow):
        dataset = _gaussian_pairs(128, 0.4, seed=1)
        a = train_mle(small_flow(), dataset, epochs=2, batch_size=32, seed=5)
        b = train_mle(small_flow(), dataset, epochs=2, batch_size=32, seed=5)
        assert a.model_dump() == b.model_dump()

    def test_objective_decreases(self, small_flow):
        dataset = _gaussian_pairs(1000, 0.4, seed=2)
        trace = train_mle(small_flow(), dataset, epochs=8, batch_size=32, lr=5e-3, seed=0)
        means = trace.epoch_means()
        assert means[8] < means[1]

    def test_dataset_smaller_than_batch(self, small_flow):
        with pytest.raises(UsageError):
            train_mle(small_flow(), _gaussian_pairs(10, 0.4, seed=0), epochs=1, batch_size=64)

    def test_injected_clock_records_seconds(self, small_flow):
        ticks = iter(range(1000))
        trace = train_mle(small_flow(), _gaussian_pairs(64, 0.4, seed=0), epochs=1, batch_size=32,
                          clock=lambda: float(next(ticks)))
        assert [row.seconds for row in trace.rows] == [1.0, 2.0]

    def test_outlier_batch_is_rolled_back(self, small_flow):
        dataset = _gaussian_pairs(1600, 0.4, seed=4)
        dataset.x[17] = [1e3, -1e3]
        flow = small_flow()
        trace = train_mle(flow, dataset, epochs=2, batch_size=64, seed=0)
        # 25 batches per epoch; the outlier batch falls after warmup in epoch 2
        assert trace.rolled_back >= 1
        assert len(trace.rows) == 50 - trace.rolled_back
        assert max(row.objective for row in trace.rows if row.epoch == 2) < 100.0
        assert all(np.all(np.isfinite(p.values)) for p in flow.parameters())

        unguarded = train_mle(small_flow(), dataset, epochs=2, batch_size=64, seed=0, spike_tolerance=None)
        assert unguarded.rolled_back == 0
        assert len(unguarded.rows) == 50

    @pytest.mark.slow
    @pytest.mark.parametrize("y", [[0.8, -0.5], [0.0, 0.0]])
    def test_linear_gaussian_posterior(self, linear_gaussian_flow, y):
        # x ~ N(0, I2), y = x + 0.4 eps: posterior mean y / 1.16, covariance 0.16 / 1.16 I
        n = 10_000
        y = np.array(y)
        x = posterior_sample(linear_gaussian_flow, y, np.random.default_rng(9).normal(size=(n, 2)))
        mean, cov = x.mean(axis=0), np.cov(x, rowvar=False)
        variance = LINEAR_SIGMA ** 2 / (1 + LINEAR_SIGMA ** 2)
        expected_cov = variance * np.eye(2)

        mean_se = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(mean - y / (1 + LINEAR_SIGMA ** 2)) <= 3 * mean_se)
        cov_se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
        assert np.all(np.abs(cov - expected_cov) <= 3 * cov_se)


class TestTrainVi:
    def test_fine_tuning_changes_sampler_not_prior(self, small_flow):
        flow = small_flow(scale=0.2)
        sampler, frozen = init_from_pretrained(flow)
        y = np.array([0.5, 0.5])
        bound = sampler.bind(y)
        x_points = np.array([[0.1, 0.2], [-0.3, 0.4]])
        before = frozen.logprob(y, x_points).values.copy()
        operator = ForwardOperator.random(3.0, 0.4, np.random.default_rng(0))

        trace = train_vi(bound, operator, y, ConditionalFlowPrior(frozen, y), NoiseModel(0.4),
                         n_latent=64, epochs=2, batch_size=32, seed=0)
        assert len(trace.rows) == 4
        assert all(row.phase == "finetune" for row in trace.rows)
        np.testing.assert_array_equal(frozen.logprob(y, x_points).values, before)
        assert any(
            not np.array_equal(a.values, b.values)
            for a, b in zip(bound.parameters(), flow.x_lane.parameters())
        )

    def test_objective_decreases_from_identity(self):
        operator = ForwardOperator.random(3.0, 0.4, np.random.default_rng(1))
        y = operator.apply(np.array([0.5, 0.3]))
        trace = train_vi(_identity_sampler(), operator, y, RosenbrockPrior(), NoiseModel(0.4),
                         n_latent=256, epochs=6, batch_size=32, lr=5e-3, seed=0, phase="scratch")
        means = trace.epoch_means("scratch")
        assert means[6] < means[1]

    def test_same_seed_gives_identical_traces(self):
        operator = ForwardOperator.identity(0.4)
        kwargs = dict(n_latent=64, epochs=2, batch_size=32, seed=3)
        a = train_vi(_identity_sampler(), operator, np.zeros(2), StandardNormalPrior(), NoiseModel(0.4), **kwargs)
        b = train_vi(_identity_sampler(), operator, np.zeros(2), StandardNormalPrior(), NoiseModel(0.4), **kwargs)
        assert a.model_dump() == b.model_dump()

    def test_latent_set_smaller_than_batch(self):
        with pytest.raises(UsageError):
            train_vi(_identity_sampler(), ForwardOperator.identity(1.0), np.zeros(2), StandardNormalPrior(),
                     NoiseModel(1.0), n_latent=10, batch_size=64)


def test_dataset_length():
    dataset = Dataset(y=np.zeros((3, 2)), x=np.zeros((3, 2)),
                      provenance=DatasetProvenance(gamma=None, sigma=0.4, seed=0, operator_kind="identity"))
    assert len(dataset) == 3
