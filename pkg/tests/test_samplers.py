import numpy as np
import pytest

from app.core.exceptions import NonFiniteError, UsageError
from app.models.flows import ConditionalFlow, FlowSampler, FlowStack, init_from_pretrained
from app.schemas.experiment import SgldConfig
from app.services.sampler_service import flow_samples, sgld, sgld_step_sizes

MEAN = np.array([1.0, -0.5])
VARIANCE = np.array([1.0, 0.25])


def gaussian_grad(x):
    return -(x - MEAN) / VARIANCE


class TestStepSizes:
    def test_harmonic_schedule(self):
        np.testing.assert_allclose(sgld_step_sizes(3, 1.0, 100.0, 1.0), [1 / 100, 1 / 101, 1 / 102])

    def test_decreasing(self):
        eps = sgld_step_sizes(1000, 1.0, 1e4, 0.55)
        assert eps[0] == pytest.approx(1e4 ** -0.55)
        assert np.all(np.diff(eps) < 0)

    def test_default_schedule_stays_above_a_thousandth(self):
        s = SgldConfig()
        eps = sgld_step_sizes(s.n_steps, s.step_a, s.step_b, s.step_gamma)
        assert eps[0] == pytest.approx(6.31e-3, rel=1e-3)
        assert eps[-1] > 1e-3
        # a = 1e-2, b = 100 would end near 1.2e-5
        assert sgld_step_sizes(s.n_steps, 1e-2, 100.0, s.step_gamma)[-1] < 2e-5


class TestSgld:
    def test_retained_count_and_shape(self, rng):
        chain = sgld(gaussian_grad, np.zeros(2), 100, 1.0, 1e4, 0.55, burn_in=10, stride=7, rng=rng)
        # t = 10, 17, ..., 94
        assert chain.samples.shape == (13, 2)
        assert len(chain) == 13
        assert chain.step_sizes.shape == (100,)

    def test_batched_chains_shape(self, rng):
        chain = sgld(gaussian_grad, np.zeros((4, 2)), 50, 1.0, 1e4, 0.55, burn_in=0, stride=1, rng=rng)
        assert chain.samples.shape == (50, 4, 2)

    def test_deterministic_given_rng(self):
        a = sgld(gaussian_grad, np.zeros(2), 500, 1.0, 1e4, 0.55, 100, 5, np.random.default_rng(3))
        b = sgld(gaussian_grad, np.zeros(2), 500, 1.0, 1e4, 0.55, 100, 5, np.random.default_rng(3))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_noise_free_update_is_gradient_ascent(self, rng):
        chain = sgld(gaussian_grad, np.array([3.0, 3.0]), 3000, 354.0, 1e7, 0.55, 2999, 1, rng, inject_noise=False)
        np.testing.assert_allclose(chain.samples[-1], MEAN, atol=1e-6)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"step_gamma": 0.5},
            {"step_gamma": 1.2},
            {"n_steps": 10, "burn_in": 10},
            {"stride": 0},
        ],
    )
    def test_invalid_arguments(self, rng, kwargs):
        args = {"n_steps": 100, "step_a": 1.0, "step_b": 1e4, "step_gamma": 0.55, "burn_in": 10, "stride": 1}
        args.update(kwargs)
        with pytest.raises(UsageError):
            sgld(gaussian_grad, np.zeros(2), rng=rng, **args)

    def test_divergence_reports_the_step(self, rng):
        with pytest.raises(NonFiniteError) as info:
            sgld(lambda x: np.full_like(x, np.inf), np.zeros(2), 100, 1.0, 1e4, 0.55, 10, 1, rng)
        assert info.value.step == 0

    def test_gaussian_target_short_run(self):
        chain = sgld(gaussian_grad, np.zeros((20, 2)), 20_000, 354.0, 1e7, 0.55, 2_000, 10,
                     np.random.default_rng(11))
        samples = chain.samples.reshape(-1, 2)
        np.testing.assert_allclose(samples.mean(axis=0), MEAN, atol=0.05)
        np.testing.assert_allclose(samples.var(axis=0), VARIANCE, atol=0.1)

    @pytest.mark.slow
    def test_gaussian_target_moments(self):
        # ten chains of 10^4 retained states each, ε ≈ 0.05
        chain = sgld(gaussian_grad, np.zeros((10, 2)), 510_000, 354.0, 1e7, 0.55, 10_000, 50,
                     np.random.default_rng(0))
        samples = chain.samples.reshape(-1, 2)
        assert samples.shape == (100_000, 2)
        np.testing.assert_allclose(samples.mean(axis=0), MEAN, atol=0.02)
        np.testing.assert_allclose(samples.var(axis=0), VARIANCE, atol=0.05)


class TestFlowSamples:
    def test_identity_sampler_returns_latents(self, rng):
        sampler = FlowSampler(FlowStack(2, 2, np.random.default_rng(0), hidden=8))
        x, z = flow_samples(sampler, 10, rng, return_latents=True)
        np.testing.assert_array_equal(x, z)
        assert x.shape == (10, 2)

    def test_conditional_flow_needs_observation(self, small_flow, rng):
        with pytest.raises(UsageError):
            flow_samples(small_flow(), 5, rng)

    def test_conditional_flow_identity(self, small_flow, rng):
        x, z = flow_samples(small_flow(), 5, rng, y=np.array([0.2, 0.1]), return_latents=True)
        np.testing.assert_allclose(x, z, atol=1e-15)

    def test_unbound_conditional_sampler_needs_observation(self, small_flow, rng):
        sampler, _ = init_from_pretrained(small_flow(scale=0.3))
        with pytest.raises(UsageError):
            flow_samples(sampler, 5, rng)
        bound = flow_samples(sampler.bind(np.array([0.1, 0.2])), 5, np.random.default_rng(4))
        unbound = flow_samples(sampler, 5, np.random.default_rng(4), y=np.array([0.1, 0.2]))
        np.testing.assert_allclose(bound, unbound, rtol=1e-12)

    def test_sample_count_must_be_positive(self, small_stack, rng):
        with pytest.raises(UsageError):
            flow_samples(FlowSampler(small_stack()), 0, rng)
