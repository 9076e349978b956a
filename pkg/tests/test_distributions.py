import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from scopegnn import autodiff as ad
from scopegnn.distributions import (
    MaskSample,
    StickBreakingPrior,
    VariationalPosterior,
    concrete_log_density,
    draw_mask_sample,
    kl_nu,
    kl_z,
    neighborhood_scope,
    replay_mask_sample,
    sample_concrete_bernoulli,
    sample_posterior_nu,
    stick_breaking,
)
from tests.conftest import finite_difference_grad


def posterior_with(log_a, log_b, tau=0.67):
    log_a = np.atleast_1d(np.asarray(log_a, dtype=np.float64))
    log_b = np.atleast_1d(np.asarray(log_b, dtype=np.float64))
    return VariationalPosterior(
        truncation=log_a.size,
        tau=tau,
        log_a=ad.Tensor(log_a.copy(), requires_grad=True),
        log_b=ad.Tensor(log_b.copy(), requires_grad=True),
    )


class TestKumaraswamySampling:
    def test_unit_shapes_reduce_to_uniform(self, rng):
        # Kumaraswamy(1, 1) is Uniform(0, 1): nu = 1 - u
        post = posterior_with([0.0], [0.0])
        u = np.array([0.37])
        nu, _ = sample_posterior_nu(post, rng, u=u)
        assert nu.value[0] == pytest.approx(1.0 - 0.37, abs=1e-12)

    def test_monte_carlo_mean_matches_closed_form(self):
        # E[nu] = b * B(1 + 1/a, b)
        a, b = 5.0, 2.0
        post = posterior_with([math.log(a)], [math.log(b)])
        rng = np.random.default_rng(0)
        draws = np.array(
            [sample_posterior_nu(post, rng)[0].value[0] for _ in range(100_000)]
        )
        expected = b * math.exp(special.betaln(1.0 + 1.0 / a, b))
        assert abs(draws.mean() - expected) < 0.005

    def test_seeded_draws_reproduce(self):
        post = posterior_with([0.3, -0.2], [0.1, 0.4])
        nu1, _ = sample_posterior_nu(post, np.random.default_rng(42))
        nu2, _ = sample_posterior_nu(post, np.random.default_rng(42))
        np.testing.assert_array_equal(nu1.value, nu2.value)

    def test_replayed_noise_gives_same_draw(self, rng):
        post = posterior_with([0.5], [0.5])
        nu, u = sample_posterior_nu(post, rng)
        nu2, _ = sample_posterior_nu(post, None, u=u)
        np.testing.assert_array_equal(nu.value, nu2.value)

    def test_reparameterized_gradient_of_mean_vs_finite_differences(self):
        # Shared-noise pathwise gradient of the MC mean w.r.t. log shapes.
        post = posterior_with([0.4], [0.7])
        u = np.random.default_rng(3).uniform(size=(200, 1))

        def loss():
            total = None
            for row in u:
                nu, _ = sample_posterior_nu(post, None, u=row)
                total = nu if total is None else ad.add(total, nu)
            return ad.scale(ad.tensor_sum(total), 1.0 / u.shape[0])

        loss().backward()
        for p in post.parameters():
            got = p.grad.copy()
            p.zero_grad()
            num = finite_difference_grad(loss, p, h=1e-5)
            scale = max(abs(num[0]), abs(got[0]), 1e-6)
            assert abs(got[0] - num[0]) / scale < 1e-2


class TestStickBreaking:
    def test_half_sticks(self):
        pi = stick_breaking(ad.constant([0.5, 0.5, 0.5]))
        np.testing.assert_allclose(pi.value, [0.5, 0.25, 0.125], rtol=1e-12)

    def test_all_ones(self):
        pi = stick_breaking(ad.constant([1.0, 1.0]))
        np.testing.assert_allclose(pi.value, [1.0, 1.0], rtol=1e-12)

    def test_nonpositive_rejected(self):
        with pytest.raises(ad.NumericDomainError):
            stick_breaking(ad.constant([0.5, 0.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 0.999), min_size=1, max_size=8))
    def test_sticks_are_monotone_nonincreasing(self, nu_vals):
        pi = stick_breaking(ad.constant(nu_vals)).value
        assert np.all(np.diff(pi) <= 1e-15)

    def test_prior_expected_sticks_match_simulation(self):
        prior = StickBreakingPrior(alpha=5.0, beta=2.0)
        rng = np.random.default_rng(1)
        nus = rng.beta(5.0, 2.0, size=(200_000, 4))
        sim = np.cumprod(nus, axis=1).mean(axis=0)
        np.testing.assert_allclose(prior.expected_sticks(4), sim, atol=0.01)

    def test_prior_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            StickBreakingPrior(alpha=0.0, beta=1.0)


class TestConcreteBernoulli:
    def test_zero_noise_centers_at_pi_half(self, rng):
        z, _ = sample_concrete_bernoulli(
            ad.constant([0.5]), 0.67, rng, 3, eps=np.zeros((3, 1))
        )
        np.testing.assert_allclose(z.value, 0.5, atol=1e-12)

    def test_low_temperature_saturates_toward_prob_one(self):
        rng = np.random.default_rng(0)
        z, _ = sample_concrete_bernoulli(ad.constant([0.999]), 0.1, rng, 1000)
        assert np.mean(z.value > 0.9) > 0.95

    def test_low_temperature_activation_frequency_matches_pi(self):
        pi = 0.3
        rng = np.random.default_rng(5)
        z, _ = sample_concrete_bernoulli(ad.constant([pi]), 0.05, rng, 100_000)
        assert abs(np.mean(z.value > 0.5) - pi) < 0.01

    def test_density_integrates_to_one(self):
        val, _ = integrate.quad(
            lambda z: math.exp(float(concrete_log_density(z, 0.3, 0.67))), 1e-9, 1 - 1e-9
        )
        assert abs(val - 1.0) < 1e-4

    def test_density_symmetry_under_flip(self, rng):
        z = rng.uniform(0.05, 0.95, size=20)
        d1 = concrete_log_density(z, 0.3, 0.67)
        d2 = concrete_log_density(1.0 - z, 0.7, 0.67)
        np.testing.assert_allclose(d1, d2, rtol=1e-10)

    def test_histogram_matches_density(self):
        rng = np.random.default_rng(9)
        pi, tau = 0.6, 0.67
        z, _ = sample_concrete_bernoulli(ad.constant([pi]), tau, rng, 200_000)
        vals = z.value.ravel()
        edges = np.linspace(0.05, 0.95, 10)
        counts, _ = np.histogram(vals, bins=edges)
        n = vals.size
        for i in range(edges.size - 1):
            p, _ = integrate.quad(
                lambda x: math.exp(float(concrete_log_density(x, pi, tau))),
                edges[i],
                edges[i + 1],
            )
            sigma = math.sqrt(n * p * (1 - p))
            assert abs(counts[i] - n * p) < 3 * sigma + 1.0

    def test_density_rejects_boundary(self):
        with pytest.raises(ad.NumericDomainError):
            concrete_log_density(0.0, 0.5, 0.67)
        with pytest.raises(ad.NumericDomainError):
            concrete_log_density(0.5, 1.0, 0.67)


class TestNeighborhoodScope:
    def test_empty_mask_is_zero(self):
        assert neighborhood_scope(np.full((4, 3), 0.2)) == 0

    def test_deepest_active_column_wins(self):
        z = np.array([[0.9, 0.1, 0.8, 0.1], [0.9, 0.1, 0.6, 0.2]])
        assert neighborhood_scope(z) == 3

    def test_activity_is_judged_per_column_average(self):
        # one strong entry does not activate a mostly-silent column
        z = np.zeros((5, 4))
        z[2, 1] = 0.8
        assert neighborhood_scope(z) == 0
        z[:, 1] = 0.8
        assert neighborhood_scope(z) == 2

    def test_draw_mask_sample_records_scope(self, rng):
        post = posterior_with([2.0, 2.0, -3.0], [0.0, 0.0, 3.0])
        sample = draw_mask_sample(post, width=8, rng=rng)
        assert sample.scope == neighborhood_scope(sample.z.value)

    def test_replay_reproduces_draw(self, rng):
        post = posterior_with([0.5, 0.5], [0.5, 0.5])
        sample = draw_mask_sample(post, width=4, rng=rng)
        replay = replay_mask_sample(post, sample)
        np.testing.assert_array_equal(replay.z.value, sample.z.value)
        assert replay.scope == sample.scope


class TestKlNu:
    def test_matching_uniform_is_zero(self):
        post = posterior_with([0.0], [0.0])
        kl = kl_nu(post, StickBreakingPrior(1.0, 1.0))
        assert kl.item() == pytest.approx(0.0, abs=1e-10)

    @staticmethod
    def _quadrature_kl(a, b, alpha, beta):
        # substitute t = nu**a (t ~ Beta(1, b)) so the integrand is bounded
        def integrand(t):
            log_x = math.log(t) / a
            log_q = math.log(a * b) + (a - 1) * log_x + (b - 1) * math.log1p(-t)
            log_p = (
                (alpha - 1) * log_x
                + (beta - 1) * math.log1p(-math.exp(log_x))
                - special.betaln(alpha, beta)
            )
            return b * math.exp((b - 1) * math.log1p(-t)) * (log_q - log_p)

        val, _ = integrate.quad(integrand, 1e-300, 1 - 1e-16, limit=500)
        return val

    @pytest.mark.parametrize(
        "a,b,alpha,beta",
        [
            (2.0, 2.0, 1.0, 1.0),
            (1.5, 1.0, 5.0, 2.0),
            (3.0, 0.8, 2.0, 2.0),
            (0.3, 0.2, 5.0, 2.0),
            (0.1, 4.0, 0.5, 5.0),
            (8.0, 0.1, 2.0, 8.0),
        ],
    )
    def test_matches_numerical_quadrature(self, a, b, alpha, beta):
        post = posterior_with([math.log(a)], [math.log(b)])
        kl = kl_nu(post, StickBreakingPrior(alpha, beta))
        assert kl.item() == pytest.approx(self._quadrature_kl(a, b, alpha, beta), abs=1e-3)

    def test_nonnegative_over_random_shapes(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            post = posterior_with(rng.uniform(-1, 1, 1), rng.uniform(-1, 1, 1))
            prior = StickBreakingPrior(rng.uniform(0.5, 5), rng.uniform(0.5, 5))
            assert kl_nu(post, prior).item() > -1e-6

    def test_gradient_vs_finite_differences(self):
        post = posterior_with([0.3, -0.2], [0.4, 0.1])
        prior = StickBreakingPrior(5.0, 2.0)

        def loss():
            return kl_nu(post, prior)

        loss().backward()
        for p in post.parameters():
            got = p.grad.copy()
            p.zero_grad()
            num = finite_difference_grad(loss, p, h=1e-6)
            scale = np.maximum(np.maximum(np.abs(num), np.abs(got)), 1e-6)
            assert (np.abs(got - num) / scale).max() < 1e-4


class TestKlZ:
    def test_matching_probabilities_are_zero(self):
        kl = kl_z(ad.constant([0.3, 0.6]), np.array([0.3, 0.6]), width=7)
        assert kl.item() == pytest.approx(0.0, abs=1e-10)

    def test_hand_computed_value(self):
        # width * [0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5)]
        expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
        kl = kl_z(ad.constant([0.9]), np.array([0.5]), width=1)
        assert kl.item() == pytest.approx(expected, abs=1e-10)
        kl3 = kl_z(ad.constant([0.9]), np.array([0.5]), width=3)
        assert kl3.item() == pytest.approx(3 * expected, abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_nonnegative(self, q, p):
        assert kl_z(ad.constant([q]), np.array([p]), width=2).item() > -1e-12

    def test_gradient_vs_finite_differences(self, rng):
        q = ad.Tensor(rng.uniform(0.1, 0.9, size=3), requires_grad=True)
        p = rng.uniform(0.1, 0.9, size=3)

        def loss():
            return kl_z(q, p, width=4)

        loss().backward()
        got = q.grad.copy()
        q.zero_grad()
        num = finite_difference_grad(loss, q, h=1e-6)
        np.testing.assert_allclose(got, num, rtol=1e-4)
