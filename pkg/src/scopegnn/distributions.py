"""Stochastic building blocks of the hop-scope prior and posterior.

The prior over hop activations is a stick-breaking beta process: independent
Beta(alpha, beta) fractions whose running product pi_l is the contribution
probability of hop l. The variational posterior replaces each beta factor with
a Kumaraswamy(a_l, b_l), which admits a pathwise-differentiable inverse-CDF
sampler and a closed-form KL to a beta. Binary hop/feature masks are relaxed
to concrete Bernoulli draws with temperature tau.

All sampling takes an explicit numpy Generator; differentiable quantities are
built from autodiff ops so gradients flow into the unconstrained log-shape
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad

CLAMP = 1e-6

# Fixed tanh-sinh (double-exponential) nodes on (0, 1) for the E[log(1 - nu)]
# term of the Kumaraswamy/beta KL. Stored as log u so both endpoints stay
# representable; a fixed rule keeps the value and gradient deterministic.
_QUAD_STEP = 0.25
_QUAD_HALF_POINTS = 25


def _tanh_sinh_rule():
    k = np.arange(-_QUAD_HALF_POINTS, _QUAD_HALF_POINTS + 1)
    g = (np.pi / 2.0) * np.sinh(k * _QUAD_STEP)
    log_u = -np.logaddexp(0.0, -2.0 * g)
    log_u = np.minimum(log_u, -1e-300)  # keep strictly negative after underflow
    log_cosh_g = np.abs(g) + np.log1p(np.exp(-2.0 * np.abs(g))) - np.log(2.0)
    log_w = np.log(_QUAD_STEP * np.pi / 4.0) + np.log(np.cosh(k * _QUAD_STEP)) - 2.0 * log_cosh_g
    return log_u, np.exp(log_w)


_QUAD_LOG_U, _QUAD_WEIGHTS = _tanh_sinh_rule()


@dataclass(frozen=True)
class StickBreakingPrior:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("prior shapes must be positive")

    def expected_sticks(self, n: int) -> np.ndarray:
        """Prior mean of pi_l: (alpha / (alpha + beta))**l for l = 1..n."""
        r = self.alpha / (self.alpha + self.beta)
        return r ** np.arange(1, n + 1)


@dataclass
class VariationalPosterior:
    """Per-hop Kumaraswamy shapes stored as unconstrained logs.

    ``log_a`` and ``log_b`` are leaf parameter tensors of length ``truncation``;
    ``tau`` is the concrete-relaxation temperature.
    """

    truncation: int
    tau: float = 0.67
    log_a: ad.Tensor = None
    log_b: ad.Tensor = None

    def __post_init__(self):
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.log_a is None:
            self.log_a = ad.Tensor(np.zeros(self.truncation), requires_grad=True, name="log_a")
        if self.log_b is None:
            self.log_b = ad.Tensor(np.zeros(self.truncation), requires_grad=True, name="log_b")

    @property
    def a(self) -> np.ndarray:
        return np.exp(self.log_a.value)

    @property
    def b(self) -> np.ndarray:
        return np.exp(self.log_b.value)

    def parameters(self):
        return [self.log_a, self.log_b]


@dataclass
class MaskSample:
    """One Monte-Carlo draw of the relaxed hop/feature masks.

    ``nu`` and ``pi`` are length-T tensors on the tape; ``z`` is the (O, T)
    relaxed mask matrix. ``u_nu`` and ``eps_z`` are the underlying noise draws,
    kept so the same sample can be replayed for shared-noise checks.
    """

    nu: ad.Tensor
    pi: ad.Tensor
    z: ad.Tensor
    u_nu: np.ndarray
    eps_z: np.ndarray
    scope: int = field(default=0)


def sample_posterior_nu(post: VariationalPosterior, rng: np.random.Generator, u=None):
    """Kumaraswamy inverse-CDF draw nu_l = (1 - u**(1/b_l))**(1/a_l).

    Returns (nu tensor clamped to [CLAMP, 1 - CLAMP], uniform noise used).
    Pass ``u`` to replay a draw with shared noise.
    """
    if u is None:
        u = rng.uniform(size=post.truncation)
    a = ad.exp(post.log_a)
    b = ad.exp(post.log_b)
    log_u = ad.constant(np.log(u))
    t = ad.clip(ad.exp(ad.div(log_u, b)), 0.0, 1.0 - 1e-12)  # u**(1/b)
    nu = ad.exp(ad.div(ad.log(ad.rsub_const(1.0, t)), a))
    return ad.clip(nu, CLAMP, 1.0 - CLAMP), u


def stick_breaking(nu: ad.Tensor) -> ad.Tensor:
    """pi_l = prod_{j<=l} nu_j, computed as exp(cumsum(log nu))."""
    if np.any(nu.value <= 0.0):
        raise ad.NumericDomainError("stick_breaking requires nu > 0")
    return ad.exp(ad.cumsum(ad.log(nu)))


def sample_concrete_bernoulli(pi: ad.Tensor, tau: float, rng: np.random.Generator, count: int, eps=None):
    """(count, T) relaxed Bernoulli draws z = sigmoid((logit pi + eps) / tau).

    ``eps`` is standard-logistic noise, drawn here unless replayed.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n_hops = pi.value.shape[0]
    if eps is None:
        u = rng.uniform(size=(count, n_hops))
        eps = np.log(u) - np.log1p(-u)
    pi_c = ad.clip(pi, CLAMP, 1.0 - CLAMP)
    logit_pi = ad.sub(ad.log(pi_c), ad.log(ad.rsub_const(1.0, pi_c)))
    pre = ad.scale(ad.add_const(ad.tile_rows(logit_pi, count), eps), 1.0 / tau)
    return ad.sigmoid(pre), eps


def draw_mask_sample(post: VariationalPosterior, width: int, rng, threshold=0.5) -> MaskSample:
    """One full structure sample: nu, sticks, relaxed masks, and scope."""
    nu, u = sample_posterior_nu(post, rng)
    pi = stick_breaking(nu)
    z, eps = sample_concrete_bernoulli(pi, post.tau, rng, width)
    sample = MaskSample(nu=nu, pi=pi, z=z, u_nu=u, eps_z=eps)
    sample.scope = neighborhood_scope(z.value, threshold)
    return sample


def replay_mask_sample(post: VariationalPosterior, sample: MaskSample, threshold=0.5) -> MaskSample:
    """Rebuild a sample on a fresh tape with the same underlying noise."""
    nu, u = sample_posterior_nu(post, None, u=sample.u_nu)
    pi = stick_breaking(nu)
    z, eps = sample_concrete_bernoulli(pi, post.tau, None, sample.eps_z.shape[0], eps=sample.eps_z)
    out = MaskSample(nu=nu, pi=pi, z=z, u_nu=u, eps_z=eps)
    out.scope = neighborhood_scope(z.value, threshold)
    return out


def neighborhood_scope(z_values: np.ndarray, threshold: float = 0.5) -> int:
    """Deepest hop whose mask column is above threshold on average.

    Returns 0 when no column is active (only the input projection runs).
    """
    active = np.asarray(z_values).mean(axis=0) > threshold
    idx = np.nonzero(active)[0]
    return int(idx[-1]) + 1 if idx.size else 0


def concrete_log_density(z, pi, tau: float):
    """Log density of the relaxed Bernoulli at z (plain numpy, elementwise)."""
    z = np.asarray(z, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(z <= 0.0) or np.any(z >= 1.0):
        raise ad.NumericDomainError("concrete_log_density requires z in (0, 1)")
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ad.NumericDomainError("concrete_log_density requires pi in (0, 1)")
    if tau <= 0:
        raise ValueError("tau must be positive")
    log_z, log_1mz = np.log(z), np.log1p(-z)
    # log of pi * z**-tau + (1 - pi) * (1 - z)**-tau, stabilized
    t1 = np.log(pi) - tau * log_z
    t2 = np.log1p(-pi) - tau * log_1mz
    log_mix = np.logaddexp(t1, t2)
    return np.log(tau) + t1 + t2 - (log_z + log_1mz) - 2.0 * log_mix


def expected_log_one_minus_nu(post: VariationalPosterior) -> ad.Tensor:
    """Scalar sum over hops of E_q[log(1 - nu_l)] by fixed-node quadrature.

    Composes the Kumaraswamy quantile function through the tanh-sinh rule, so
    the result is deterministic and differentiable in the shape parameters.
    log(1 - nu(u)) = log1mexp(log1mexp(log(u) / b) / a).
    """
    n_hops = post.truncation
    n_nodes = _QUAD_LOG_U.shape[0]
    ones = np.ones(n_hops)
    recip_a = ad.div(ad.constant(ones), ad.exp(post.log_a))
    recip_b = ad.div(ad.constant(ones), ad.exp(post.log_b))
    log_u = np.tile(_QUAD_LOG_U[:, None], (1, n_hops))
    s = ad.clip(ad.mul_const(ad.tile_rows(recip_b, n_nodes), log_u), -690.0, 0.0)
    inner = ad.mul(ad.log1mexp(s), ad.tile_rows(recip_a, n_nodes))
    inner = ad.clip(inner, -745.0, -1e-305)
    f = ad.log1mexp(inner)
    return ad.tensor_sum(ad.mul_const(f, np.tile(_QUAD_WEIGHTS[:, None], (1, n_hops))))


def kl_nu(post: VariationalPosterior, prior: StickBreakingPrior) -> ad.Tensor:
    """Sum over hops of KL(Kumaraswamy(a_l, b_l) || Beta(alpha, beta)).

    Closed form except for the E[log(1 - nu)] term, which is evaluated by a
    fixed double-exponential quadrature so the value (and its gradient) is
    deterministic and accurate across the whole shape range.
    """
    a = ad.exp(post.log_a)
    b = ad.exp(post.log_b)
    alpha, beta = prior.alpha, prior.beta
    gamma = np.euler_gamma
    recip_a = ad.div(ad.constant(np.ones(post.truncation)), a)
    recip_b = ad.div(ad.constant(np.ones(post.truncation)), b)

    # ((a - alpha) / a) * (-gamma - psi(b) - 1/b)
    front = ad.mul(
        ad.rsub_const(1.0, ad.scale(recip_a, alpha)),
        ad.neg(ad.add(ad.add_const(ad.digamma(b), gamma), recip_b)),
    )
    log_ab = ad.add(post.log_a, post.log_b)
    log_beta_fn = float(special.betaln(alpha, beta))
    tail = ad.neg(ad.rsub_const(1.0, recip_b))  # -(b-1)/b

    per_hop = ad.add_const(ad.add(ad.add(front, log_ab), tail), log_beta_fn)
    total = ad.tensor_sum(per_hop)
    if beta != 1.0:
        total = ad.add(total, ad.scale(expected_log_one_minus_nu(post), -(beta - 1.0)))
    return total


def kl_z(pi_q: ad.Tensor, pi_p: np.ndarray, width: int) -> ad.Tensor:
    """width * sum_l Bernoulli-KL(pi_q_l || pi_p_l), both sides clamped.

    ``pi_q`` are posterior sticks from the sampled nu; ``pi_p`` the prior's
    expected sticks.
    """
    pi_p = np.clip(np.asarray(pi_p, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    q = ad.clip(pi_q, CLAMP, 1.0 - CLAMP)
    one_m_q = ad.rsub_const(1.0, q)
    pos = ad.mul(q, ad.sub(ad.log(q), ad.constant(np.log(pi_p))))
    neg = ad.mul(one_m_q, ad.sub(ad.log(one_m_q), ad.constant(np.log1p(-pi_p))))
    return ad.scale(ad.tensor_sum(ad.add(pos, neg)), float(width))


def kl_z_mc(z: ad.Tensor, pi_q: ad.Tensor, pi_p: np.ndarray, tau: float) -> ad.Tensor:
    """Monte-Carlo relaxed-density KL estimate log q(z|pi_q) - log p(z|pi_p).

    Higher-variance alternative to :func:`kl_z`, selectable via config.
    """
    pi_p = np.clip(np.asarray(pi_p, dtype=np.float64), CLAMP, 1.0 - CLAMP)
    count = z.value.shape[0]
    zc = ad.clip(z, CLAMP, 1.0 - CLAMP)
    log_z = ad.log(zc)
    log_1mz = ad.log(ad.rsub_const(1.0, zc))

    def log_density(logit_rows):
        # log tau + logit-space concrete density, reusing shared log z terms
        t1 = ad.add(logit_rows[0], ad.scale(log_z, -tau))
        t2 = ad.add(logit_rows[1], ad.scale(log_1mz, -tau))
        # logaddexp(t1, t2) via max-shift is awkward on the tape; tau <= 1 and
        # clamped z keep both exponents moderate, so exponentiate directly
        mix = ad.log(ad.add(ad.exp(t1), ad.exp(t2)))
        body = ad.add(t1, t2)
        return ad.add(
            ad.add_const(ad.add(body, ad.neg(ad.add(log_z, log_1mz))), np.log(tau)),
            ad.scale(mix, -2.0),
        )

    qc = ad.clip(pi_q, CLAMP, 1.0 - CLAMP)
    log_q_rows = (
        ad.tile_rows(ad.log(qc), count),
        ad.tile_rows(ad.log(ad.rsub_const(1.0, qc)), count),
    )
    log_p_rows = (
        ad.constant(np.tile(np.log(pi_p), (count, 1))),
        ad.constant(np.tile(np.log1p(-pi_p), (count, 1))),
    )
    diff = ad.sub(log_density(log_q_rows), log_density(log_p_rows))
    return ad.tensor_sum(diff)
