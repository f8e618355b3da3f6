"""Bootstrap particle filters: plain SIR and the stop-gradient DPF.

Both filters resample multinomially at every step and keep all weights in
the log domain.  Randomness comes from named streams (prior draw, proposal
noise, resampling) so that two runs with the same seed consume identical
random numbers.  The DPF records its computation on an autodiff tape; its
forward values are bit-identical to :func:`sir_filter` for the same seed.

Per step ``t`` (both filters)::

    a        ~ Categorical(softmax(log nu_{t-1}))
    x_t      = mean(x_{t-1}[a]) + s * eps @ L_v^T
    log w_t  = log N(y_t; x_t, s^2 Sigma_r)
    log nu_t = log w_t + log wtilde_{t-1}
    ll_t     = logsumexp(log nu_t),  log wbar_t = log nu_t - ll_t

SIR uses ``log wtilde = -log K``.  The DPF uses
``(g - stop(g)) - log K`` with ``g = log wbar_{t-1}[a]``, which has the same
value but lets gradients reach the resampling probabilities.

Resampling draws from the softmax of ``log nu`` rather than ``exp(log wbar)``:
the two agree mathematically, but the softmax stays normalised even when an
unadapted model drives ``log nu`` to magnitudes where the subtraction
``log nu - ll_t`` loses all precision.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import polymodel as pm
from .errors import DegeneracyError, UsageError
from .systems import SsmSpec, wrap_phase

# log of the smallest normal single-precision magnitude, about -87.34
SINGLE_PRECISION_LOG_FLOOR = -87.0

STREAM_NAMES = ("prior", "proposal", "resample")


@dataclass
class FilterStreams:
    """Independent generators, one per purpose, derived from a single seed."""

    prior: np.random.Generator
    proposal: np.random.Generator
    resample: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        if isinstance(seed, np.random.Generator):
            seed = int(seed.integers(2**63))
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = root.spawn(len(STREAM_NAMES))
        return cls(*(np.random.default_rng(c) for c in children))


@dataclass
class ParticleCloud:
    initial: np.ndarray  # (K, n_x) draws from the prior
    particles: np.ndarray  # (T, K, n_x)
    ancestors: np.ndarray  # (T, K) indices into the previous step
    log_weights: np.ndarray  # (T, K) unnormalised log w_t
    norm_log_weights: np.ndarray  # (T, K) log wbar_t
    carry_log_weights: Optional[list] = None  # DPF only: tape nodes log wtilde

    @property
    def T(self):
        return self.particles.shape[0]

    @property
    def K(self):
        return self.particles.shape[1]


@dataclass
class FilterOutput:
    cloud: ParticleCloud
    log_likelihood: object  # float, or ad.Node for the DPF
    step_log_likelihoods: np.ndarray  # (T,)
    posterior_means: np.ndarray  # (T, n_x)
    params_node: Optional[ad.Node] = field(default=None, repr=False)

    @property
    def value(self) -> float:
        ll = self.log_likelihood
        return float(ll.value if isinstance(ll, ad.Node) else ll)

    def gradient(self):
        """Gradient of the log-likelihood w.r.t. the parameters (DPF only)."""
        if self.params_node is None:
            raise UsageError("gradient needs a differentiable filter run")
        grads = ad.backward(self.log_likelihood)
        return grads[self.params_node.id]

    def to_json_dict(self):
        return {
            "log_likelihood": self.value,
            "step_log_likelihoods": [float(v) for v in self.step_log_likelihoods],
            "posterior_means": self.posterior_means.tolist(),
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)
            fh.write("\n")

    def save_means_csv(self, path):
        n = self.posterior_means.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"mean_{i + 1}" for i in range(n)])
            for t, row in enumerate(self.posterior_means, start=1):
                w.writerow([t] + [repr(float(v)) for v in row])


# -- shared numerics -----------------------------------------------------------

def resample_multinomial(weights, rng):
    """Draw ``K`` i.i.d. ancestor indices from the probability vector ``weights``."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("resampling weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegeneracyError("all resampling weights are zero")
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"resampling weights sum to {total}, not 1")
    cdf = np.cumsum(w)
    u = rng.random(w.size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    # guard against u landing on the rounding tail past the last positive weight
    last = int(np.flatnonzero(w > 0)[-1])
    return np.minimum(idx, last)


@dataclass(frozen=True)
class _ObsModel:
    prec_chol_T: np.ndarray  # L^{-T}, so z = innov @ L^{-T} has identity covariance
    log_norm: float
    circular: bool


def _obs_model(spec: SsmSpec) -> _ObsModel:
    cov = spec.obs_noise_factor**2 * spec.obs_cov
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("observation covariance must be positive definite") from exc
    n = cov.shape[0]
    log_norm = -float(np.sum(np.log(np.diag(L)))) - 0.5 * n * math.log(2.0 * math.pi)
    return _ObsModel(np.linalg.inv(L).T, log_norm, spec.circular)


def _cov_factor(cov):
    if not np.any(cov):
        return np.zeros_like(cov)
    w, V = np.linalg.eigh(cov)
    return (V * np.sqrt(np.clip(w, 0.0, None))).T  # rows: eps @ this = noise


def _prior_draw(spec: SsmSpec, K, rng):
    x0 = spec.init_mean + rng.standard_normal((K, spec.n_x)) @ _cov_factor(spec.init_cov)
    return wrap_phase(x0) if spec.circular else x0


def weighted_means(particles, norm_log_weights, circular=False):
    """``sum_k wbar_t^k x_t^k`` for every t (circular mean for phases)."""
    w = np.exp(norm_log_weights)
    if circular:
        c = np.einsum("tk,tkn->tn", w, np.cos(particles))
        s = np.einsum("tk,tkn->tn", w, np.sin(particles))
        return np.arctan2(s, c)
    return np.einsum("tk,tkn->tn", w, particles)


def posterior_mean(cloud: ParticleCloud, t: int, circular=False):
    """Filtering mean at 1-based step ``t``."""
    if not 1 <= t <= cloud.T:
        raise IndexError(f"t must lie in [1, {cloud.T}], got {t}")
    return weighted_means(cloud.particles[t - 1 : t], cloud.norm_log_weights[t - 1 : t], circular)[0]


def log_likelihood_from_weights(log_nu):
    """``sum_t logsumexp_k log_nu[t, k]``."""
    log_nu = np.atleast_2d(np.asarray(log_nu, dtype=float))
    total = 0.0
    for t, row in enumerate(log_nu, start=1):
        try:
            val, _ = ad.logsumexp_value(row)
        except DegeneracyError as exc:
            raise DegeneracyError(f"all weights are zero at t={t}", step=t) from exc
        total = total + float(val)
    return total


def _check_inputs(spec, y, K):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if K < 2:
        raise ValueError(f"need at least 2 particles, got K={K}")
    if y.shape[1] != spec.n_x:
        raise ValueError(f"observations have dimension {y.shape[1]}, model has {spec.n_x}")
    return y


# -- transitions -------------------------------------------------------------

class PolynomialTransition:
    """``x -> phi(x) @ C^T``; parameters are the coefficient matrix ``C``."""

    def __init__(self, D: pm.DegreeMatrix):
        self.D = D

    def mean(self, x, C):
        return pm.monomial_values(x, self.D) @ C.T

    def mean_node(self, x, C_T):
        return ad.matmul(pm.monomials(x, self.D), C_T)

    def prepare(self, C_node):
        return ad.transpose(C_node)


class KuramotoTransition:
    """Phase-oscillator Euler map; parameters are ``[eta_1..eta_n, K]``."""

    def __init__(self, dt):
        self.dt = dt

    def mean(self, x, theta):
        n = x.shape[1]
        eta, k = theta[:n], theta[n:]
        c = np.sum(np.cos(x), axis=1, keepdims=True) / n
        s = np.sum(np.sin(x), axis=1, keepdims=True) / n
        drift = eta + k * (s * np.cos(x) - c * np.sin(x))
        return wrap_phase(x + self.dt * drift)

    def mean_node(self, x, theta):
        n = x.value.shape[1]
        eta = ad.apply(theta.value[:n], (theta, lambda g: np.concatenate([g, [0.0]])))
        k = ad.apply(theta.value[n:], (theta, lambda g: np.concatenate([np.zeros(n), np.atleast_1d(g.sum())])))
        cx, sx = ad.cos(x), ad.sin(x)
        c = ad.sum(cx, axis=1, keepdims=True) / n
        s = ad.sum(sx, axis=1, keepdims=True) / n
        drift = eta + k * (s * cx - c * sx)
        return ad.wrap_angle(x + self.dt * drift)

    def prepare(self, theta_node):
        return theta_node


def default_transition(spec: SsmSpec):
    if spec.D is None:
        raise ValueError("spec has no polynomial transition; pass one explicitly")
    return PolynomialTransition(spec.D)


# -- filters -----------------------------------------------------------------

def sir_filter(spec: SsmSpec, y, K, rng=None, params=None, transition=None) -> FilterOutput:
    """Forward-only bootstrap particle filter.

    ``params``/``transition`` override the spec's transition (defaults: the
    spec's own ``C`` on its degree matrix, or its closed-form map).
    """
    y = _check_inputs(spec, y, K)
    streams = FilterStreams.from_seed(rng)
    if transition is None and params is None and spec.mean_fn is not None:
        mean = spec.transition_mean
    else:
        transition = transition or default_transition(spec)
        theta = np.asarray(spec.C if params is None else params, dtype=float)

        def mean(x):
            return transition.mean(x, theta)

    obs = _obs_model(spec)
    noise = spec.noise_factor * 1.0
    Lv = _cov_factor(spec.state_cov)
    T = y.shape[0]
    n = spec.n_x
    log_carry = -math.log(K)

    x = _prior_draw(spec, K, streams.prior)
    initial = x
    lwbar = np.full(K, log_carry)
    probs = np.full(K, 1.0 / K)
    xs = np.empty((T, K, n))
    anc = np.empty((T, K), dtype=np.int64)
    lws = np.empty((T, K))
    lwbars = np.empty((T, K))
    steps = np.empty(T)
    total = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            a = resample_multinomial(probs, streams.resample)
            eps = streams.proposal.standard_normal((K, n))
            x = mean(x[a]) + noise * (eps @ Lv)
            if spec.circular:
                x = wrap_phase(x)
            innov = y[t] - x
            if obs.circular:
                innov = wrap_phase(innov)
            z = innov @ obs.prec_chol_T
            lw = -0.5 * np.sum(z * z, axis=1) + obs.log_norm
            lw = np.where(np.isfinite(lw), lw, -np.inf)
            carry = np.full(K, log_carry)
            log_nu = lw + carry
            try:
                ll_t, probs = ad.logsumexp_value(log_nu)
            except DegeneracyError as exc:
                raise DegeneracyError(f"likelihood collapsed at t={t + 1}", step=t + 1) from exc
            lwbar = log_nu - ll_t
            total = total + ll_t
            xs[t], anc[t], lws[t], lwbars[t], steps[t] = x, a, lw, lwbar, ll_t
    cloud = ParticleCloud(initial, xs, anc, lws, lwbars)
    return FilterOutput(cloud, float(total), steps, weighted_means(xs, lwbars, spec.circular))


def dpf_filter(params, spec: SsmSpec, y, K, rng=None, transition=None, tape=None) -> FilterOutput:
    """Differentiable bootstrap filter; ``output.gradient()`` gives d ll / d params."""
    y = _check_inputs(spec, y, K)
    streams = FilterStreams.from_seed(rng)
    transition = transition or default_transition(spec)
    tape = tape or ad.Tape()
    theta = params if isinstance(params, ad.Node) else tape.leaf(np.asarray(params, dtype=float))
    prepared = transition.prepare(theta)

    obs = _obs_model(spec)
    noise = spec.noise_factor * 1.0
    Lv = _cov_factor(spec.state_cov)
    T = y.shape[0]
    n = spec.n_x
    log_carry = -math.log(K)

    x = ad.const(_prior_draw(spec, K, streams.prior))
    initial = x.value
    lwbar = ad.const(np.full(K, log_carry))
    probs = np.full(K, 1.0 / K)
    xs = np.empty((T, K, n))
    anc = np.empty((T, K), dtype=np.int64)
    lws = np.empty((T, K))
    lwbars = np.empty((T, K))
    steps = np.empty(T)
    carries = []
    total = None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            a = resample_multinomial(probs, streams.resample)
            eps = streams.proposal.standard_normal((K, n))
            x = transition.mean_node(ad.take(x, a), prepared) + noise * (eps @ Lv)
            if spec.circular:
                x = ad.wrap_angle(x)
            innov = ad.sub(y[t], x)
            if obs.circular:
                innov = ad.wrap_angle(innov)
            z = ad.matmul(innov, obs.prec_chol_T)
            lw = ad.where_finite(-0.5 * ad.sum(z * z, axis=1) + obs.log_norm)
            g = ad.take(lwbar, a)
            carry = ad.add(ad.sub(g, ad.stop_gradient(g)), log_carry)
            log_nu = ad.add(lw, carry)
            try:
                ll_t, probs = ad.logsumexp(log_nu, return_softmax=True)
            except DegeneracyError as exc:
                raise DegeneracyError(f"likelihood collapsed at t={t + 1}", step=t + 1) from exc
            lwbar = ad.sub(log_nu, ll_t)
            total = ll_t if total is None else ad.add(total, ll_t)
            carries.append(carry)
            xs[t], anc[t], lws[t], lwbars[t], steps[t] = x.value, a, lw.value, lwbar.value, ll_t.value
    cloud = ParticleCloud(initial, xs, anc, lws, lwbars, carries)
    return FilterOutput(cloud, total, steps, weighted_means(xs, lwbars, spec.circular), params_node=theta)


def value_and_grad(params, spec: SsmSpec, y, K, rng=None, transition=None):
    """Log-likelihood estimate, its gradient, and the filter output."""
    out = dpf_filter(params, spec, y, K, rng, transition)
    return out.value, out.gradient(), out


# -- degeneracy study ----------------------------------------------------------

def degeneracy_probe(spec: SsmSpec, y, K, rng=None, C=None, floor=SINGLE_PRECISION_LOG_FLOOR):
    """Number of steps a SIR filter survives before its likelihood underflows.

    The filter runs with coefficients ``C`` (default: i.i.d. U(-1, 1), drawn
    from ``rng``).  The likelihood is deemed zero once the per-step
    log-likelihood drops to ``floor`` (single-precision underflow) or is not
    finite; the return value is the number of complete steps before that, or
    ``len(y)`` if it never happens.
    """
    rng = np.random.default_rng(rng)
    y = _check_inputs(spec, y, K)
    if C is None:
        C = pm.init_coefficients(spec.n_x, spec.D.n_monomials, rng)
    try:
        out = sir_filter(spec, y, K, rng, params=C)
    except DegeneracyError as exc:
        return exc.step - 1
    bad = np.flatnonzero(~(out.step_log_likelihoods > floor))
    return int(bad[0]) if bad.size else y.shape[0]
