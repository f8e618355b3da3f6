"""Penalised maximum-likelihood fitting of polynomial transition coefficients.

One optimisation step on an observation prefix ``y``::

    ll, g  = DPF log-likelihood and gradient at C
    C~     = NovoGrad step on the negative log-likelihood gradient -g
    C      = soft_threshold(C~, lr * lam)          (penalty_mode="prox")

``penalty_mode="subgradient"`` instead feeds ``-g + lam * sign(C)`` to the
optimiser; ``"none"`` drops the penalty altogether (the dense pMLE baseline).
The batched driver repeats ``steps_per_batch`` such steps on the nested
prefixes ``y[:ceil(b T / B)]`` for ``b = 1..B``, warm-starting each batch
from the previous one.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import filtering as fl
from . import polymodel as pm
from .errors import DegeneracyError
from .systems import SsmSpec, comment_line

PENALTY_MODES = ("prox", "subgradient", "none")


# -- elementary steps ----------------------------------------------------------

def soft_threshold(C, alpha):
    """Proximity operator of ``alpha * ||C||_1``: ``sign(c) * max(|c| - alpha, 0)``."""
    if alpha < 0:
        raise ValueError(f"threshold must be nonnegative, got {alpha}")
    C = np.asarray(C, dtype=float)
    return np.sign(C) * np.maximum(np.abs(C) - alpha, 0.0)


@dataclass
class OptimizerState:
    """Layer-wise NovoGrad state for a single parameter matrix.

    ``log_exp_avg_sq`` is the log of the running average of the squared
    gradient norm (kept in the log domain so that gradients near the float
    range do not overflow it); ``exp_avg`` is the momentum buffer of
    normalised gradients.

    ``clip_ratio`` caps the norm of an incoming gradient at ``clip_ratio``
    times the running root second moment before it is accumulated, so one
    exploding gradient cannot freeze the step size for hundreds of steps.
    ``None`` disables the guard.
    """

    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.25
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_averaging: bool = False
    clip_ratio: Optional[float] = 10.0
    step: int = 0
    exp_avg: Optional[np.ndarray] = None
    log_exp_avg_sq: Optional[float] = None

    def copy(self):
        out = OptimizerState(**{k: v for k, v in asdict(self).items() if k != "exp_avg"})
        out.exp_avg = None if self.exp_avg is None else self.exp_avg.copy()
        return out


def novograd_step(state: OptimizerState, C, grad):
    """One NovoGrad update of ``C`` along the loss gradient ``grad``.

    Returns ``(new_state, new_C)``; the input state is left untouched.
    """
    C = np.asarray(C, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != C.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter shape {C.shape}")
    if not np.all(np.isfinite(grad)):
        raise DegeneracyError("non-finite gradient; step rejected")
    st = state.copy()
    st.step += 1
    scale = float(np.max(np.abs(grad)))
    if scale == 0.0:
        log_norm = -math.inf
        unit = grad
    else:
        unit = grad / scale
        log_norm = 2.0 * math.log(scale) + math.log(float(np.sum(unit * unit)))
        if st.clip_ratio is not None and st.log_exp_avg_sq is not None:
            cap = 2.0 * math.log(st.clip_ratio) + st.log_exp_avg_sq
            if log_norm > cap:
                scale *= math.exp(0.5 * (cap - log_norm))
                log_norm = cap
    if st.log_exp_avg_sq is None:
        st.log_exp_avg_sq = log_norm
    else:
        st.log_exp_avg_sq = float(np.logaddexp(math.log(st.beta2) + st.log_exp_avg_sq,
                                               math.log1p(-st.beta2) + log_norm))
    if scale == 0.0:
        g = np.zeros_like(grad)
    else:
        # grad / (sqrt(v) + eps) written as unit * scale / (sqrt(v) + eps)
        log_root = 0.5 * st.log_exp_avg_sq
        log_den = float(np.logaddexp(log_root, math.log(st.eps))) if st.eps > 0 else log_root
        g = unit * math.exp(math.log(scale) - log_den)
    if st.weight_decay:
        g = g + st.weight_decay * C
    if st.grad_averaging:
        g = g * (1.0 - st.beta1)
    st.exp_avg = g if st.exp_avg is None else st.beta1 * st.exp_avg + g
    return st, C - st.lr * st.exp_avg


def subgradient_step(state: OptimizerState, C, grad, lam):
    """NovoGrad step on ``grad + lam * sign(C)`` (``sign(0) = 0``)."""
    return novograd_step(state, C, np.asarray(grad, dtype=float) + lam * np.sign(C))


def penalised_step(state, C, grad, lam, penalty_mode):
    if penalty_mode == "prox":
        state, C = novograd_step(state, C, grad)
        return state, soft_threshold(C, state.lr * lam)
    if penalty_mode == "subgradient":
        return subgradient_step(state, C, grad, lam)
    if penalty_mode == "none":
        return novograd_step(state, C, grad)
    raise ValueError(f"unknown penalty mode {penalty_mode!r}")


# -- configuration and reporting -----------------------------------------------

@dataclass
class FitConfig:
    d: int = 2
    n_batches: Optional[int] = None  # None: ceil(T / 10)
    steps_per_batch: int = 100
    lam: float = 1.0
    lr: float = 1e-3
    n_particles: int = 100
    seed: int = 0
    penalty_mode: str = "prox"
    beta1: float = 0.95
    beta2: float = 0.25
    clip_ratio: Optional[float] = 10.0  # spike guard on the gradient norm; None disables

    def __post_init__(self):
        if self.n_batches is not None and self.n_batches < 1:
            raise ValueError("need at least one batch")
        if self.steps_per_batch < 1:
            raise ValueError("need at least one step per batch")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(f"penalty_mode must be one of {PENALTY_MODES}")

    def batches_for(self, T):
        return self.n_batches if self.n_batches is not None else max(1, math.ceil(T / 10))

    def optimizer_state(self):
        return OptimizerState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, clip_ratio=self.clip_ratio)


@dataclass
class FitReport:
    C: np.ndarray
    D: pm.DegreeMatrix
    loss_trace: list = field(default_factory=list)  # (batch, step, negative log-likelihood)
    batch_snapshots: list = field(default_factory=list)
    wall_time: float = 0.0
    degeneracy_events: list = field(default_factory=list)  # dicts: batch, step, attempt, reason
    aborted_batches: list = field(default_factory=list)
    config: Optional[dict] = None

    @property
    def aborted(self) -> bool:
        return bool(self.aborted_batches)

    def to_json_dict(self):
        return {
            "coefficients": (pm.to_json_dict(self.C, self.D) if self.D is not None
                             else {"parameters": [float(v) for v in np.ravel(self.C)]}),
            "wall_time": self.wall_time,
            "n_steps": len(self.loss_trace),
            "final_loss": self.loss_trace[-1][2] if self.loss_trace else None,
            "degeneracy_events": self.degeneracy_events,
            "aborted_batches": self.aborted_batches,
            "batch_snapshots": [np.asarray(c).tolist() for c in self.batch_snapshots],
            "config": self.config,
        }

    def save_json(self, path, extra=None):
        payload = self.to_json_dict()
        if extra:
            payload.update(extra)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def save_trace_csv(self, path, meta=None):
        with open(path, "w", newline="") as fh:
            if meta:
                fh.write(comment_line(meta))
            w = csv.writer(fh)
            w.writerow(["batch", "step", "neg_log_likelihood"])
            for b, s, loss in self.loss_trace:
                w.writerow([b, s, repr(float(loss))])


class BatchAborted(Exception):
    """Both attempts of an optimisation step degenerated."""


# -- drivers -----------------------------------------------------------------

def _step_seed(seed, batch, step, attempt):
    # a distinct, reproducible substream for every (batch, step, attempt)
    return np.random.SeedSequence(seed, spawn_key=(batch, step, attempt))


def _evaluate(C, spec, y, K, seed, transition):
    try:
        out = fl.dpf_filter(C, spec, y, K, seed, transition)
    except DegeneracyError as exc:
        return None, None, str(exc)
    ll = out.value
    if not math.isfinite(ll):
        return None, None, "non-finite log-likelihood"
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is caught just below
        grad = out.gradient()
    if not np.all(np.isfinite(grad)):
        return None, None, "non-finite gradient"
    return ll, grad, None


def s_graphgrad(y, steps, lam, C0, spec: SsmSpec, K=100, lr=1e-3, seed=0, penalty_mode="prox",
                state: Optional[OptimizerState] = None, batch_index=0, report: Optional[FitReport] = None,
                transition=None):
    """Run ``steps`` penalised NovoGrad steps on the full series ``y``.

    Returns ``(C, state)``.  A step whose likelihood or gradient is not finite
    is retried once on a fresh random substream; if that also fails the
    remaining steps are skipped and :class:`BatchAborted` is raised carrying
    the last valid ``C`` and state.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    C = np.array(C0, dtype=float)
    state = state if state is not None else OptimizerState(lr=lr)
    if state.lr != lr:
        state = state.copy()
        state.lr = lr
    for s in range(steps):
        for attempt in range(2):
            ll, grad, reason = _evaluate(C, spec, y, K, _step_seed(seed, batch_index, s, attempt), transition)
            if reason is None:
                break
            if report is not None:
                report.degeneracy_events.append(
                    {"batch": batch_index, "step": s, "attempt": attempt, "reason": reason}
                )
        if reason is not None:
            exc = BatchAborted(f"batch {batch_index} aborted at step {s}: {reason}")
            exc.C, exc.state = C, state
            raise exc
        if report is not None:
            report.loss_trace.append((batch_index, s, -ll))
        state, C = penalised_step(state, C, -grad, lam, penalty_mode)
    return C, state


def batch_lengths(T, B):
    """Prefix lengths ``ceil(b T / B)`` for ``b = 1..B``."""
    if B < 1 or T < B:
        raise ValueError(f"need 1 <= B <= T, got B={B}, T={T}")
    return [math.ceil(b * T / B) for b in range(1, B + 1)]


def fitting_spec(spec: SsmSpec, d: int) -> SsmSpec:
    """The model being fitted: the spec's noise and prior with a degree-``d`` basis."""
    D = pm.generate_degree_matrix(spec.n_x, d)
    return SsmSpec(
        state_cov=spec.state_cov,
        obs_cov=spec.obs_cov,
        init_mean=spec.init_mean,
        init_cov=spec.init_cov,
        dt=spec.dt,
        C=np.zeros(D.shape),
        D=D,
        noise_scale=spec.noise_scale,
        obs_noise_scale=spec.obs_noise_scale,
        circular=spec.circular,
        name=spec.name,
        params=dict(spec.params),
    )


def _run_batches(y, fspec, config: FitConfig, theta0, D=None, transition=None) -> FitReport:
    T = y.shape[0]
    B = config.batches_for(T)
    theta = np.array(theta0, dtype=float)
    state = config.optimizer_state()
    report = FitReport(C=theta, D=D, config=asdict(config))
    lam = 0.0 if config.penalty_mode == "none" else config.lam
    t0 = time.perf_counter()
    for b, length in enumerate(batch_lengths(T, B)):
        try:
            theta, state = s_graphgrad(
                y[:length], config.steps_per_batch, lam, theta, fspec, config.n_particles, config.lr,
                config.seed, config.penalty_mode, state, b, report, transition,
            )
        except BatchAborted as exc:
            theta, state = exc.C, exc.state
            report.aborted_batches.append(b)
        report.batch_snapshots.append(theta.copy())
    report.wall_time = time.perf_counter() - t0
    report.C = theta
    if len(report.aborted_batches) == B:
        raise DegeneracyError(f"every batch degenerated: {report.degeneracy_events[-1]['reason']}")
    return report


def initial_coefficients(shape, seed):
    """C0 ~ U(-1, 1) element-wise, from a substream reserved for initialisation."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
    return rng.uniform(-1.0, 1.0, size=shape)


def b_graphgrad(y, spec: SsmSpec, config: FitConfig, C0=None) -> FitReport:
    """Batched fit over telescoping observation prefixes; returns a :class:`FitReport`.

    ``spec`` supplies the noise model and prior; its own transition is ignored.
    ``C0`` defaults to i.i.d. U(-1, 1) drawn from the config seed.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    fspec = fitting_spec(spec, config.d)
    D = fspec.D
    if C0 is None:
        C0 = initial_coefficients(D.shape, config.seed)
    elif np.shape(C0) != D.shape:
        raise ValueError(f"C0 has shape {np.shape(C0)}, expected {D.shape}")
    return _run_batches(y, fspec, config, C0, D=D)


def pmle(y, spec: SsmSpec, config: FitConfig, C0=None) -> FitReport:
    """Dense maximum-likelihood baseline: the batched fit without any penalty."""
    cfg = FitConfig(**{**asdict(config), "penalty_mode": "none"})
    return b_graphgrad(y, spec, cfg, C0)


def true_mle(y, spec: SsmSpec, config: FitConfig, theta0=None) -> FitReport:
    """Kuramoto baseline that knows the model form and fits ``[eta_1..eta_n, K]``.

    Same batched DPF + NovoGrad loop as :func:`pmle`; ``report.C`` holds the
    fitted parameter vector.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = spec.n_x
    cfg = FitConfig(**{**asdict(config), "penalty_mode": "none"})
    if theta0 is None:
        theta0 = initial_coefficients((n + 1,), config.seed)
    return _run_batches(y, spec, cfg, theta0, transition=fl.KuramotoTransition(spec.dt))


# -- penalty tuning ------------------------------------------------------------

@dataclass
class TuningResult:
    lam: float
    log10_lam: float
    interval: tuple
    probes: list  # (l, f1) in evaluation order
    system_seed: int


def tune_lambda(n_x, d, config: FitConfig, T=50, dt=0.025, lo=-5.0, hi=2.0, iterations=10, seed=0,
                max_redraws=50) -> TuningResult:
    """Choose ``lam = 10**l`` by bisection on ``l`` in ``[lo, hi]``.

    A random sparse system of the fitted size is simulated once; every probe
    fits it with B-GraphGrad under the same seed and scores support F1.  Each
    iteration compares F1 at the midpoints of the two halves and keeps the
    better half (ties keep the lower half).  Probe values are cached, so each
    distinct ``l`` is fitted once.
    """
    from .metrics import support_metrics
    from .systems import random_sparse_system, simulate
    from .errors import SimulationError

    if iterations < 1:
        raise ValueError("need at least one bisection iteration")
    for attempt in range(max_redraws):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(attempt,)))
        system = random_sparse_system(n_x, d, dt=dt, rng=rng)
        try:
            traj = simulate(system, T, rng)
            break
        except SimulationError:
            continue
    else:
        raise SimulationError(f"tuning system diverged in {max_redraws} draws")

    probes = []
    cache = {}

    def score(l):
        if l not in cache:
            cfg = FitConfig(**{**asdict(config), "lam": 10.0**l, "d": d, "penalty_mode": "prox"})
            try:
                rep = b_graphgrad(traj.observations, system, cfg)
                cache[l] = support_metrics(rep.C, system.C).f1
            except DegeneracyError:
                cache[l] = 0.0
            probes.append((l, cache[l]))
        return cache[l]

    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        left, right = 0.5 * (lo + mid), 0.5 * (mid + hi)
        if score(left) >= score(right):
            hi = mid
        else:
            lo = mid
    l = 0.5 * (lo + hi)
    return TuningResult(10.0**l, l, (lo, hi), probes, attempt)
