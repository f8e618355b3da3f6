"""Synthetic ground-truth systems and simulation.

Every system is an Euler-discretised SDE observed through the identity with
additive Gaussian noise::

    x_{t+1} = mean(x_t) + s * v,   v ~ N(0, Sigma_v)
    y_t     = x_t       + q * r,   r ~ N(0, Sigma_r)

with ``s = sqrt(dt)`` when ``noise_scale`` is set and ``q = sqrt(dt)`` when
``obs_noise_scale`` is set; each is 1 otherwise.  The experiments scale the
state noise only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import polymodel as pm
from .errors import SimulationError

TWO_PI = 2.0 * np.pi


def wrap_phase(x):
    """Map angles to [-pi, pi] via ``atan2(sin x, cos x)``."""
    return np.arctan2(np.sin(x), np.cos(x))


@dataclass
class SsmSpec:
    """A state-space model with identity observations.

    The transition mean is either polynomial (``C``, ``D``) or a closed-form
    batch map ``mean_fn(x) -> x'`` acting on rows.  ``circular`` marks phase
    states living on [-pi, pi]; filters then wrap particles and innovations.
    """

    state_cov: np.ndarray
    obs_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    dt: float
    C: Optional[np.ndarray] = None
    D: Optional[pm.DegreeMatrix] = None
    mean_fn: Optional[Callable] = None
    noise_scale: bool = True
    obs_noise_scale: bool = False
    circular: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.state_cov = np.atleast_2d(np.asarray(self.state_cov, dtype=float))
        self.obs_cov = np.atleast_2d(np.asarray(self.obs_cov, dtype=float))
        self.init_mean = np.asarray(self.init_mean, dtype=float).ravel()
        self.init_cov = np.atleast_2d(np.asarray(self.init_cov, dtype=float))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        n = self.init_mean.size
        for label, cov in (("state_cov", self.state_cov), ("obs_cov", self.obs_cov), ("init_cov", self.init_cov)):
            if cov.shape != (n, n):
                raise ValueError(f"{label} has shape {cov.shape}, expected {(n, n)}")
            if not np.allclose(cov, cov.T):
                raise ValueError(f"{label} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-12 * max(1.0, np.abs(cov).max()):
                raise ValueError(f"{label} is not positive semidefinite")
        if self.mean_fn is None:
            if self.C is None or self.D is None:
                raise ValueError("need either (C, D) or mean_fn")
            self.C = np.asarray(self.C, dtype=float)
            if self.C.shape != self.D.shape or self.D.n_x != n:
                raise ValueError(f"C shape {self.C.shape} inconsistent with D {self.D.shape} / n_x={n}")

    @property
    def n_x(self) -> int:
        return self.init_mean.size

    @property
    def noise_factor(self) -> float:
        return math.sqrt(self.dt) if self.noise_scale else 1.0

    @property
    def obs_noise_factor(self) -> float:
        return math.sqrt(self.dt) if self.obs_noise_scale else 1.0

    def transition_mean(self, x):
        if self.mean_fn is not None:
            return self.mean_fn(np.atleast_2d(x)).reshape(np.shape(x))
        return pm.eval_polynomial(x, self.C, self.D)

    def with_coefficients(self, C, D=None):
        """Same noise model, different polynomial transition."""
        D = D if D is not None else self.D
        return SsmSpec(
            state_cov=self.state_cov,
            obs_cov=self.obs_cov,
            init_mean=self.init_mean,
            init_cov=self.init_cov,
            dt=self.dt,
            C=np.asarray(C, dtype=float),
            D=D,
            noise_scale=self.noise_scale,
            obs_noise_scale=self.obs_noise_scale,
            circular=self.circular,
            name=self.name,
            params=dict(self.params),
        )


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n_x), row 0 is x_0
    observations: np.ndarray  # (T, n_y), row t-1 is y_t
    seed: Optional[int] = None

    def __post_init__(self):
        if self.states.shape[0] != self.observations.shape[0] + 1:
            raise ValueError("need len(states) == len(observations) + 1")

    @property
    def T(self) -> int:
        return self.observations.shape[0]


# -- truth coefficient matrices ----------------------------------------------

def lorenz63_truth(sigma=10.0, rho=28.0, beta=8.0 / 3.0, dt=0.025):
    """Euler-step coefficients of Lorenz 63 on the deg-lex basis, d=2."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    D = pm.generate_degree_matrix(3, 2)
    C = np.zeros(D.shape)
    # columns: 1, x1, x2, x3, x1^2, x1x2, x1x3, x2^2, x2x3, x3^2
    C[0, 1] = 1.0 - sigma * dt
    C[0, 2] = sigma * dt
    C[1, 1] = rho * dt
    C[1, 2] = 1.0 - dt
    C[1, 6] = -dt
    C[2, 3] = 1.0 - beta * dt
    C[2, 5] = dt
    return C, D


def _column_of(D, exponents):
    target = np.asarray(exponents)
    hits = np.flatnonzero(np.all(D.entries == target[:, None], axis=0))
    return int(hits[0])


def lorenz96_truth(n_x=20, forcing=8.0, dt=0.025, d=2):
    """Euler-step coefficients of Lorenz 96 on the deg-lex basis."""
    if n_x < 4:
        raise ValueError(f"Lorenz 96 needs n_x >= 4, got {n_x}")
    if d < 2:
        raise ValueError("Lorenz 96 is quadratic; need d >= 2")
    D = pm.generate_degree_matrix(n_x, d)
    C = np.zeros(D.shape)

    def col(*idx):
        e = np.zeros(n_x, dtype=np.int64)
        for i in idx:
            e[i % n_x] += 1
        return _column_of(D, e)

    for i in range(n_x):
        C[i, col()] = forcing * dt
        C[i, col(i)] = 1.0 - dt
        C[i, col(i - 1, i + 1)] += dt
        C[i, col(i - 1, i - 2)] -= dt
    return C, D


def lorenz63_spec(sigma2=1.0, dt=0.025, d=2, sigma=10.0, rho=28.0, beta=8.0 / 3.0, obs_noise_scale=False):
    C, D2 = lorenz63_truth(sigma, rho, beta, dt)
    C, D = embed_coefficients(C, D2, d)
    n = 3
    return SsmSpec(
        state_cov=sigma2 * np.eye(n),
        obs_cov=sigma2 * np.eye(n),
        init_mean=np.array([1.0, 0.0, 0.0]),
        init_cov=np.eye(n),
        dt=dt,
        C=C,
        D=D,
        obs_noise_scale=obs_noise_scale,
        name="lorenz63",
        params={"sigma2": sigma2, "dt": dt, "sigma": sigma, "rho": rho, "beta": beta,
                "obs_noise_scale": obs_noise_scale},
    )


def lorenz96_spec(n_x=20, sigma2=1.0, dt=0.025, d=2, forcing=8.0):
    C, D = lorenz96_truth(n_x, forcing, dt, d)
    x0 = np.zeros(n_x)
    x0[0] = 1.0
    return SsmSpec(
        state_cov=sigma2 * np.eye(n_x),
        obs_cov=sigma2 * np.eye(n_x),
        init_mean=x0,
        init_cov=np.eye(n_x),
        dt=dt,
        C=C,
        D=D,
        obs_noise_scale=True,
        name="lorenz96",
        params={"n_x": n_x, "sigma2": sigma2, "dt": dt, "forcing": forcing},
    )


def embed_coefficients(C, D_from, d_to):
    """Re-express ``C`` (over ``D_from``) on the deg-lex basis of degree ``d_to``."""
    D_to = pm.generate_degree_matrix(D_from.n_x, d_to)
    out = np.zeros(D_to.shape)
    for j in range(D_from.n_monomials):
        if np.any(C[:, j] != 0):
            if D_from.entries[:, j].sum() > d_to:
                raise ValueError("target degree too small to hold the coefficients")
            out[:, _column_of(D_to, D_from.entries[:, j])] = C[:, j]
    return out, D_to


def random_sparse_system(n_x, d, sparsity=0.75, dt=0.025, rng=None):
    """Random polynomial SSM with a fixed fraction of zero coefficients.

    Nonzero values are drawn U(-n_x, n_x) at uniformly random positions, then
    ``C`` is rescaled to unit spectral norm.  Sigma_v = Sigma_r = dt * I.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    rng = np.random.default_rng(rng)
    D = pm.generate_degree_matrix(n_x, d)
    size = D.entries.size
    n_nonzero = max(1, int(round((1.0 - sparsity) * size)))
    C = np.zeros(size)
    pos = rng.choice(size, size=n_nonzero, replace=False)
    C[pos] = rng.uniform(-n_x, n_x, size=n_nonzero)
    C = C.reshape(D.shape)
    C /= np.linalg.norm(C, 2)
    return SsmSpec(
        state_cov=dt * np.eye(n_x),
        obs_cov=dt * np.eye(n_x),
        init_mean=np.zeros(n_x),
        init_cov=np.eye(n_x),
        dt=dt,
        C=C,
        D=D,
        noise_scale=False,
        name="random_sparse",
        params={"n_x": n_x, "d": d, "sparsity": sparsity, "dt": dt},
    )


# -- Kuramoto ----------------------------------------------------------------

def kuramoto_drift(x, eta, coupling):
    """Mean-field drift ``eta_i + K R sin(psi - x_i)`` for rows of ``x``."""
    x = np.atleast_2d(x)
    c = np.cos(x).mean(axis=1, keepdims=True)  # R cos(psi)
    s = np.sin(x).mean(axis=1, keepdims=True)  # R sin(psi)
    # R sin(psi - x_i) = R sin(psi) cos(x_i) - R cos(psi) sin(x_i)
    return eta + coupling * (s * np.cos(x) - c * np.sin(x))


def kuramoto_order(x):
    """Order parameter R for each row of phases."""
    x = np.atleast_2d(x)
    return np.hypot(np.cos(x).mean(axis=1), np.sin(x).mean(axis=1))


def kuramoto_spec(eta, coupling=0.8, dt=0.05, sigma=0.1, init_mean=None, init_var=0.2):
    eta = np.asarray(eta, dtype=float)
    n = eta.size
    if n < 2:
        raise ValueError("Kuramoto needs at least two oscillators")

    def mean_fn(x):
        return wrap_phase(x + dt * kuramoto_drift(x, eta, coupling))

    return SsmSpec(
        state_cov=sigma**2 * np.eye(n),
        obs_cov=sigma**2 * np.eye(n),
        init_mean=np.zeros(n) if init_mean is None else init_mean,
        init_cov=init_var * np.eye(n),
        dt=dt,
        mean_fn=mean_fn,
        obs_noise_scale=True,
        circular=True,
        name="kuramoto",
        params={"eta": eta.tolist(), "coupling": coupling, "dt": dt, "sigma": sigma},
    )


def kuramoto_simulate(n_x=20, coupling=0.8, eta=None, dt=0.05, sigma=0.1, T=100, burn_in_time=10.0, rng=None,
                      eta_mean=0.5, eta_sd=0.5):
    """Simulate phase oscillators; returns ``(Trajectory, SsmSpec)``.

    Natural frequencies default to N(eta_mean, eta_sd^2) and initial phases to
    U(-pi, pi).  The system runs silently until ``burn_in_time``; the returned
    trajectory starts there and the spec's prior is centred on that state.
    """
    if n_x < 2:
        raise ValueError("Kuramoto needs at least two oscillators")
    rng = np.random.default_rng(rng)
    if eta is None:
        eta = rng.normal(eta_mean, eta_sd, size=n_x)
    x = rng.uniform(-np.pi, np.pi, size=n_x)
    spec = kuramoto_spec(eta, coupling, dt, sigma)
    f = spec.noise_factor
    for _ in range(int(round(burn_in_time / dt))):
        x = wrap_phase(spec.transition_mean(x) + f * sigma * rng.standard_normal(n_x))
    spec.init_mean = x.copy()
    traj = simulate(spec, T, rng)
    return traj, spec


# -- simulation --------------------------------------------------------------

def _noise_chol(cov):
    # Cholesky that tolerates exact zeros (noiseless runs)
    if not np.any(cov):
        return np.zeros_like(cov)
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate(spec: SsmSpec, T: int, rng=None, x0=None) -> Trajectory:
    """Draw ``x_{0:T}`` and ``y_{1:T}``; ``x_0`` defaults to ``spec.init_mean``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    n = spec.n_x
    f = spec.noise_factor
    Lv = _noise_chol(spec.state_cov)
    Lr = _noise_chol(spec.obs_cov)
    xs = np.empty((T + 1, n))
    ys = np.empty((T, n))
    xs[0] = spec.init_mean if x0 is None else x0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, T + 1):
            x = spec.transition_mean(xs[t - 1]) + f * (Lv @ rng.standard_normal(n))
            if spec.circular:
                x = wrap_phase(x)
            if not np.all(np.isfinite(x)):
                raise SimulationError(f"state diverged at t={t}", step=t)
            xs[t] = x
            y = x + spec.obs_noise_factor * (Lr @ rng.standard_normal(n))
            ys[t - 1] = wrap_phase(y) if spec.circular else y
    return Trajectory(states=xs, observations=ys, seed=seed)


# -- I/O ---------------------------------------------------------------------

def comment_line(meta) -> str:
    """``# k=v k=v`` provenance line for CSV outputs (sorted keys)."""
    return "# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n"


def write_trajectory_csv(path, traj: Trajectory, meta=None):
    """Columns ``t, x_1.., y_1..``; row ``t=0`` has empty observation cells.

    ``meta`` (e.g. config hash and seed) is written as a leading ``#`` line.
    """
    T = traj.T
    n_x = traj.states.shape[1]
    n_y = traj.observations.shape[1]
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write(comment_line(meta))
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(n_x)] + [f"y_{i + 1}" for i in range(n_y)])
        for t in range(T + 1):
            y = [""] * n_y if t == 0 else [repr(float(v)) for v in traj.observations[t - 1]]
            w.writerow([t] + [repr(float(v)) for v in traj.states[t]] + y)


def read_trajectory_csv(path, seed=None) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    header, body = rows[0], rows[1:]
    n_x = sum(h.startswith("x_") for h in header)
    xs = np.array([[float(v) for v in r[1 : 1 + n_x]] for r in body])
    ys = np.array([[float(v) for v in r[1 + n_x :]] for r in body[1:]])
    return Trajectory(states=xs, observations=ys, seed=seed)


def write_manifest(path, spec: SsmSpec, T, seed, extra=None):
    payload = {"system": spec.name, "params": spec.params, "T": int(T), "seed": seed}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
