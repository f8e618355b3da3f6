"""Replicate runners shared by the CLI and the acceptance suite.

A replicate is identified by its seed (``base_seed + i``).  Everything it
draws comes from ``SeedSequence(seed, spawn_key=...)`` substreams:

* ``(0, attempt)``  the simulated realisation (attempt > 0 only after a
  divergence; the attempt count is recorded);
* the fit uses the replicate seed itself through :class:`FitConfig`;
* ``(1,)``          the evaluation filters (nRMSE path).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import filtering as fl
from . import metrics as me
from . import optimizer as op
from . import polymodel as pm
from . import systems as sy
from .config import ExperimentConfig
from .errors import DegeneracyError, SimulationError

METHOD_MODES = {"graphgrad": "prox", "graphgrad-subgrad": "subgradient", "pmle": "none", "truemle": "none"}


def substream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class Realisation:
    spec: sy.SsmSpec  # the data-generating system
    traj: sy.Trajectory
    seed: int
    attempts: int  # number of diverged draws skipped before this one
    C_true: Optional[np.ndarray] = None  # truth embedded in the fitted degree (polynomial systems)


def build_system(cfg: ExperimentConfig, seed, d=None):
    """Spec of the data-generating system (Kuramoto specs are built by the simulator)."""
    s = cfg.system
    name = cfg.experiment["system"]
    d = cfg.fit["d"] if d is None else d
    if name == "lorenz63":
        return sy.lorenz63_spec(sigma2=s["sigma2"], dt=s["dt"], d=2, sigma=s["sigma"], rho=s["rho"],
                                beta=s["beta"], obs_noise_scale=s["obs_noise_scale"])
    if name == "lorenz96":
        spec = sy.lorenz96_spec(n_x=s["n_x"], sigma2=s["sigma2"], dt=s["dt"], d=2, forcing=s["forcing"])
        spec.obs_noise_scale = s["obs_noise_scale"]
        return spec
    if name == "random":
        spec = sy.random_sparse_system(s["n_x"], s["degree"], sparsity=s["sparsity"], dt=s["dt"],
                                       rng=substream(seed, 2))
        return spec
    raise ValueError(f"{name} has no closed-form spec builder")


def realise(cfg: ExperimentConfig, seed) -> Realisation:
    """Simulate one replicate, redrawing after divergence up to ``max_redraws`` times."""
    name = cfg.experiment["system"]
    T = cfg.experiment["T"]
    s = cfg.system
    d = cfg.fit["d"]
    for attempt in range(cfg.experiment["max_redraws"]):
        rng = substream(seed, 0, attempt)
        try:
            if name == "kuramoto":
                traj, spec = sy.kuramoto_simulate(
                    n_x=s["n_x"], coupling=s["coupling"], dt=s["dt"], sigma=s["noise_sd"], T=T,
                    burn_in_time=s["burn_in_time"], rng=rng, eta_mean=s["eta_mean"], eta_sd=s["eta_sd"],
                )
                spec.init_cov = s["init_var"] * np.eye(spec.n_x)
                spec.obs_noise_scale = s["obs_noise_scale"]
                return Realisation(spec, traj, seed, attempt)
            spec = build_system(cfg, seed)
            traj = sy.simulate(spec, T, rng)
        except SimulationError:
            continue
        C_true, _ = sy.embed_coefficients(spec.C, spec.D, d)
        return Realisation(spec, traj, seed, attempt, C_true)
    raise SimulationError(f"seed {seed}: every one of {cfg.experiment['max_redraws']} draws diverged")


def fit_config(cfg: ExperimentConfig, seed, lam, method=None) -> op.FitConfig:
    f = cfg.fit
    method = method or cfg.experiment["method"]
    return op.FitConfig(
        d=f["d"], n_batches=f["B"], steps_per_batch=f["S"], lam=0.0 if lam is None else float(lam),
        lr=f["lr"], n_particles=f["K"], seed=int(seed), penalty_mode=METHOD_MODES[method],
        beta1=f["beta1"], beta2=f["beta2"], clip_ratio=f["clip_ratio"],
    )


def resolve_lambda(cfg: ExperimentConfig, method=None):
    """The configured penalty, tuning it first when ``lam = tune``.

    Returns ``(lam, tuning_result_or_None)``.  Methods without a penalty get 0.
    """
    method = method or cfg.experiment["method"]
    if method in ("pmle", "truemle"):
        return 0.0, None
    lam = cfg.fit["lam"]
    if lam != "tune":
        return float(lam), None
    t = cfg.tune
    base = fit_config(cfg, t["seed"], 0.0, "graphgrad")
    res = op.tune_lambda(cfg.system["n_x"], cfg.fit["d"], base, T=t["T"], dt=cfg.system["dt"], lo=t["lo"],
                         hi=t["hi"], iterations=t["iterations"], seed=t["seed"])
    return res.lam, res


@dataclass
class ReplicateResult:
    seed: int
    method: str
    attempts: int
    report: Optional[op.FitReport] = None
    support: Optional[me.SupportReport] = None
    nrmse: Optional[dict] = None
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def row(self, T, sigma2, d):
        out = {"method": self.method, "T": T, "sigma2": sigma2, "d": d, "seed": self.seed}
        if self.support is not None:
            out.update(me.metric_row(self.method, T, sigma2, d, self.support))
            out["rmse_full"] = self.support.rmse_full
        if self.nrmse is not None:
            out.update(self.nrmse)
        if self.report is not None:
            out["wall_time"] = self.report.wall_time
            out["aborted_batches"] = len(self.report.aborted_batches)
        out["error"] = self.error or ""
        return out


def fit(cfg: ExperimentConfig, real: Realisation, lam, method=None) -> op.FitReport:
    method = method or cfg.experiment["method"]
    fc = fit_config(cfg, real.seed, lam, method)
    y = real.traj.observations
    if method == "truemle":
        return op.true_mle(y, real.spec, fc)
    return op.b_graphgrad(y, real.spec, fc)


def estimate_means(spec: sy.SsmSpec, y, K, seed, params=None, transition=None):
    """Filtering means of a SIR run; ``None`` when the filter degenerates."""
    try:
        out = fl.sir_filter(spec, y, K, substream(seed, 1), params=params, transition=transition)
    except DegeneracyError:
        return None
    return out.posterior_means


def kuramoto_nrmse(cfg: ExperimentConfig, real: Realisation, C, method):
    """State-recovery error of the fitted model relative to a filter on the true model."""
    y = real.traj.observations
    K = cfg.fit["K"]
    x_gt = real.traj.states[1:]
    ref = estimate_means(real.spec, y, K, real.seed)
    if method == "truemle":
        est = estimate_means(real.spec, y, K, real.seed, params=C,
                             transition=fl.KuramotoTransition(real.spec.dt))
    else:
        fspec = op.fitting_spec(real.spec, cfg.fit["d"]).with_coefficients(C)
        est = estimate_means(fspec, y, K, real.seed)
    if ref is None:
        raise DegeneracyError("reference filter on the true model degenerated")
    value = math.inf if est is None else me.nrmse(est, ref, x_gt, circular=True)
    return {"nrmse": value, "rmse_est": math.inf if est is None else me.circular_rmse(est, x_gt),
            "rmse_true_model": me.circular_rmse(ref, x_gt)}


def run_replicate(cfg: ExperimentConfig, seed, lam, method=None) -> ReplicateResult:
    method = method or cfg.experiment["method"]
    real = realise(cfg, seed)
    res = ReplicateResult(seed=seed, method=method, attempts=real.attempts)
    try:
        res.report = fit(cfg, real, lam, method)
    except DegeneracyError as exc:
        res.error = str(exc)
        return res
    if cfg.experiment["system"] == "kuramoto":
        res.nrmse = kuramoto_nrmse(cfg, real, res.report.C, method)
    else:
        res.support = me.support_metrics(res.report.C, real.C_true)
    return res


def _call(args):
    fn, a = args
    return fn(*a)


def map_seeds(fn, arg_tuples, jobs=1):
    """Apply ``fn(*args)`` over replicates, in a process pool when ``jobs > 1``.

    Results come back in input order regardless of completion order.
    """
    arg_tuples = list(arg_tuples)
    if jobs <= 1 or len(arg_tuples) <= 1:
        return [fn(*a) for a in arg_tuples]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_call, [(fn, a) for a in arg_tuples]))


def replicate_seeds(cfg: ExperimentConfig):
    base = cfg.experiment["seed"]
    return [base + i for i in range(cfg.experiment["replicates"])]


def run_method(cfg: ExperimentConfig, method=None, lam=None, jobs=1):
    """All replicates of one method; returns ``(lam, results sorted by seed)``."""
    method = method or cfg.experiment["method"]
    if lam is None:
        lam, _ = resolve_lambda(cfg, method)
    seeds = replicate_seeds(cfg)
    results = map_seeds(run_replicate, [(cfg, s, lam, method) for s in seeds], jobs)
    return lam, sorted(results, key=lambda r: r.seed)


def summarise(results, key):
    values = [getattr(r.support, key) if r.support is not None else np.nan for r in results]
    return me.aggregate(values)


def degeneracy_table(cfg: ExperimentConfig, jobs=1):
    """Mean steps before likelihood underflow per particle count.

    Each of ``n_systems`` Lorenz 63 realisations starts at ``x0 ~ N(0, I)``;
    the filter runs with i.i.d. U(-1, 1) coefficients.  Systems and
    coefficients are shared across particle counts.
    """
    g = cfg.degeneracy
    rows = []
    results = map_seeds(_degeneracy_system, [(cfg, i) for i in range(g["n_systems"])], jobs)
    for j, K in enumerate(g["K_list"]):
        steps = [r[j] for r in results]
        rows.append({"K": K, "mean_steps": float(np.mean(steps)), "n": len(steps)})
    return rows


def _degeneracy_system(cfg: ExperimentConfig, index):
    g = cfg.degeneracy
    s = cfg.system
    base = cfg.experiment["seed"]
    for attempt in range(cfg.experiment["max_redraws"]):
        rng = substream(base, 3, index, attempt)
        spec = sy.lorenz63_spec(sigma2=s["sigma2"], dt=s["dt"], obs_noise_scale=s["obs_noise_scale"])
        spec.init_mean = rng.normal(size=3)
        try:
            traj = sy.simulate(spec, g["T"], rng)
            break
        except SimulationError:
            continue
    else:
        raise SimulationError(f"degeneracy system {index} diverged in every draw")
    C = pm.init_coefficients(3, spec.D.n_monomials, rng)
    return [fl.degeneracy_probe(spec, traj.observations, K, substream(base, 4, index, K), C=C)
            for K in g["K_list"]]
