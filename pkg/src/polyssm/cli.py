"""Command-line front end.

    polyssm simulate     --config exp.ini [--seed N] [--out DIR] [--jobs N]
    polyssm tune-lambda  --config exp.ini
    polyssm fit          --config exp.ini
    polyssm evaluate     --config exp.ini
    polyssm export-graph (--coefficients C.json | --truth lorenz63|lorenz96) [--n-x N] [--per-monomial DIR]
    polyssm degeneracy   --config exp.ini

Outputs live under ``<out>/<command>/...`` at paths fixed by the config
(no timestamps).  JSON outputs carry ``config_hash`` and ``seed`` fields;
CSV outputs carry them on a leading ``#`` line.

Exit codes: 0 success, 2 configuration error, 3 runtime or degeneracy failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cf
from . import experiments as ex
from . import metrics as me
from . import polymodel as pm
from . import systems as sy
from .errors import ConfigError, DegeneracyError, SimulationError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(Exception):
    """A command could not complete; ``path`` points at the relevant log."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


def _meta(cfg, seed):
    return {"config_hash": cfg.config_hash(), "seed": seed}


def _dump(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    me.write_json(path, payload)


def _out(cfg, *parts):
    path = os.path.join(cfg.experiment["out"], *parts)
    os.makedirs(path, exist_ok=True)
    return path


def _rep_dir(seed):
    return f"rep-{seed}"


def load_config(args) -> cf.ExperimentConfig:
    cfg = cf.load(args.config) if args.config else cf.default()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["experiment__seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["experiment__out"] = args.out
    return cfg.with_overrides(**overrides) if overrides else cfg


# -- commands ------------------------------------------------------------------

def _simulate_one(cfg, seed):
    return ex.realise(cfg, seed)


def cmd_simulate(cfg, jobs=1):
    seeds = ex.replicate_seeds(cfg)
    reals = ex.map_seeds(_simulate_one, [(cfg, s) for s in seeds], jobs)
    paths = []
    for real in sorted(reals, key=lambda r: r.seed):
        d = _out(cfg, "simulate", _rep_dir(real.seed))
        meta = _meta(cfg, real.seed)
        sy.write_trajectory_csv(os.path.join(d, "trajectory.csv"), real.traj, meta=meta)
        extra = {**meta, "redraws": real.attempts}
        if real.C_true is not None:
            extra["truth"] = pm.to_json_dict(real.spec.C, real.spec.D)
        sy.write_manifest(os.path.join(d, "manifest.json"), real.spec, cfg.experiment["T"], real.seed, extra=extra)
        paths.append(d)
    return paths


def cmd_tune_lambda(cfg):
    lam, res = ex.resolve_lambda(cfg, "graphgrad")
    payload = {**_meta(cfg, cfg.tune["seed"]), "lam": lam}
    if res is not None:
        payload.update(log10_lam=res.log10_lam, interval=list(res.interval),
                       probes=[list(p) for p in res.probes], system_seed=res.system_seed)
    path = os.path.join(_out(cfg, "tune"), "lambda.json")
    _dump(path, payload)
    return payload


def _fit_one(cfg, seed, lam, method):
    """Fit one replicate; returns ``(seed, report or None, error payload or None, redraws)``."""
    real = ex.realise(cfg, seed)
    try:
        return seed, ex.fit(cfg, real, lam, method), None, real.attempts
    except DegeneracyError as exc:
        return seed, None, {"error": str(exc), "step": exc.step}, real.attempts


def cmd_fit(cfg, jobs=1):
    method = cfg.experiment["method"]
    lam, tuned = ex.resolve_lambda(cfg, method)
    seeds = ex.replicate_seeds(cfg)
    results = ex.map_seeds(_fit_one, [(cfg, s, lam, method) for s in seeds], jobs)
    failed = []
    for seed, report, err, redraws in sorted(results, key=lambda r: r[0]):
        d = _out(cfg, "fit", method, _rep_dir(seed))
        meta = _meta(cfg, seed)
        info = {**meta, "method": method, "lam": lam, "lam_tuned": tuned is not None, "redraws": redraws}
        if report is None:
            path = os.path.join(d, "degeneracy.json")
            _dump(path, {**info, **err})
            failed.append(path)
            continue
        if report.D is not None:
            pm.save_json(os.path.join(d, "coefficients.json"), report.C, report.D, extra=meta)
        else:
            _dump(os.path.join(d, "coefficients.json"),
                  {**meta, "parameters": [float(v) for v in report.C], "layout": "eta_1..eta_n, coupling"})
        report.save_trace_csv(os.path.join(d, "loss_trace.csv"), meta=meta)
        report.save_json(os.path.join(d, "report.json"), extra=info)
        if report.degeneracy_events:
            _dump(os.path.join(d, "degeneracy.json"), {**info, "events": report.degeneracy_events})
    if failed:
        raise RuntimeFailure(f"{len(failed)} replicate fit(s) degenerated; see {failed[0]}", failed[0])
    return lam


def _load_fit(cfg, method, seed):
    path = os.path.join(cfg.experiment["out"], "fit", method, _rep_dir(seed), "coefficients.json")
    if not os.path.exists(path):
        raise RuntimeFailure(f"missing fit artifact {path}; run `fit` first", path)
    with open(path) as fh:
        payload = json.load(fh)
    if "parameters" in payload:
        return np.asarray(payload["parameters"], dtype=float)
    C, _ = pm.from_json_dict(payload)
    return C


def _evaluate_one(cfg, seed, method):
    real = ex.realise(cfg, seed)
    C = _load_fit(cfg, method, seed)
    res = ex.ReplicateResult(seed=seed, method=method, attempts=real.attempts)
    if cfg.experiment["system"] == "kuramoto":
        res.nrmse = ex.kuramoto_nrmse(cfg, real, C, method)
    else:
        res.support = me.support_metrics(C, real.C_true)
    return res


def cmd_evaluate(cfg, jobs=1):
    method = cfg.experiment["method"]
    seeds = ex.replicate_seeds(cfg)
    for s in seeds:
        _load_fit(cfg, method, s)  # fail fast on missing artifacts
    results = sorted(ex.map_seeds(_evaluate_one, [(cfg, s, method) for s in seeds], jobs), key=lambda r: r.seed)
    T, sigma2, d = cfg.experiment["T"], cfg.system["sigma2"], cfg.fit["d"]
    rows = [r.row(T, sigma2, d) for r in results]
    out = _out(cfg, "evaluate", method)
    meta = _meta(cfg, cfg.experiment["seed"])
    if cfg.experiment["system"] == "kuramoto":
        cols = ("method", "T", "d", "seed", "nrmse", "rmse_est", "rmse_true_model")
        summary = {"nrmse": me.aggregate([r.nrmse["nrmse"] for r in results])}
    else:
        cols = me.METRIC_COLUMNS + ("seed", "rmse_full")
        summary = me.aggregate([r.support for r in results])
    me.write_metric_csv(os.path.join(out, "replicates.csv"), rows, columns=cols, meta=meta)
    agg = [{"method": method, "T": T, "sigma2": sigma2, "d": d, "metric": k, "mean": v.mean,
            "half_width": v.half_width, "n": v.n} for k, v in summary.items()]
    me.write_metric_csv(os.path.join(out, "summary.csv"), agg,
                        columns=("method", "T", "sigma2", "d", "metric", "mean", "half_width", "n"), meta=meta)
    return summary


def cmd_export_graph(C, D, zero_tol=pm.ZERO_TOL, per_monomial_dir=None):
    A = pm.adjacency(C, D, zero_tol)
    if per_monomial_dir:
        os.makedirs(per_monomial_dir, exist_ok=True)
        for j, Aj in enumerate(pm.per_monomial_graphs(C, D, zero_tol)):
            if Aj.any():
                with open(os.path.join(per_monomial_dir, f"monomial-{j}.dot"), "w") as fh:
                    fh.write(pm.to_dot(Aj, name=f"monomial_{j}"))
    return pm.to_dot(A)


def cmd_degeneracy(cfg, jobs=1):
    rows = ex.degeneracy_table(cfg, jobs)
    path = os.path.join(_out(cfg, "degeneracy"), "degeneracy.csv")
    me.write_metric_csv(path, rows, columns=("K", "mean_steps", "n"), meta=_meta(cfg, cfg.experiment["seed"]))
    return rows


# -- argument handling ---------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="polyssm", description="Sparse polynomial state-space model learning.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="INI experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override experiment.seed")
        sp.add_argument("--out", metavar="DIR", help="override experiment.out")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for replicates")

    for name, text in [("simulate", "write trajectories and manifests"),
                       ("tune-lambda", "choose the L1 penalty on a random sparse system"),
                       ("fit", "fit every replicate"),
                       ("evaluate", "score fitted replicates"),
                       ("degeneracy", "steps before likelihood underflow vs particle count")]:
        common(sub.add_parser(name, help=text))

    g = sub.add_parser("export-graph", help="DOT connectivity graph of a coefficient matrix")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--coefficients", metavar="PATH", help="coefficient JSON from `fit`")
    src.add_argument("--truth", choices=("lorenz63", "lorenz96"), help="use the true system")
    g.add_argument("--n-x", type=int, default=20, help="state size for --truth lorenz96")
    g.add_argument("--zero-tol", type=float, default=pm.ZERO_TOL)
    g.add_argument("--per-monomial", metavar="DIR", help="also write one DOT file per active monomial")
    g.add_argument("--out", metavar="PATH", help="write DOT here instead of stdout")

    sub.add_parser("schema", help="print the config schema")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "schema":
            print(cf.describe_schema())
            return EXIT_OK
        if args.command == "export-graph":
            if args.coefficients:
                C, D = pm.load_json(args.coefficients)
            elif args.truth == "lorenz63":
                spec = sy.lorenz63_spec()
                C, D = spec.C, spec.D
            else:
                spec = sy.lorenz96_spec(n_x=args.n_x)
                C, D = spec.C, spec.D
            dot = cmd_export_graph(C, D, args.zero_tol, args.per_monomial)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(dot)
            else:
                sys.stdout.write(dot)
            return EXIT_OK
        cfg = load_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1", field="jobs")
        if args.command == "simulate":
            for path in cmd_simulate(cfg, args.jobs):
                print(path)
        elif args.command == "tune-lambda":
            print(f"lambda = {cmd_tune_lambda(cfg)['lam']!r}")
        elif args.command == "fit":
            print(f"lambda = {cmd_fit(cfg, args.jobs)!r}")
        elif args.command == "evaluate":
            for key, s in cmd_evaluate(cfg, args.jobs).items():
                print(f"{key}: {s.mean:.6g} +/- {s.half_width:.3g} (n={s.n})")
        elif args.command == "degeneracy":
            for row in cmd_degeneracy(cfg, args.jobs):
                print(f"K={row['K']}: {row['mean_steps']:.2f} steps (n={row['n']})")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DegeneracyError, SimulationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
