"""Support-recovery and state-recovery metrics.

An entry of a coefficient matrix counts as nonzero when its magnitude
exceeds ``zero_tol``; nonzero is the positive class.  Conventions for
undefined ratios:

* precision with no predicted positives is 1 if there are also no true
  positives to find, else 0 (recall and specificity follow the same rule);
* F1 is 0 when precision + recall is 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import UsageError
from .polymodel import ZERO_TOL
from .systems import comment_line

METRIC_COLUMNS = ("method", "T", "sigma2", "d", "rmse", "specificity", "recall", "precision", "f1")


@dataclass
class SupportReport:
    tp: int
    fp: int
    tn: int
    fn: int
    specificity: float
    recall: float
    precision: float
    f1: float
    rmse: float  # over entries the estimate classifies as nonzero
    rmse_full: float  # over every entry

    def as_dict(self):
        return asdict(self)


def _ratio(num, den, empty):
    return num / den if den else empty


def support_metrics(C_est, C_true, zero_tol=ZERO_TOL) -> SupportReport:
    C_est = np.asarray(C_est, dtype=float)
    C_true = np.asarray(C_true, dtype=float)
    if C_est.shape != C_true.shape:
        raise UsageError(f"shape mismatch: {C_est.shape} vs {C_true.shape}")
    pred = np.abs(C_est) > zero_tol
    true = np.abs(C_true) > zero_tol
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    tn = int(np.sum(~pred & ~true))
    fn = int(np.sum(~pred & true))
    precision = _ratio(tp, tp + fp, 1.0 if tp + fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0)
    specificity = _ratio(tn, tn + fp, 1.0)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    diff = C_est - C_true
    rmse = float(np.sqrt(np.mean(diff[pred] ** 2))) if pred.any() else 0.0
    rmse_full = float(np.sqrt(np.mean(diff**2)))
    return SupportReport(tp, fp, tn, fn, specificity, recall, precision, f1, rmse, rmse_full)


def rmse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def circular_rmse(a, b):
    """RMSE of phase differences wrapped to [-pi, pi]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = np.arctan2(np.sin(a - b), np.cos(a - b))
    return float(np.sqrt(np.mean(d**2)))


def nrmse(x_est, x_true_model, x_gt, circular=False):
    """State-recovery RMSE of an estimator relative to a filter running the true model."""
    err = circular_rmse if circular else rmse
    den = err(x_true_model, x_gt)
    if den == 0:
        raise ZeroDivisionError("reference filter reproduces the ground truth exactly")
    return err(x_est, x_gt) / den


@dataclass
class Summary:
    mean: float
    half_width: float  # 1.96 * sd / sqrt(n); 0 when n == 1
    n: int

    @property
    def single(self) -> bool:
        return self.n == 1


def aggregate(values, z=1.96):
    """Mean and symmetric normal-approximation interval.

    ``values`` is a list of numbers or of dicts/reports with common numeric
    fields; dicts give a dict of :class:`Summary` per field.
    """
    values = list(values)
    if not values:
        raise ValueError("nothing to aggregate")
    first = values[0]
    if isinstance(first, SupportReport):
        values = [v.as_dict() for v in values]
        first = values[0]
    if isinstance(first, dict):
        keys = [k for k, v in first.items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
        return {k: aggregate([v[k] for v in values], z) for k in keys}
    arr = np.asarray(values, dtype=float)
    n = arr.size
    sd = float(np.std(arr, ddof=1)) if n > 1 else 0.0
    return Summary(float(arr.mean()), z * sd / math.sqrt(n) if n > 1 else 0.0, n)


def metric_row(method, T, sigma2, d, report: SupportReport):
    return {
        "method": method,
        "T": T,
        "sigma2": sigma2,
        "d": d,
        "rmse": report.rmse,
        "specificity": report.specificity,
        "recall": report.recall,
        "precision": report.precision,
        "f1": report.f1,
    }


def write_metric_csv(path, rows, columns=METRIC_COLUMNS, meta=None):
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write(comment_line(meta))
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_json(path, payload):
    def default(o):
        if isinstance(o, (Summary, SupportReport)):
            return asdict(o)
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=default)
        fh.write("\n")
