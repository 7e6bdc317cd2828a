"""Sample estimators shared by the simulator and the verifier."""
from __future__ import annotations

import math

import numpy as np


def risk_sensitive_estimate(samples, theta: float, return_se: bool = False):
    """Certainty equivalent -(1/theta) log mean(exp(-theta J)) with a jackknife standard error.

    The exponent is shifted by its largest value before exponentiating. For theta > 0
    the result is additionally bounded by the sample mean, which removes round-off
    violations of Jensen's inequality on near-degenerate samples.
    """
    if theta == 0:
        raise ValueError("theta = 0: use the plain sample mean")
    J = np.asarray(samples, dtype=float).ravel()
    if J.size == 0:
        raise ValueError("no samples")
    a = -theta * J
    c = float(a.max())
    e = np.exp(a - c)
    n = J.size
    total = float(e.sum())
    ce = -(c + math.log(total / n)) / theta
    mean = float(J.mean())
    if theta > 0:
        ce = min(ce, mean)
    if not return_se:
        return ce
    if n < 2:
        return ce, float("nan")
    loo = (total - e) / (n - 1)
    ce_i = -(c + np.log(loo)) / theta
    se = math.sqrt((n - 1) / n * float(np.sum((ce_i - ce_i.mean()) ** 2)))
    return ce, se


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")


def var_se(x) -> tuple[float, float]:
    """Unbiased sample variance and its large-sample standard error sqrt((m4 - s^4) / n)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return float("nan"), float("nan")
    d = x - x.mean()
    s2 = float(d @ d / (n - 1))
    m4 = float(np.mean(d ** 4))
    return s2, math.sqrt(max(m4 - s2 * s2, 0.0) / n)


def var_diff_se(a, b) -> float:
    """Standard error of Var(a) - Var(b) for paired samples (common random numbers)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = (a - a.mean()) ** 2 - (b - b.mean()) ** 2
    return float(d.std(ddof=1) / math.sqrt(d.size))
