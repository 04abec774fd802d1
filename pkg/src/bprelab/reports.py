"""Estimate records and the sum-based statistics shared by all drivers.

Chunk kernels return plain sums (value, square, cross terms, counts); the
reducers here turn them into means, standard errors and ratio estimates.
Everything is associative and commutative, and callers reduce in fixed chunk
order, so results never depend on the worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EstimateReport:
    """A point estimate with its Monte Carlo error and provenance."""

    value: float
    stderr: float
    replicates: int
    seed: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stderr < 0.0:
            raise ValueError("stderr must be nonnegative")


def mean_stderr(total, total_sq, n: int):
    """Mean and standard error from sum and sum of squares."""
    total = np.asarray(total, dtype=float)
    total_sq = np.asarray(total_sq, dtype=float)
    mean = total / n
    if n > 1:
        var = (total_sq - n * mean**2) / (n - 1)
        se = np.sqrt(np.maximum(var, 0.0) / n)
    else:
        se = np.zeros_like(mean)
    if mean.ndim == 0:
        return float(mean), float(se)
    return mean, se


def ratio_stderr(sum_num, sum_num_sq, sum_den, sum_den_sq, sum_cross, n: int):
    """Delta-method estimate and stderr of E[num]/E[den] from raw sums."""
    sn = np.asarray(sum_num, dtype=float)
    sn2 = np.asarray(sum_num_sq, dtype=float)
    sd = np.asarray(sum_den, dtype=float)
    sd2 = np.asarray(sum_den_sq, dtype=float)
    snd = np.asarray(sum_cross, dtype=float)
    mn = sn / n
    md = sd / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(md != 0.0, mn / md, np.nan)
        if n > 1:
            var_n = (sn2 - n * mn**2) / (n - 1)
            var_d = (sd2 - n * md**2) / (n - 1)
            cov = (snd - n * mn * md) / (n - 1)
            var_r = (var_n - 2.0 * r * cov + r**2 * var_d) / (md**2 * n)
            se = np.sqrt(np.maximum(var_r, 0.0))
        else:
            se = np.zeros_like(r)
    if np.ndim(r) == 0:
        return float(r), float(se)
    return r, se


def effective_sample_size(sum_w, sum_w_sq) -> float:
    """Kish effective sample size of a weighted average."""
    if sum_w_sq <= 0.0:
        return 0.0
    return float(sum_w) ** 2 / float(sum_w_sq)


def wls_line_fit(x, y, se_y):
    """Weighted least-squares line y = intercept + slope * x.

    Weights are the reciprocal error variances. Returns slope, intercept and
    their standard errors from the weighted normal equations.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    se_y = np.asarray(se_y, dtype=float)
    if np.any(se_y <= 0.0):
        raise ValueError("all point errors must be positive for the weighted fit")
    w = 1.0 / se_y**2
    sw = w.sum()
    xbar = (w * x).sum() / sw
    ybar = (w * y).sum() / sw
    sxx = (w * (x - xbar) ** 2).sum()
    slope = (w * (x - xbar) * (y - ybar)).sum() / sxx
    intercept = ybar - slope * xbar
    slope_se = math.sqrt(1.0 / sxx)
    intercept_se = math.sqrt(1.0 / sw + xbar**2 / sxx)
    return slope, intercept, slope_se, intercept_se
