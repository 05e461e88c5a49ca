"""Post-processing: empirical tail of |T|, log-log slope fits and plateau detection."""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import UsageError

__all__ = ["CdfTail", "empirical_tail_cdf", "fit_log_slope", "plateau_detect", "log_separation_slope",
           "MIN_EXCEEDANCES"]

MIN_EXCEEDANCES = 50
MIN_SAMPLES = 1000
MIN_FIT_POINTS = 20


@dataclass(frozen=True)
class CdfTail:
    """Empirical survival function ``S(x) = #{|T_i| >= x} / N``.

    Fit fields are NaN until :func:`fit_log_slope` fills them in.
    """

    sorted_magnitudes: np.ndarray
    fit_range: tuple
    slope: float = math.nan
    intercept: float = math.nan
    r_squared: float = math.nan
    slope_se: float = math.nan
    n_fit_points: int = 0

    @property
    def n(self):
        return self.sorted_magnitudes.size

    def survival(self, x):
        """Fraction of samples with magnitude ``>= x``."""
        s = self.sorted_magnitudes
        return (s.size - np.searchsorted(s, x, side="left")) / s.size

    def points(self):
        """Distinct sample values and the survival function there."""
        u = np.unique(self.sorted_magnitudes)
        return u, self.survival(u)


def empirical_tail_cdf(samples, min_samples=MIN_SAMPLES):
    """Survival function of ``|samples|`` with the default fit range.

    The default range runs from the 0.9 quantile to the largest value that
    still has at least ``MIN_EXCEEDANCES`` samples at or above it.
    """
    s = np.sort(np.abs(np.asarray(samples, dtype=float).ravel()))
    if s.size < min_samples:
        raise UsageError(f"tail analysis needs at least {min_samples} samples, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise UsageError("samples must be finite")
    x_lo = float(np.quantile(s, 0.9))
    x_hi = float(s[max(s.size - MIN_EXCEEDANCES, 0)])
    return CdfTail(s, (x_lo, x_hi))


def fit_log_slope(tail, fit_range=None):
    """Least-squares slope of ``log S`` against ``log x`` on the fit range.

    Returns a copy of ``tail`` with slope, intercept, r_squared and the slope
    standard error filled in.
    """
    lo, hi = fit_range if fit_range is not None else tail.fit_range
    x, S = tail.points()
    keep = (x >= lo) & (x <= hi) & (x > 0) & (S > 0)
    x, S = x[keep], S[keep]
    if x.size < MIN_FIT_POINTS:
        raise UsageError(f"fit range [{lo}, {hi}] holds {x.size} abscissae, need {MIN_FIT_POINTS}")
    u, v = np.log(x), np.log(S)
    um, vm = u.mean(), v.mean()
    suu = np.sum((u - um) ** 2)
    slope = float(np.sum((u - um) * (v - vm)) / suu)
    intercept = float(vm - slope * um)
    resid = v - (intercept + slope * u)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((v - vm) ** 2))
    se = math.sqrt(ss_res / (x.size - 2) / suu)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return replace(tail, fit_range=(lo, hi), slope=slope, intercept=intercept,
                   r_squared=r2, slope_se=se, n_fit_points=int(x.size))


def plateau_detect(series, rel_tol) -> Optional[tuple]:
    """Plateau of a ``(t, value, se)`` series, or ``None``.

    The last third of the series is a plateau when its range is at most
    ``rel_tol * |mean| + 2 * max se``.  The onset is the earliest time from
    which every value stays within that band around the mean.
    """
    a = np.asarray(series, dtype=float)
    if a.ndim != 2 or a.shape[1] not in (2, 3):
        raise UsageError("series rows must be (t, value) or (t, value, se)")
    if a.shape[0] < 10:
        raise UsageError("plateau detection needs at least 10 points")
    t, v = a[:, 0], a[:, 1]
    se = a[:, 2] if a.shape[1] == 3 else np.zeros_like(v)
    w = slice(a.shape[0] - a.shape[0] // 3, None)
    mean = float(np.mean(v[w]))
    band = rel_tol * abs(mean) + 2.0 * float(np.max(se[w]))
    if np.ptp(v[w]) > band:
        return None
    outside = np.flatnonzero(np.abs(v - mean) > band)
    onset = 0 if outside.size == 0 else outside[-1] + 1
    return mean, float(t[onset])


def log_separation_slope(times, separation, t_from):
    """Least-squares slope of the pair-averaged ``log |separation|`` over ``t >= t_from``.

    ``separation`` has shape ``(n_times, n_pairs)``.  Pairs that coalesce to
    exactly zero (contraction below floating point resolution) have no
    logarithm and are left out; their count is returned.  Returns
    ``(slope, mean_log, n_excluded)``.
    """
    t = np.asarray(times, dtype=float)
    sep = np.asarray(separation, dtype=float)
    if sep.ndim != 2 or sep.shape[0] != t.size:
        raise UsageError("separation must be (n_times, n_pairs) matching times")
    resolved = np.all(sep > 0, axis=0) & np.all(np.isfinite(sep), axis=0)
    if not resolved.any():
        raise UsageError("every pair coalesced; no log-separation to fit")
    mean_log = np.log(sep[:, resolved]).mean(axis=1)
    w = t >= t_from - 1e-9 * max(1.0, abs(t_from))
    if w.sum() < 2:
        raise UsageError("the fit window holds fewer than two times")
    slope = float(np.polyfit(t[w], mean_log[w], 1)[0])
    return slope, mean_log, int((~resolved).sum())
