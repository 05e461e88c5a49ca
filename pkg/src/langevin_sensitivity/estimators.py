"""Estimators of d/dlambda at lambda = 0 of the steady-state average of f.

* ergodic: time average of grad f(X_s) . T_s along each replica;
* ensemble: replica average of grad f(X_t) . T_t at each recorded time;
* Green-Kubo: time integral of the equilibrium correlation of f and the
  conjugate observable g = grad V . dF - div dF;
* NEMD: finite difference of time averages under common noise.

Replicas are processed in fixed chunks.  Per-chunk statistics are merged in
chunk order, so results do not depend on the number of workers.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.signal import fftconvolve

from .dynamics import (
    CHUNK_SIZE,
    NOISE_BLOCK,
    BlockNoise,
    initial_positions,
    position_run,
    record_indices,
    run_chunks,
    tangent_run,
    _bad_rows,
)
from .errors import DivergenceError, UsageError

__all__ = [
    "Observable",
    "EstimatorResult",
    "Moments",
    "make_observable",
    "OBSERVABLES",
    "ergodic_sensitivity",
    "ensemble_sensitivity",
    "tangent_estimates",
    "green_kubo_sensitivity",
    "conjugate_observable",
    "nemd_finite_difference",
    "equilibrium_sampler",
]


@dataclass(frozen=True)
class Observable:
    """Scalar observable with its gradient, both vectorized over a batch."""

    f: Callable[[np.ndarray], np.ndarray]
    grad_f: Callable[[np.ndarray], np.ndarray]
    name: str = ""


def _first_coordinate():
    def grad(x):
        g = np.zeros_like(x)
        g[:, 0] = 1.0
        return g

    return Observable(lambda x: x[:, 0].copy(), grad, "x1")


def _smoothed_indicator(k=10.0):
    def f(x):
        return 0.5 + np.arctan(k * x[:, 0]) / np.pi

    def grad(x):
        g = np.zeros_like(x)
        g[:, 0] = (k / np.pi) / (1.0 + (k * x[:, 0]) ** 2)
        return g

    return Observable(f, grad, "smoothed_indicator")


def _constant(value=1.0):
    return Observable(lambda x: np.full(x.shape[0], float(value)), np.zeros_like, "constant")


def _pair_covariance(dim):
    if dim % 2:
        raise UsageError("the covariance observable needs planar particles (even dimension)")
    n = dim // 2

    def centered(x):
        y = x.reshape(x.shape[0], n, 2)
        return y - y.mean(axis=1, keepdims=True)

    def f(x):
        c = centered(x)
        return np.mean(c[:, :, 0] * c[:, :, 1], axis=1)

    def grad(x):
        c = centered(x)
        return (c[:, :, ::-1] / n).reshape(x.shape)

    return Observable(f, grad, "covariance")


OBSERVABLES = {
    "x1": lambda dim: _first_coordinate(),
    "smoothed_indicator": lambda dim: _smoothed_indicator(),
    "constant": lambda dim: _constant(),
    "covariance": _pair_covariance,
}


def make_observable(name, dim):
    """Built-in observable by name for a model of dimension ``dim``."""
    if name not in OBSERVABLES:
        raise UsageError(f"unknown observable {name!r}; available: {', '.join(sorted(OBSERVABLES))}")
    return OBSERVABLES[name](dim)


@dataclass
class EstimatorResult:
    """Point estimate with standard error.

    ``series`` is an ``(n_times, 3)`` array of ``(time, value, std_error)``
    rows when the estimator produces one.
    """

    value: float
    std_error: float
    n_effective: int
    estimator: str = ""
    n_replicas: int = 0
    n_diverged: int = 0
    series: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def ci95(self):
        return (self.value - 1.96 * self.std_error, self.value + 1.96 * self.std_error)

    def summary(self):
        lo, hi = self.ci95
        return {
            "estimator": self.estimator,
            "value": self.value,
            "std_error": self.std_error,
            "ci_lo": lo,
            "ci_hi": hi,
            "n_replicas": self.n_replicas,
            "n_diverged": self.n_diverged,
        }


class Moments:
    """Count, mean and central power sums up to order four, per component.

    Partial results combine with the pairwise update formulas, which are
    exact in arithmetic and deterministic for a fixed merge order.
    """

    def __init__(self, n, mean, m2, m3, m4):
        self.n, self.mean, self.m2, self.m3, self.m4 = n, mean, m2, m3, m4

    @classmethod
    def of(cls, values, axis=0):
        """Moments of ``values`` along ``axis``; NaN entries are ignored."""
        v = np.asarray(values, dtype=float)
        ok = ~np.isnan(v)
        n = ok.sum(axis=axis).astype(float)
        safe = np.where(ok, v, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(n > 0, safe.sum(axis=axis) / np.maximum(n, 1), 0.0)
        dev = np.where(ok, v - np.expand_dims(mean, axis), 0.0)
        d2 = dev * dev
        return cls(n, mean, d2.sum(axis=axis), (d2 * dev).sum(axis=axis), (d2 * d2).sum(axis=axis))

    def merge(self, other):
        na, nb = self.n, other.n
        n = na + nb
        with np.errstate(invalid="ignore", divide="ignore"):
            inv = np.where(n > 0, 1.0 / np.where(n > 0, n, 1.0), 0.0)
        d = other.mean - self.mean
        mean = self.mean + d * nb * inv
        m2 = self.m2 + other.m2 + d * d * na * nb * inv
        m3 = (self.m3 + other.m3 + d ** 3 * na * nb * (na - nb) * inv * inv
              + 3.0 * d * (na * other.m2 - nb * self.m2) * inv)
        m4 = (self.m4 + other.m4
              + d ** 4 * na * nb * (na * na - na * nb + nb * nb) * inv ** 3
              + 6.0 * d * d * (na * na * other.m2 + nb * nb * self.m2) * inv * inv
              + 4.0 * d * (na * other.m3 - nb * self.m3) * inv)
        return Moments(n, mean, m2, m3, m4)

    @staticmethod
    def combine(parts):
        total = parts[0]
        for p in parts[1:]:
            total = total.merge(p)
        return total

    @property
    def variance(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n > 1, self.m2 / np.maximum(self.n - 1, 1), 0.0)

    @property
    def std_error(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(self.variance / np.maximum(self.n, 1))

    @property
    def variance_std_error(self):
        """Large-sample standard error of the sample variance."""
        with np.errstate(invalid="ignore", divide="ignore"):
            n = np.maximum(self.n, 1)
            mu4 = self.m4 / n
            s2 = self.m2 / n
            return np.sqrt(np.maximum(mu4 - s2 * s2, 0.0) / n)


def _power_sums(v):
    """``(n, mean, M2, M3, M4)`` of a 1-D sample."""
    n = v.size
    if n == 0:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    m = v.mean()
    dev = v - m
    d2 = dev * dev
    return n, m, d2.sum(), (d2 * dev).sum(), (d2 * d2).sum()


def _scalar_stats(values):
    """Mean and standard error of per-replica scalars using exact summation."""
    v = [float(a) for a in values]
    n = len(v)
    mean = math.fsum(v) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((a - mean) ** 2 for a in v) / (n - 1)
    return mean, math.sqrt(var / n)


def _check_alive(n_alive, n_total, what):
    if n_alive == 0:
        raise DivergenceError(f"{what}: all {n_total} replicas diverged", n_total, n_total)
    if n_alive < n_total:
        warnings.warn(f"{what}: {n_total - n_alive} of {n_total} replicas diverged and were excluded",
                      RuntimeWarning, stacklevel=3)


def _window_start(times, t0):
    return int(np.searchsorted(times, t0 - 1e-9 * max(1.0, abs(t0))))


def _chunk_size_for(n_rec, per_record_arrays=1, budget=2.5e7):
    """Replica chunk size: a multiple of the noise block within a memory budget."""
    fit = int(budget // max(1, n_rec * per_record_arrays))
    return int(min(CHUNK_SIZE, max(NOISE_BLOCK, fit // NOISE_BLOCK * NOISE_BLOCK)))


# --------------------------------------------------------------------------
# Tangent based estimators


def tangent_estimates(config, model, pert, obs, *, merge=None, merge_period=0, group_size=1,
                      want_series=True, want_average=True):
    """Ergodic and ensemble estimates from one simulation of ``(X, T)``.

    ``merge(x, T, alive, groups)`` returning new tangents is applied every
    ``merge_period`` steps; ``groups`` labels consecutive blocks of
    ``group_size`` replicas that evolve together.  Ensemble statistics are computed
    on group means, so their standard errors account for within-group
    correlation.  Returns ``(ergodic, ensemble)``; either may be ``None``.
    """
    n, d, dt = config.n_replicas, model.dim, config.dt
    if group_size < 1 or n % group_size:
        raise UsageError("n_replicas must be a multiple of the group size")
    rec = record_indices(config.n_steps, config.record_stride)
    times = rec * dt
    w0 = _window_start(times, config.average_from)
    span = times[-1] - times[w0]
    chunk = CHUNK_SIZE
    if group_size > 1:
        chunk = group_size * max(1, CHUNK_SIZE // group_size)

    def run(start, count):
        x, alive = initial_positions(config, model, start, count)
        noise = BlockNoise(config.master_seed, start, count, d)
        ng = count // group_size
        stats = np.zeros((5, len(rec))) if want_series else None
        acc = np.zeros(count)
        prev = np.zeros(count)

        def on_record(r, t, xr, T, alive_):
            v = np.sum(obs.grad_f(xr) * T, axis=1)
            if want_series:
                if group_size == 1:
                    gv = v if alive_.all() else v[alive_]
                else:
                    a = alive_.reshape(ng, group_size)
                    s = np.where(a, v.reshape(ng, group_size), 0.0).sum(axis=1)
                    k = a.sum(axis=1)
                    gv = s[k > 0] / k[k > 0]
                stats[:, r] = _power_sums(gv)
            if want_average and r >= w0:
                if r > w0:
                    acc[:] += 0.5 * (prev + v) * (t - times[r - 1])
                prev[:] = v

        group_merge = None
        if merge is not None:
            groups = np.arange(count) // group_size
            group_merge = lambda xm, Tm, al: merge(xm, Tm, al, groups)

        tangent_run(model, pert, x, noise, config.n_steps, dt, rec, on_record, alive,
                    merge=group_merge, merge_period=merge_period)
        erg = None
        if want_average:
            erg = acc / span if span > 0 else prev.copy()
            erg = np.where(alive, erg, np.nan)
        mom = Moments(*stats) if want_series else None
        return erg, mom

    parts = run_chunks(run, n, config.workers, chunk)
    ergodic = ensemble = None
    if want_average:
        vals = np.concatenate([p[0] for p in parts])
        ok = ~np.isnan(vals)
        _check_alive(int(ok.sum()), n, "ergodic estimator")
        mean, se = _scalar_stats(vals[ok])
        ergodic = EstimatorResult(mean, se, int(ok.sum()), "ergodic", n, int(n - ok.sum()),
                                  diagnostics={"window": (float(times[w0]), float(times[-1]))})
    if want_series:
        mom = Moments.combine([p[1] for p in parts])
        n_groups = n // group_size
        n_final = int(mom.n[-1])
        _check_alive(n_final, n_groups, "ensemble estimator")
        se = mom.std_error
        series = np.column_stack([times, mom.mean, se])
        ensemble = EstimatorResult(
            float(mom.mean[-1]), float(se[-1]), n_final, "ensemble", n,
            (n_groups - n_final) * group_size, series,
            diagnostics={"variance": mom.variance, "variance_se": mom.variance_std_error,
                         "group_size": group_size},
        )
    return ergodic, ensemble


def ergodic_sensitivity(config, model, pert, obs):
    """Replica mean of the time average of ``grad f(X_s) . T_s``.

    The average runs over ``[config.average_from, t_final]`` (trapezoid rule
    on the recorded times).
    """
    return tangent_estimates(config, model, pert, obs, want_series=False)[0]


def ensemble_sensitivity(config, model, pert, obs):
    """Replica mean of ``grad f(X_t) . T_t`` at every recorded time."""
    return tangent_estimates(config, model, pert, obs, want_average=False)[1]


# --------------------------------------------------------------------------
# Green-Kubo


def conjugate_observable(model, pert):
    """``g = grad V . dF - div dF`` as a batch function."""
    if pert.div_dforce is None:
        raise UsageError("the perturbation does not provide the divergence of dF")

    def g(x):
        return np.sum(model.gradient(x) * pert.dforce(x), axis=1) - pert.div_dforce(x)

    return g


def default_truncation(model):
    """Five relaxation times ``5 / eta`` using the 1-D spectral gap."""
    if model.dim != 1:
        raise UsageError("t_trunc has no default in dimension > 1; pass it explicitly")
    from .spectral import poincare_constant
    eta, _ = poincare_constant(model)
    return 5.0 / eta


def green_kubo_sensitivity(config, model, pert, obs, t_trunc=None, centered=True):
    """Integral over ``[0, t_trunc]`` of the equilibrium correlation ``E[f(X_0) g(X_s)]``.

    Each replica starts after burn-in and contributes the average over all
    time origins ``u`` in ``[0, t_final - t_trunc]`` of
    ``int_0^t_trunc f(X_u) g(X_{u+s}) ds``.  With centering, the product of
    the empirical means of f and g is removed.  The diagnostic ``tail`` is
    the part of the integral over the last quarter of the lag window.
    """
    g = conjugate_observable(model, pert)
    if config.burn_in <= 0:
        raise UsageError("the Green-Kubo estimator needs an equilibrium start (burn_in > 0)")
    if t_trunc is None:
        t_trunc = default_truncation(model)
    if not t_trunc > 0:
        raise UsageError("t_trunc must be positive")
    if t_trunc > config.t_final + 1e-12:
        raise UsageError(f"t_trunc={t_trunc} exceeds t_final={config.t_final}")
    n, d, dt = config.n_replicas, model.dim, config.dt
    rec = record_indices(config.n_steps, config.record_stride)
    times = rec * dt
    h = config.record_stride * dt
    if config.n_steps % config.record_stride:
        raise UsageError("t_final must be a multiple of record_stride * dt for Green-Kubo")
    n_lag = int(round(t_trunc / h))
    t_trunc = n_lag * h
    n_orig = len(rec) - n_lag
    chunk = _chunk_size_for(len(rec), 2)

    def run(start, count):
        x, alive = initial_positions(config, model, start, count)
        fs = np.empty((len(rec), count))
        gs = np.empty((len(rec), count))

        def on_record(r, t, xr, alive_):
            fs[r] = obs.f(xr)
            gs[r] = g(xr)

        noise = BlockNoise(config.master_seed, start, count, d)
        position_run(model, x, noise, config.n_steps, dt, rec, on_record, alive)
        # corr[l, i] = mean_k f[k, i] g[k + l, i] over origins k
        corr = fftconvolve(gs, fs[n_orig - 1::-1], mode="valid", axes=0) / n_orig
        w = np.full(n_lag + 1, h)
        w[0] = w[-1] = 0.5 * h
        a = w @ corr
        cs = np.concatenate([np.zeros((1, count)), np.cumsum(gs, axis=0)])
        gmean = (cs[n_orig:] - cs[:n_lag + 1]) / n_orig
        gam = w @ gmean
        fbar = fs[:n_orig].mean(axis=0)
        q = int(np.ceil(0.75 * n_lag))
        wt = w.copy()
        wt[:q] = 0.0
        if q > 0:
            wt[q] = 0.5 * h
        tail_a = wt @ corr
        tail_g = wt @ gmean
        mask = np.where(alive, 1.0, np.nan)
        return a * mask, fbar * mask, gam * mask, tail_a * mask, tail_g * mask, corr.mean(axis=1)

    parts = run_chunks(run, n, config.workers, chunk)
    cols = [np.concatenate([p[j] for p in parts]) for j in range(5)]
    ok = ~np.isnan(cols[0])
    _check_alive(int(ok.sum()), n, "Green-Kubo estimator")
    a, fbar, gam, tail_a, tail_g = (c[ok] for c in cols)
    m = len(a)
    A = math.fsum(a) / m
    if centered:
        Fm = math.fsum(fbar) / m
        Gm = math.fsum(gam) / m
        value = A - Fm * Gm
        z = a - Fm * gam - Gm * fbar
        tail = math.fsum(tail_a) / m - Fm * math.fsum(tail_g) / m
    else:
        value, z = A, a
        tail = math.fsum(tail_a) / m
    _, se = _scalar_stats(z)
    lags = np.arange(n_lag + 1) * h
    return EstimatorResult(
        value, se, m, "green_kubo", n, int(n - m),
        diagnostics={"t_trunc": t_trunc, "tail": abs(tail), "n_origins": n_orig, "lags": lags},
    )


# --------------------------------------------------------------------------
# Finite differences


def nemd_finite_difference(config, model, pert, obs, eps):
    """``(<f>_eps - <f>_0) / eps`` from time averages along two trajectories with shared noise."""
    if not 0 < eps <= 0.1:
        raise UsageError("eps must lie in (0, 0.1]")
    n, d, dt = config.n_replicas, model.dim, config.dt
    rec = record_indices(config.n_steps, config.record_stride)
    times = rec * dt
    w0 = _window_start(times, config.average_from)
    span = times[-1] - times[w0]
    sq = np.sqrt(2.0 * dt)

    def run(start, count):
        x0, alive = initial_positions(config, model, start, count)
        xe = x0.copy()
        noise = BlockNoise(config.master_seed, start, count, d)
        acc = np.zeros(count)
        prev = None
        r = 0
        with np.errstate(all="ignore"):
            for k in range(config.n_steps + 1):
                if k > 0:
                    w = sq * noise.next()
                    xe = xe + pert.force(xe, eps) * dt + w
                    x0 = x0 - model.gradient(x0) * dt + w
                if r < len(rec) and k == rec[r]:
                    bad = _bad_rows(x0, xe) & alive
                    if bad.any():
                        alive &= ~bad
                        x0[bad] = 0.0
                        xe[bad] = 0.0
                    if r >= w0:
                        v = obs.f(xe) - obs.f(x0)
                        if r > w0:
                            acc += 0.5 * (prev + v) * (times[r] - times[r - 1])
                        prev = v
                    r += 1
        val = acc / span if span > 0 else prev
        return np.where(alive, val / eps, np.nan)

    vals = np.concatenate(run_chunks(run, n, config.workers))
    ok = ~np.isnan(vals)
    _check_alive(int(ok.sum()), n, "finite-difference estimator")
    mean, se = _scalar_stats(vals[ok])
    return EstimatorResult(mean, se, int(ok.sum()), "nemd", n, int(n - ok.sum()),
                           diagnostics={"eps": eps})


def equilibrium_sampler(config, model):
    """``n_replicas`` positions, each the end point of an independent burn-in run."""
    if config.burn_in <= 0:
        raise UsageError("equilibrium sampling needs burn_in > 0")
    parts = run_chunks(lambda s, c: initial_positions(config, model, s, c),
                       config.n_replicas, config.workers)
    x = np.concatenate([p[0] for p in parts])
    alive = np.concatenate([p[1] for p in parts])
    _check_alive(int(alive.sum()), config.n_replicas, "equilibrium sampler")
    return x[alive]
