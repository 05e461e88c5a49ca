"""One-dimensional spectral checks of the moment conditions on the tangent vector.

The generator of the reversible diffusion, conjugated by ``e^{-V/2}``, is
discretized on a regular mesh as a symmetric tridiagonal matrix ``M``.  Its
ground state is ``e^{-V/2}`` (eigenvalue 0) and the Poincare constant ``eta``
is minus its second eigenvalue.  With ``phi = min Spec Hess V`` the quantity

    rho = -(inf phi) * int phi^2 dpi / (int phi dpi)^2

is compared with ``eta``; ``beta`` is the exponential decay rate of the
Feynman-Kac semigroup ``E[exp(-int_0^t phi(X_s) ds)]``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .errors import ConvViolation, NumericError, UsageError

__all__ = [
    "quad_expectation",
    "SpectralGrid",
    "build_operator_matrix",
    "solve_tridiagonal",
    "poincare_constant",
    "inf_min_spec",
    "phi_moments",
    "rho_criterion",
    "decay_rate_beta",
    "spec_condition_holds",
    "torus_alpha0",
    "AssumptionReport",
    "check_assumptions",
    "spectral_sweep",
    "find_crossing",
    "feynman_kac_decay",
    "radial_expectation",
    "mean_min_spec",
]

_MAX_LEVELS = 24


def _require_1d(model):
    if model.dim != 1:
        raise UsageError(f"one-dimensional model required, got dimension {model.dim}")


def _scalar_fn(fn):
    return lambda x: fn(np.asarray(x, dtype=float)[:, None])


def _simpson_adaptive(fn, a, b, tol, initial_panels=64):
    """Vectorized adaptive Simpson rule; refines every panel above its share of ``tol``."""
    edges = np.linspace(a, b, initial_panels + 1)
    lo, hi = edges[:-1], edges[1:]
    total = []
    width = b - a
    for _ in range(_MAX_LEVELS + 1):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        pts = np.concatenate([lo, lm, mid, rm, hi])
        vals = fn(pts).reshape(5, -1)
        h = hi - lo
        whole = h / 6.0 * (vals[0] + 4 * vals[2] + vals[4])
        halves = h / 12.0 * (vals[0] + 4 * vals[1] + 2 * vals[2] + 4 * vals[3] + vals[4])
        err = np.abs(halves - whole)
        ok = err <= 15.0 * tol * h / width
        total.append(halves[ok] + (halves[ok] - whole[ok]) / 15.0)
        if ok.all():
            return math.fsum(np.concatenate(total))
        lo, hi, mid = lo[~ok], hi[~ok], mid[~ok]
        lo, hi = np.concatenate([lo, mid]), np.concatenate([mid, hi])
    raise NumericError(f"adaptive Simpson did not converge after {_MAX_LEVELS} levels")


def _boltzmann(model):
    V = _scalar_fn(model.value)
    L = model.domain_halfwidth
    grid = np.linspace(-L, L, 4001)
    vmin = float(np.min(V(grid)))
    return (lambda x: np.exp(-(V(x) - vmin))), L


def quad_expectation(phi, model, tol=1e-9):
    """``int phi dpi_0`` on ``[-L, L]`` with ``pi_0`` proportional to ``e^{-V}``.

    ``phi`` maps a 1-D array of abscissae to values.
    """
    _require_1d(model)
    w, L = _boltzmann(model)
    z = _simpson_adaptive(w, -L, L, tol * 1e-3)
    num = _simpson_adaptive(lambda x: phi(x) * w(x), -L, L, tol * z)
    return num / z


@dataclass(frozen=True)
class SpectralGrid:
    """Mesh ``i * dx`` for ``i = -n_half .. n_half``."""

    dx: float
    n_half: int

    def __post_init__(self):
        if not self.dx > 0 or self.n_half < 1:
            raise UsageError("grid needs dx > 0 and n_half >= 1")

    @property
    def points(self):
        return np.arange(-self.n_half, self.n_half + 1) * self.dx

    @property
    def domain(self):
        return (-self.n_half * self.dx, self.n_half * self.dx)

    @classmethod
    def for_model(cls, model, dx=0.01):
        return cls(dx, int(math.ceil(model.domain_halfwidth / dx)))

    def refined(self):
        return SpectralGrid(self.dx / 2.0, 2 * self.n_half)


def build_operator_matrix(model, grid):
    """Diagonal and off-diagonal of the symmetric tridiagonal generator matrix.

    Entries (with Dirichlet truncation at the grid ends)::

        M[i, i]   = -(e^{V_i - V_{i+1/2}} + e^{V_i - V_{i-1/2}}) / dx^2
        M[i, i+1] =  e^{(V_i + V_{i+1})/2 - V_{i+1/2}} / dx^2
    """
    _require_1d(model)
    V = _scalar_fn(model.value)
    x = grid.points
    h = grid.dx
    vi = V(x)
    vp = V(x + 0.5 * h)
    vm = V(x - 0.5 * h)
    with np.errstate(over="raise", invalid="raise"):
        try:
            diag = -(np.exp(vi - vp) + np.exp(vi - vm)) / h ** 2
            off = np.exp(0.5 * vi[:-1] + 0.5 * vi[1:] - vp[:-1]) / h ** 2
        except FloatingPointError as exc:
            raise NumericError("overflow in the operator entries; use a smaller domain") from exc
    if not (np.all(np.isfinite(diag)) and np.all(np.isfinite(off))):
        raise NumericError("non-finite operator entries; use a smaller domain")
    return diag, off


def solve_tridiagonal(diag, off, rhs):
    """Thomas algorithm for a symmetric tridiagonal system (no pivoting)."""
    n = len(diag)
    c = np.empty(n - 1)
    d = np.empty(n)
    b0 = diag[0]
    c[0] = off[0] / b0 if n > 1 else 0.0
    d[0] = rhs[0] / b0
    for i in range(1, n):
        den = diag[i] - off[i - 1] * c[i - 1]
        if i < n - 1:
            c[i] = off[i] / den
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / den
    for i in range(n - 2, -1, -1):
        d[i] -= c[i] * d[i + 1]
    return d


class _ShiftedSolver:
    """Repeated solves with ``-M + shift I`` from one LU factorization."""

    def __init__(self, diag, off, shift):
        dl = -off.copy()
        du = -off.copy()
        d = -diag + shift
        self._f = lapack.dgttrf(dl, d, du)
        if self._f[-1] != 0:
            raise NumericError("singular shifted operator matrix")

    def __call__(self, rhs):
        dl, d, du, du2, ipiv, _ = self._f
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs)
        if info != 0:
            raise NumericError("tridiagonal solve failed")
        return x


def _apply(diag, off, v):
    out = diag * v
    out[:-1] += off * v[1:]
    out[1:] += off * v[:-1]
    return out


def _inverse_iteration(solve, diag, off, deflate=None, tol=1e-15, max_iter=20000, seed_vec=None):
    n = len(diag)
    v = np.ones(n) if seed_vec is None else seed_vec.copy()
    # a fixed, mildly asymmetric start keeps the second mode represented
    v += np.linspace(-1.0, 1.0, n)
    if deflate is not None:
        v -= (deflate @ v) * deflate
    v /= np.linalg.norm(v)
    lam = np.inf
    scale = float(np.max(np.abs(diag)))
    for it in range(max_iter):
        w = solve(v)
        if deflate is not None:
            w -= (deflate @ w) * deflate
        w /= np.linalg.norm(w)
        new = float(-(w @ _apply(diag, off, w)))
        if abs(new - lam) <= tol * scale and it > 2:
            return new, w
        lam, v = new, w
    raise NumericError("inverse power iteration did not converge")


def _gap_on_grid(model, grid, shift=-1e-12):
    diag, off = build_operator_matrix(model, grid)
    # solve with (-M - shift I); shift < 0 keeps the matrix away from the zero mode
    solve = _ShiftedSolver(diag, off, -shift)
    lam0, u0 = _inverse_iteration(solve, diag, off)
    lam1, _ = _inverse_iteration(solve, diag, off, deflate=u0)
    return lam1, lam0


def poincare_constant(model, grid=None, tol=1e-3, max_refinements=4):
    """Spectral gap ``eta`` with refinement until successive grids agree within ``tol``.

    Returns ``(eta, diagnostics)``; diagnostics hold the estimate per grid.
    """
    _require_1d(model)
    grid = grid or SpectralGrid.for_model(model)
    history = []
    eta, ground = _gap_on_grid(model, grid)
    history.append((grid.dx, grid.n_half, eta))
    for _ in range(max_refinements):
        grid = grid.refined()
        new, ground = _gap_on_grid(model, grid)
        history.append((grid.dx, grid.n_half, new))
        if abs(new - eta) < tol * abs(new):
            return new, {"history": history, "ground": ground, "grid": grid}
        eta = new
    raise NumericError(
        f"Poincare estimate not converged: last two estimates {history[-2][2]!r}, {history[-1][2]!r}"
    )


def _golden_min(fn, a, b, tol=1e-12, max_iter=200):
    g = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a < tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = fn(d)
    x = 0.5 * (a + b)
    return x, fn(x)


def inf_min_spec(model, n_grid=4001):
    """Infimum of ``V''`` over ``[-L, L]``: grid search refined by golden section."""
    _require_1d(model)
    L = model.domain_halfwidth
    phi = lambda x: float(model.min_spec(np.array([[x]]))[0])
    grid = np.linspace(-L, L, n_grid)
    vals = model.min_spec(grid[:, None])
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, n_grid - 1)]
    _, v = _golden_min(phi, a, b)
    return min(v, float(vals[k]))


def phi_moments(model, beta_moment=1.0, tol=1e-10):
    """``(inf phi, E, Var)`` for ``phi = beta_moment * min Spec Hess V`` under ``pi_0``."""
    _require_1d(model)
    phi = lambda x: beta_moment * model.min_spec(np.asarray(x)[:, None])
    inf_phi = beta_moment * inf_min_spec(model)
    E = quad_expectation(phi, model, tol)
    var = quad_expectation(lambda x: (phi(x) - E) ** 2, model, tol)
    return inf_phi, E, var


def rho_criterion(model, beta_moment=1.0):
    """``rho = -(inf phi) int phi^2 / (int phi)^2``; 0 when ``phi`` is bounded below by a positive number.

    Raises :class:`ConvViolation` when ``int phi dpi_0 <= 0``.
    """
    inf_phi, E, var = phi_moments(model, beta_moment)
    if E <= 0:
        raise ConvViolation(E)
    if inf_phi > 0:
        return 0.0
    return -inf_phi * (var + E * E) / (E * E)


def decay_rate_beta(eta, inf_phi, E, Var):
    """Exponential decay rate of the Feynman-Kac semigroup."""
    if not E > 0:
        raise UsageError("the decay rate needs E > 0")
    a = (E * E + Var) / (2.0 * E)
    s = eta + inf_phi
    return (s + a) - math.sqrt((s - a) ** 2 + 2.0 * eta * Var / E)


def spec_condition_holds(eta, inf_phi, E, Var):
    """``-(inf phi) (Var + E^2) / E^2 < eta``."""
    return -inf_phi * (Var + E * E) / (E * E) < eta


def torus_alpha0(tol=1e-12):
    """Real root of ``a^3 + a/2 - 1/2`` by bisection on ``[0, 1]``."""
    p = lambda a: a ** 3 + 0.5 * a - 0.5
    lo, hi = 0.0, 1.0
    if not p(lo) < 0 < p(hi):
        raise NumericError("bisection bracket does not change sign")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if p(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class AssumptionReport:
    eta: float
    inf_phi: float
    E: float
    Var: float
    rho: float
    beta: float
    hyp_poincare_ok: bool
    hyp_spec_ok: bool
    conv_ok: bool
    minspec_bounded_ok: bool
    notes: list = field(default_factory=list)

    def flags(self):
        return {
            "hyp_poincare_ok": self.hyp_poincare_ok,
            "hyp_spec_ok": self.hyp_spec_ok,
            "conv_ok": self.conv_ok,
            "minspec_bounded_ok": self.minspec_bounded_ok,
        }


def check_assumptions(model, beta_moment=1.0, eta=None):
    """Spectral gap, moments of ``phi = beta_moment * min Spec`` and the resulting flags.

    ``rho`` in the report is computed from the scaled ``phi``, so
    ``hyp_spec_ok`` is ``rho < eta``.
    """
    _require_1d(model)
    if not beta_moment > 0:
        raise UsageError("beta_moment must be positive")
    if eta is None:
        eta, _ = poincare_constant(model)
    inf_phi, E, var = phi_moments(model, beta_moment)
    notes = ["integrability of the negative part holds trivially on the truncated domain"]
    conv_ok = E > 0
    bounded = bool(np.isfinite(inf_phi))
    if inf_phi > 0:
        notes.append("min Spec is positive everywhere: the condition is vacuous")
        rho, spec_ok = 0.0, True
    elif conv_ok:
        rho = -inf_phi * (var + E * E) / (E * E)
        spec_ok = rho < eta
    else:
        rho, spec_ok = float("nan"), False
        notes.append("mean of phi is not positive")
    beta = decay_rate_beta(eta, inf_phi, E, var) if conv_ok else float("nan")
    return AssumptionReport(eta, inf_phi, E, var, rho, beta, bool(eta > 0), bool(spec_ok),
                            bool(conv_ok), bounded, notes)


def spectral_sweep(build, values, beta_moment=1.0):
    """``(value, eta, rho, beta)`` rows for models ``build(value)``."""
    rows = []
    for v in values:
        rep = check_assumptions(build(v), beta_moment)
        rows.append((float(v), rep.eta, rep.rho, rep.beta))
    return rows


def find_crossing(values, lhs, rhs):
    """Abscissae where ``lhs - rhs`` changes sign, by linear interpolation."""
    values = np.asarray(values, dtype=float)
    diff = np.asarray(lhs, dtype=float) - np.asarray(rhs, dtype=float)
    out = []
    for i in range(len(values) - 1):
        a, b = diff[i], diff[i + 1]
        if a == 0:
            out.append(float(values[i]))
        elif a * b < 0:
            out.append(float(values[i] - a * (values[i + 1] - values[i]) / (b - a)))
    return out


def feynman_kac_decay(config, model, beta_moment=1.0):
    """Monte Carlo ``E[exp(-int_0^t phi(X_s) ds)]`` from an equilibrium start.

    Returns ``(times, mean, std_error)`` on the recording grid.
    """
    from .dynamics import BlockNoise, initial_positions, position_run, record_indices, run_chunks
    from .estimators import Moments, _power_sums

    rec = record_indices(config.n_steps, config.record_stride)
    times = rec * config.dt
    dt = config.dt

    def run(start, count):
        x, alive = initial_positions(config, model, start, count)
        noise = BlockNoise(config.master_seed, start, count, model.dim)
        integral = np.zeros(count)
        last = [0.0, None]
        stats = np.zeros((5, config.n_steps + 1))

        # left-point rule at every step, whatever the recording stride
        def on_record(r, t, xr, alive_):
            if r > 0:
                integral[:] += last[1] * dt
            last[1] = beta_moment * model.min_spec(xr)
            stats[:, r] = _power_sums(np.exp(-integral[alive_]))

        position_run(model, x, noise, config.n_steps, dt, np.arange(config.n_steps + 1),
                     on_record, alive)
        return Moments(*stats[:, rec])

    parts = run_chunks(run, config.n_replicas, config.workers)
    mom = Moments.combine(parts)
    return times, mom.mean, mom.std_error


_RADIAL_MODELS = ("ou", "mexican_hat")


def radial_expectation(phi_r, value_r, dim, radius, tol=1e-10):
    """``int phi dpi_0`` for a radial density: weights ``r^(d-1) e^{-V(r)}`` on ``[0, radius]``."""
    grid = np.linspace(0.0, radius, 4001)
    vmin = float(np.min(value_r(grid)))
    w = lambda r: r ** (dim - 1) * np.exp(-(value_r(r) - vmin))
    z = _simpson_adaptive(w, 0.0, radius, tol * 1e-3)
    num = _simpson_adaptive(lambda r: phi_r(r) * w(r), 0.0, radius, tol * z)
    return num / z


def mean_min_spec(model):
    """``int min Spec Hess V dpi_0`` by 1-D or radial quadrature.

    Multidimensional models are supported only when the potential is
    radially symmetric (``ou`` and ``mexican_hat``); the integrand is then
    evaluated along the first axis.
    """
    if model.dim == 1:
        return quad_expectation(lambda x: model.min_spec(np.asarray(x)[:, None]), model)
    if model.name not in _RADIAL_MODELS:
        raise UsageError(f"no quadrature for the {model.dim}-dimensional model {model.name!r}")

    def on_axis(fn):
        def g(r):
            pts = np.zeros((np.size(r), model.dim))
            pts[:, 0] = r
            return fn(pts)
        return g

    return radial_expectation(on_axis(model.min_spec), on_axis(model.value), model.dim,
                              model.domain_halfwidth)
