"""Potentials, perturbations and the built-in model catalog.

All model callables are vectorised over a leading batch axis: positions are
arrays of shape ``(n, d)``, gradients ``(n, d)``, Hessians ``(n, d, d)``.
Potentials are unnormalised; routines needing the equilibrium measure divide
by a computed partition integral.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import NumericError, UsageError

__all__ = [
    "PotentialModel",
    "PerturbationModel",
    "ModelCatalogEntry",
    "CATALOG",
    "build_model",
    "eval_bundle",
    "min_spec",
    "min_spec_batch",
    "smallest_boundary_halfwidth",
]

# Energy gap between the truncation boundary and the minimum (e^-40 ~ 4e-18).
BOUNDARY_ENERGY_GAP = 40.0
# Pair distances below this are clamped in the colloid interaction.
COLLOID_MIN_DISTANCE = 1e-8


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise UsageError(f"expected points of dimension {dim}, got array of shape {x.shape}")
    return x


@dataclass(frozen=True)
class PotentialModel:
    """Potential energy V with its first and second derivatives.

    ``hessian_vector`` and ``min_hessian_eig`` are optional fast paths; when
    absent they fall back to the dense Hessian.
    """

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    domain_halfwidth: float
    name: str = ""
    params: dict = field(default_factory=dict)
    default_start: Optional[np.ndarray] = None
    hessian_vector: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    min_hessian_eig: Optional[Callable[[np.ndarray], np.ndarray]] = None
    gradient_and_hvp: Optional[Callable[[np.ndarray, np.ndarray], tuple]] = None

    def hvp(self, x, v):
        """Hessian-vector products ``Hess V(x_k) v_k`` for a batch."""
        if self.hessian_vector is not None:
            return self.hessian_vector(x, v)
        return np.einsum("nij,nj->ni", self.hessian(x), v)

    def grad_hvp(self, x, v):
        """``(grad V(x), Hess V(x) v)`` for a batch, sharing work when a fast path exists."""
        if self.gradient_and_hvp is not None:
            return self.gradient_and_hvp(x, v)
        return self.gradient(x), self.hvp(x, v)

    def min_spec(self, x):
        """Smallest Hessian eigenvalue at each point of a batch."""
        if self.min_hessian_eig is not None:
            return self.min_hessian_eig(x)
        return min_spec_batch(self.hessian(x))

    def start(self):
        if self.default_start is None:
            return np.zeros(self.dim)
        return np.array(self.default_start, dtype=float)


@dataclass(frozen=True)
class PerturbationModel:
    """Drift family F_lambda with its derivative at lambda = 0.

    ``bound_C`` bounds ``|F_lambda - F_0| / lambda``; it is ``inf`` for
    perturbations that grow with the position (shear flow).
    """

    force: Callable[[np.ndarray, float], np.ndarray]
    dforce: Callable[[np.ndarray], np.ndarray]
    div_dforce: Optional[Callable[[np.ndarray], np.ndarray]]
    bound_C: float
    name: str = ""


@dataclass(frozen=True)
class ModelCatalogEntry:
    name: str
    parameters: dict
    builder: Callable[..., tuple]
    description: str = ""

    def build(self, **params):
        unknown = set(params) - set(self.parameters)
        if unknown:
            raise UsageError(
                f"unknown parameter(s) {sorted(unknown)} for model {self.name!r}; "
                f"accepted: {sorted(self.parameters)}"
            )
        resolved = dict(self.parameters)
        resolved.update(params)
        return self.builder(**resolved)


def smallest_boundary_halfwidth(value, dim, gap=BOUNDARY_ENERGY_GAP, start=0.5, max_doublings=30):
    """Smallest L (by doubling) with ``V(+-L e_k) - min V >= gap`` on every axis."""
    L = start
    for _ in range(max_doublings):
        pts = []
        s = np.linspace(-L, L, 401)
        for k in range(dim):
            p = np.zeros((s.size, dim))
            p[:, k] = s
            pts.append(p)
        pts = np.concatenate(pts)
        with np.errstate(over="ignore", invalid="ignore"):
            v = value(pts)
        vref = np.nanmin(v)
        ends = np.concatenate([v[k * 401: (k + 1) * 401][[0, -1]] for k in range(dim)])
        if np.all(ends - vref >= gap):
            return float(L)
        L *= 2.0
    raise NumericError("could not find a truncation radius for the potential")


# --------------------------------------------------------------------------
# Smallest eigenvalue of symmetric matrices


def _check_symmetric(h):
    h = np.asarray(h, dtype=float)
    if h.ndim == 0:
        h = h.reshape(1, 1)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise UsageError(f"expected a square matrix, got shape {h.shape}")
    norm = np.abs(h).max() if h.size else 0.0
    if np.abs(h - h.T).max() > 1e-9 * max(norm, np.finfo(float).tiny):
        raise UsageError("matrix is not symmetric within 1e-9 relative tolerance")
    return 0.5 * (h + h.T)


def _min_eig_2x2(a, b, c):
    return 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)


def _min_eig_3x3(h):
    # trigonometric solution of the characteristic cubic
    p1 = h[0, 1] ** 2 + h[0, 2] ** 2 + h[1, 2] ** 2
    q = np.trace(h) / 3.0
    p2 = (h[0, 0] - q) ** 2 + (h[1, 1] - q) ** 2 + (h[2, 2] - q) ** 2 + 2.0 * p1
    if p2 == 0.0:
        return float(q)
    p = np.sqrt(p2 / 6.0)
    B = (h - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    return float(q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0))


def _min_eig_inverse_iteration(h, tol=1e-10, max_iter=20000):
    d = h.shape[0]
    offdiag = np.abs(h).sum(axis=1) - np.abs(np.diag(h))
    sigma = float(np.min(np.diag(h) - offdiag)) - 1.0
    lu = scipy.linalg.lu_factor(h - sigma * np.eye(d))
    x = np.ones(d) / np.sqrt(d) + 1e-3 * np.arange(d) / d
    x /= np.linalg.norm(x)
    mu = x @ h @ x
    scale = max(np.abs(h).max(), 1.0)
    for _ in range(max_iter):
        y = scipy.linalg.lu_solve(lu, x)
        x = y / np.linalg.norm(y)
        hx = h @ x
        mu_new = x @ hx
        resid = np.linalg.norm(hx - mu_new * x)
        if abs(mu_new - mu) <= 1e-14 * scale and resid <= tol * scale:
            return float(mu_new)
        mu = mu_new
    raise NumericError("inverse iteration for min Spec did not converge")


def min_spec(h):
    """Smallest eigenvalue of a symmetric matrix.

    Closed forms are used for ``d <= 3``; larger matrices use inverse
    iteration shifted below the Gershgorin lower bound.
    """
    h = _check_symmetric(h)
    d = h.shape[0]
    if d == 1:
        return float(h[0, 0])
    if d == 2:
        return float(_min_eig_2x2(h[0, 0], h[0, 1], h[1, 1]))
    if d == 3:
        return _min_eig_3x3(h)
    return _min_eig_inverse_iteration(h)


def min_spec_batch(H):
    """Vectorised smallest eigenvalue for a stack of symmetric matrices."""
    H = np.asarray(H, dtype=float)
    d = H.shape[-1]
    if d == 1:
        return H[..., 0, 0].copy()
    if d == 2:
        return _min_eig_2x2(H[..., 0, 0], 0.5 * (H[..., 0, 1] + H[..., 1, 0]), H[..., 1, 1])
    return np.linalg.eigvalsh(H)[..., 0]


def eval_bundle(model, x):
    """Energy, gradient, Hessian and min Spec of the Hessian at one point."""
    pt = _as_batch(x, model.dim)
    if pt.shape[0] != 1:
        raise UsageError("eval_bundle takes a single point")
    if not np.all(np.isfinite(pt)):
        raise UsageError(f"non-finite point {pt[0]!r}")
    with np.errstate(all="ignore"):
        energy = float(model.value(pt)[0])
        grad = np.asarray(model.gradient(pt)[0], dtype=float)
        hess = np.asarray(model.hessian(pt)[0], dtype=float)
    if not (np.isfinite(energy) and np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise NumericError(f"non-finite potential output at x={pt[0]!r}")
    return energy, grad, hess, min_spec(hess)


# --------------------------------------------------------------------------
# Catalog builders


def _constant_direction(dim, scale=1.0):
    e = np.zeros(dim)
    e[0] = scale

    def dforce(x):
        return np.broadcast_to(e, np.shape(x)).copy()

    return e, dforce


def _zero_div(x):
    return np.zeros(np.shape(x)[0])


def _ou(a=1.0, d=1):
    a = float(a)
    d = int(d)
    if a <= 0 or d < 1:
        raise UsageError("ou requires a > 0 and d >= 1")

    def value(x):
        return 0.5 * a * np.sum(x * x, axis=1)

    def gradient(x):
        return a * x

    def hessian(x):
        return np.broadcast_to(a * np.eye(d), (x.shape[0], d, d)).copy()

    pot = PotentialModel(
        dim=d, value=value, gradient=gradient, hessian=hessian,
        domain_halfwidth=smallest_boundary_halfwidth(value, d),
        name="ou", params={"a": a, "d": d}, default_start=np.zeros(d),
        hessian_vector=lambda x, v: a * v,
        min_hessian_eig=lambda x: np.full(x.shape[0], a),
    )
    e, dforce = _constant_direction(d)
    pert = PerturbationModel(
        force=lambda x, lam: -a * x + lam * e,
        dforce=dforce, div_dforce=_zero_div, bound_C=1.0, name="shift",
    )
    return pot, pert


def _double_well(c=2.0):
    c = float(c)

    def value(x):
        y = x[:, 0]
        return y ** 4 - 0.5 * c * y ** 2

    def gradient(x):
        return 4.0 * x ** 3 - c * x

    def hessian(x):
        return (12.0 * x * x - c)[:, :, None]

    start = np.array([np.sqrt(c) / 2.0 if c > 0 else 0.0])
    pot = PotentialModel(
        dim=1, value=value, gradient=gradient, hessian=hessian,
        domain_halfwidth=smallest_boundary_halfwidth(value, 1),
        name="double_well", params={"c": c}, default_start=start,
        hessian_vector=lambda x, v: (12.0 * x * x - c) * v,
        min_hessian_eig=lambda x: 12.0 * x[:, 0] ** 2 - c,
    )
    # V_lambda = V + lambda x, hence F_lambda = -V' - lambda
    pert = PerturbationModel(
        force=lambda x, lam: -(4.0 * x ** 3 - c * x) - lam,
        dforce=lambda x: -np.ones_like(x),
        div_dforce=_zero_div, bound_C=1.0, name="tilt",
    )
    return pot, pert


def _quartic_tensor(d=2):
    d = int(d)
    if d < 1:
        raise UsageError("quartic_tensor requires d >= 1")

    def value(x):
        return np.sum(x ** 4, axis=1)

    def hessian(x):
        H = np.zeros((x.shape[0], d, d))
        idx = np.arange(d)
        H[:, idx, idx] = 12.0 * x * x
        return H

    pot = PotentialModel(
        dim=d, value=value, gradient=lambda x: 4.0 * x ** 3, hessian=hessian,
        domain_halfwidth=smallest_boundary_halfwidth(value, d),
        name="quartic_tensor", params={"d": d}, default_start=np.zeros(d),
        hessian_vector=lambda x, v: 12.0 * x * x * v,
        min_hessian_eig=lambda x: np.min(12.0 * x * x, axis=1),
    )
    e, dforce = _constant_direction(d)
    pert = PerturbationModel(
        force=lambda x, lam: -4.0 * x ** 3 + lam * e,
        dforce=dforce, div_dforce=_zero_div, bound_C=1.0, name="shift",
    )
    return pot, pert


def _mexican_hat(beta=1.0, gamma=1.0, d=2):
    beta, gamma, d = float(beta), float(gamma), int(d)
    if beta <= 0 or gamma <= 0 or d < 1:
        raise UsageError("mexican_hat requires beta > 0, gamma > 0, d >= 1")

    def value(x):
        r2 = np.sum(x * x, axis=1)
        return beta * (r2 * r2 - gamma * r2)

    def gradient(x):
        r2 = np.sum(x * x, axis=1, keepdims=True)
        return beta * (4.0 * r2 - 2.0 * gamma) * x

    def hessian(x):
        r2 = np.sum(x * x, axis=1)
        H = 8.0 * beta * x[:, :, None] * x[:, None, :]
        idx = np.arange(d)
        H[:, idx, idx] += (beta * (4.0 * r2 - 2.0 * gamma))[:, None]
        return H

    def hvp(x, v):
        r2 = np.sum(x * x, axis=1, keepdims=True)
        xv = np.sum(x * v, axis=1, keepdims=True)
        return beta * (4.0 * r2 - 2.0 * gamma) * v + 8.0 * beta * xv * x

    def min_eig(x):
        r2 = np.sum(x * x, axis=1)
        if d == 1:
            return beta * (12.0 * r2 - 2.0 * gamma)
        return beta * (4.0 * r2 - 2.0 * gamma)

    start = np.zeros(d)
    start[0] = np.sqrt(gamma / 2.0)
    pot = PotentialModel(
        dim=d, value=value, gradient=gradient, hessian=hessian,
        domain_halfwidth=smallest_boundary_halfwidth(value, d),
        name="mexican_hat", params={"beta": beta, "gamma": gamma, "d": d},
        default_start=start, hessian_vector=hvp, min_hessian_eig=min_eig,
    )
    e, dforce = _constant_direction(d)
    pert = PerturbationModel(
        force=lambda x, lam: -gradient(x) + lam * e,
        dforce=dforce, div_dforce=_zero_div, bound_C=1.0, name="shift",
    )
    return pot, pert


def sunflower_layout(n, spacing=1.0):
    """Roughly uniform non-overlapping 2-D positions, flattened to length 2n."""
    k = np.arange(n) + 0.5
    r = 0.6 * spacing * np.sqrt(k)
    theta = k * np.pi * (3.0 - np.sqrt(5.0))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)]).ravel()


def _colloid(n=10, kappa=10.0, gamma=25.0, temperature=0.5, shear="flow"):
    n, kappa, gamma, theta = int(n), float(kappa), float(gamma), float(temperature)
    if n < 2 or kappa <= 0 or gamma <= 0 or theta <= 0:
        raise UsageError("colloid requires n >= 2, kappa > 0, gamma > 0, temperature > 0")
    if shear not in ("flow", "uniform"):
        raise UsageError("colloid shear must be 'flow' or 'uniform'")
    d = 2 * n
    inv_t = 1.0 / theta
    I, J = np.triu_indices(n, 1)
    # incidence matrix: row p has +1 at particle I[p] and -1 at J[p]
    D = np.zeros((I.size, n))
    D[np.arange(I.size), I] = 1.0
    D[np.arange(I.size), J] = -1.0

    def geometry(x):
        y = x.reshape(x.shape[0], n, 2)
        dx = y[:, I, 0] - y[:, J, 0]
        dy = y[:, I, 1] - y[:, J, 1]
        r = np.sqrt(dx * dx + dy * dy)
        rc = np.maximum(r, COLLOID_MIN_DISTANCE)
        safe = np.where(r > 0, r, 1.0)
        ux = np.where(r > 0, dx / safe, 0.0)
        uy = np.where(r > 0, dy / safe, 0.0)
        e = gamma * np.exp(-rc)
        inv = 1.0 / rc
        return y, rc, ux, uy, e, inv

    def value(x):
        y, rc, _, _, e, inv = geometry(x)
        return inv_t * (0.5 * kappa * np.sum(y * y, axis=(1, 2)) + np.sum(e * inv, axis=1))

    def _grad(y, ux, uy, du):
        g = kappa * y
        g[:, :, 0] += (du * ux) @ D
        g[:, :, 1] += (du * uy) @ D
        return inv_t * g.reshape(y.shape[0], d)

    def gradient(x):
        y, rc, ux, uy, e, inv = geometry(x)
        du = -e * (inv + inv * inv)
        return _grad(y, ux, uy, du)

    def _hvp(ux, uy, du, d2u, inv, v):
        t = v.reshape(v.shape[0], n, 2)
        rx = t[:, :, 0] @ D.T
        ry = t[:, :, 1] @ D.T
        # block d2u u u^T + (du / r)(I - u u^T) applied to t_i - t_j
        proj = ux * rx + uy * ry
        tang = du * inv
        radial = (d2u - tang) * proj
        ax = radial * ux + tang * rx
        ay = radial * uy + tang * ry
        out = kappa * t
        out[:, :, 0] += ax @ D
        out[:, :, 1] += ay @ D
        return inv_t * out.reshape(v.shape)

    def hvp(x, v):
        _, rc, ux, uy, e, inv = geometry(x)
        inv2 = inv * inv
        du = -e * (inv + inv2)
        d2u = e * (inv + 2.0 * inv2 + 2.0 * inv2 * inv)
        return _hvp(ux, uy, du, d2u, inv, v)

    def gradient_hvp(x, v):
        y, rc, ux, uy, e, inv = geometry(x)
        inv2 = inv * inv
        du = -e * (inv + inv2)
        d2u = e * (inv + 2.0 * inv2 + 2.0 * inv2 * inv)
        return _grad(y, ux, uy, du), _hvp(ux, uy, du, d2u, inv, v)

    def hessian(x):
        _, rc, ux, uy, e, inv = geometry(x)
        inv2 = inv * inv
        du = -e * (inv + inv2)
        d2u = e * (inv + 2.0 * inv2 + 2.0 * inv2 * inv)
        u = np.stack([ux, uy], axis=-1)
        outer = u[..., :, None] * u[..., None, :]
        B = d2u[..., None, None] * outer + (du * inv)[..., None, None] * (np.eye(2) - outer)
        m = x.shape[0]
        H = np.zeros((m, n, 2, n, 2))
        H[:, I, :, J, :] = -B.transpose(1, 0, 2, 3)
        H[:, J, :, I, :] = -B.transpose(1, 0, 2, 3)
        diag = np.broadcast_to(kappa * np.eye(2), (m, n, 2, 2)).copy()
        np.add.at(diag, (slice(None), I), B)
        np.add.at(diag, (slice(None), J), B)
        idx = np.arange(n)
        H[:, idx, :, idx, :] = diag.transpose(1, 0, 2, 3)
        return inv_t * H.reshape(m, d, d)

    pot = PotentialModel(
        dim=d, value=value, gradient=gradient, hessian=hessian,
        domain_halfwidth=smallest_boundary_halfwidth(value, d),
        name="colloid",
        params={"n": n, "kappa": kappa, "gamma": gamma, "temperature": theta, "shear": shear},
        default_start=sunflower_layout(n), hessian_vector=hvp, gradient_and_hvp=gradient_hvp,
    )
    if shear == "flow":
        def dforce(x):
            y = x.reshape(x.shape[0], n, 2)
            s = np.zeros_like(y)
            s[:, :, 0] = y[:, :, 1]
            return inv_t * s.reshape(x.shape)
        bound = np.inf
    else:
        e = np.tile([1.0, 0.0], n)

        def dforce(x):
            return inv_t * np.broadcast_to(e, x.shape).copy()
        bound = inv_t * np.sqrt(n)

    pert = PerturbationModel(
        force=lambda x, lam: -gradient(x) + lam * dforce(x),
        dforce=dforce, div_dforce=_zero_div, bound_C=bound, name=f"shear_{shear}",
    )
    return pot, pert


CATALOG = {
    "ou": ModelCatalogEntry("ou", {"a": 1.0, "d": 1}, _ou,
                            "V = a|x|^2/2, F_lambda = -grad V + lambda e1"),
    "double_well": ModelCatalogEntry("double_well", {"c": 2.0}, _double_well,
                                     "V = x^4 - c x^2/2, tilt V + lambda x"),
    "quartic_tensor": ModelCatalogEntry("quartic_tensor", {"d": 2}, _quartic_tensor,
                                        "V = sum x_i^4, F_lambda = -grad V + lambda e1"),
    "mexican_hat": ModelCatalogEntry("mexican_hat", {"beta": 1.0, "gamma": 1.0, "d": 2},
                                     _mexican_hat,
                                     "V = beta(|x|^4 - gamma|x|^2), F_lambda = -grad V + lambda e1"),
    "colloid": ModelCatalogEntry(
        "colloid",
        {"n": 10, "kappa": 10.0, "gamma": 25.0, "temperature": 0.5, "shear": "flow"},
        _colloid,
        "N 2-D particles in a harmonic trap with Yukawa repulsion, under shear",
    ),
}


def build_model(entry, **params):
    """Build ``(PotentialModel, PerturbationModel)`` from a catalog entry or name."""
    if isinstance(entry, str):
        if entry not in CATALOG:
            raise UsageError(f"unknown model {entry!r}; catalog: {', '.join(sorted(CATALOG))}")
        entry = CATALOG[entry]
    return entry.build(**params)
