"""Euler-Maruyama integration of the trajectory / tangent-vector system.

The state of a replica is a position ``x`` driven by

    dX = -grad V(X) dt + sqrt(2) dW

and a tangent vector ``T`` solving ``dT/dt = dF(X) - Hess V(X) T`` with
``T(0) = 0``.  Every coefficient of a step is frozen at the pre-step position.

Noise is reproducible per replica: replica ``r`` belongs to block
``r // NOISE_BLOCK`` and the Gaussian increments of a block come from a Philox
stream keyed by ``(master_seed, purpose, block)``.  A replica therefore sees
the same increments whatever the number of replicas, the chunking, or the
number of workers.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import UsageError

__all__ = [
    "NOISE_BLOCK",
    "CHUNK_SIZE",
    "DIVERGENCE_THRESHOLD",
    "BlockNoise",
    "NoiseStream",
    "InitialCondition",
    "SimConfig",
    "ParticleState",
    "ResolventAccumulator",
    "ReplicaRecord",
    "step_euler",
    "simulate_replica",
    "propagate_resolvent",
    "resolvent",
    "tangent_via_resolvent",
    "simulate_perturbed_pair",
    "simulate_coupled_pair",
    "initial_positions",
    "record_indices",
    "run_chunks",
    "final_states",
    "tangent_run",
    "position_run",
]

NOISE_BLOCK = 256
CHUNK_SIZE = 4096
DIVERGENCE_THRESHOLD = 1e12
_CHECK_EVERY = 16

MAIN_STREAM = 0
BURN_IN_STREAM = 1
INITIAL_STREAM = 2


def _block_generator(master_seed, purpose, block):
    ss = np.random.SeedSequence(int(master_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(purpose, block))
    return np.random.Generator(np.random.Philox(ss))


class BlockNoise:
    """Standard Gaussian vectors for the replicas ``start .. start+count-1``.

    Each call to :meth:`next` returns an array of shape ``(count, dim)`` for
    one time step.  Draws are buffered over ``buffer_steps`` steps.
    """

    def __init__(self, master_seed, start, count, dim, purpose=MAIN_STREAM, buffer_steps=64):
        if count < 1:
            raise UsageError("BlockNoise needs at least one replica")
        self.dim = int(dim)
        self.count = int(count)
        self.step_counter = 0
        first = start // NOISE_BLOCK
        last = (start + count - 1) // NOISE_BLOCK
        self._offset = start - first * NOISE_BLOCK
        self._gens = [_block_generator(master_seed, purpose, b) for b in range(first, last + 1)]
        self._buffer_steps = int(buffer_steps)
        self._buf = None
        self._pos = 0

    def _refill(self):
        s = self._buffer_steps
        parts = [g.standard_normal((s, NOISE_BLOCK, self.dim)) for g in self._gens]
        full = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        self._buf = full[:, self._offset: self._offset + self.count]
        self._pos = 0

    def next(self):
        if self._buf is None or self._pos == self._buffer_steps:
            self._refill()
        out = self._buf[self._pos]
        self._pos += 1
        self.step_counter += 1
        return out


class NoiseStream:
    """Increment stream of a single replica (a one-lane view of its block)."""

    def __init__(self, master_seed, replica_index, dim, purpose=MAIN_STREAM):
        self.master_seed = int(master_seed)
        self.replica_index = int(replica_index)
        self.purpose = purpose
        self._noise = BlockNoise(master_seed, replica_index, 1, dim, purpose)

    @property
    def step_counter(self):
        return self._noise.step_counter

    def next(self):
        return self._noise.next()[0].copy()


@dataclass(frozen=True)
class InitialCondition:
    """Initial law of X_0.

    ``kind`` is one of ``default`` (the model's start point), ``point``
    (``mean``), ``gaussian`` (``mean`` + ``sd`` * N(0, I)) or ``equilibrium``
    (default start followed by an independent burn-in per replica).
    """

    kind: str = "default"
    mean: Optional[tuple] = None
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in ("default", "point", "gaussian", "equilibrium"):
            raise UsageError(f"unknown initial condition {self.kind!r}")
        if self.kind == "point" and self.mean is None:
            raise UsageError("point initial condition needs a position")


@dataclass(frozen=True)
class SimConfig:
    """Time stepping and ensemble settings.

    ``burn_in`` is simulated (position only) before time 0 whenever it is
    positive.  ``average_from`` is the start of the window of time-averaging
    estimators.
    """

    dt: float = 1e-3
    t_final: float = 10.0
    n_replicas: int = 1000
    master_seed: int = 0
    burn_in: float = 0.0
    record_stride: int = 1
    initial: InitialCondition = field(default_factory=InitialCondition)
    workers: int = 1
    average_from: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise UsageError("dt must be positive")
        if self.t_final < 0:
            raise UsageError("t_final must be non-negative")
        if 0 < self.t_final < self.dt:
            raise UsageError("dt must not exceed t_final")
        if self.n_replicas < 1:
            raise UsageError("n_replicas must be positive")
        if self.burn_in < 0:
            raise UsageError("burn_in must be non-negative")
        if self.record_stride < 1:
            raise UsageError("record_stride must be a positive integer")
        if self.workers < 1:
            raise UsageError("workers must be positive")
        if not 0 <= self.average_from <= self.t_final:
            raise UsageError("average_from must lie in [0, t_final]")
        if self.initial.kind == "equilibrium" and self.burn_in <= 0:
            raise UsageError("equilibrium initial condition needs burn_in > 0")

    @property
    def n_steps(self):
        return _steps(self.t_final, self.dt)

    @property
    def n_burn_steps(self):
        return _steps(self.burn_in, self.dt)

    def with_(self, **changes):
        return replace(self, **changes)


def _steps(horizon, dt):
    n = int(round(horizon / dt))
    if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise UsageError(f"horizon {horizon} is not a multiple of dt={dt}")
    return n


def record_indices(n_steps, stride):
    """Step indices recorded: multiples of ``stride`` plus the final step."""
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


@dataclass(frozen=True)
class ParticleState:
    x: np.ndarray
    tangent: np.ndarray
    time: float = 0.0
    diverged: bool = False

    @classmethod
    def initial(cls, x):
        x = np.array(x, dtype=float).reshape(-1)
        return cls(x=x, tangent=np.zeros_like(x), time=0.0)


@dataclass(frozen=True)
class ResolventAccumulator:
    matrix: np.ndarray
    s_anchor: float = 0.0

    @classmethod
    def identity(cls, dim, s_anchor=0.0):
        return cls(np.eye(dim), s_anchor)


@dataclass
class ReplicaRecord:
    times: np.ndarray
    series: dict
    replica_index: int
    diverged_at: Optional[float] = None


def _bad_rows(*arrays):
    if all(np.abs(a).max(initial=0.0) <= DIVERGENCE_THRESHOLD for a in arrays):
        return np.zeros(arrays[0].shape[0], dtype=bool)
    bad = np.zeros(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        bad |= ~np.all(np.isfinite(a), axis=1)
        bad |= np.any(np.abs(a) > DIVERGENCE_THRESHOLD, axis=1)
    return bad


def step_euler(state, model, pert, dt, dw):
    """One frozen-coefficient Euler step of ``(X, T)``; ``dw ~ N(0, dt I)``."""
    x = state.x[None, :]
    t = state.tangent[None, :]
    with np.errstate(all="ignore"):
        grad = model.gradient(x)
        drift_t = pert.dforce(x) - model.hvp(x, t)
        x_new = (x - grad * dt + np.sqrt(2.0) * np.asarray(dw, dtype=float).reshape(x.shape))[0]
        t_new = (t + drift_t * dt)[0]
    diverged = state.diverged or bool(_bad_rows(x_new[None], t_new[None])[0])
    return ParticleState(x=x_new, tangent=t_new, time=state.time + dt, diverged=diverged)


# --------------------------------------------------------------------------
# Batched integrators.  Arrays are (n, d); all loops advance a whole chunk.


def _burn(model, x, noise, n_steps, dt, alive):
    sq = np.sqrt(2.0 * dt)
    with np.errstate(all="ignore"):
        for k in range(1, n_steps + 1):
            x = x - model.gradient(x) * dt + sq * noise.next()
            if k % _CHECK_EVERY == 0 or k == n_steps:
                bad = _bad_rows(x)
                if bad.any():
                    alive &= ~bad
                    x[bad] = 0.0
    return x


def initial_positions(config, model, start, count):
    """Initial positions of replicas ``start .. start+count-1`` after burn-in.

    Returns ``(x, alive)`` where ``alive`` flags replicas that stayed finite.
    """
    ic = config.initial
    d = model.dim
    if ic.kind in ("default", "equilibrium"):
        base = model.start()
    else:
        base = np.asarray(ic.mean, dtype=float).reshape(-1)
        if base.size == 1 and d > 1:
            base = np.full(d, base[0])
    if base.size != d:
        raise UsageError(f"initial position has dimension {base.size}, model has {d}")
    x = np.broadcast_to(base, (count, d)).copy()
    if ic.kind == "gaussian":
        x += ic.sd * BlockNoise(config.master_seed, start, count, d, INITIAL_STREAM).next()
    alive = np.ones(count, dtype=bool)
    if config.burn_in > 0:
        noise = BlockNoise(config.master_seed, start, count, d, BURN_IN_STREAM)
        x = _burn(model, x, noise, config.n_burn_steps, config.dt, alive)
    return x, alive


def tangent_run(model, pert, x, noise, n_steps, dt, rec_idx, on_record, alive,
                merge=None, merge_period=0):
    """Advance ``(X, T)`` in place-free style; call ``on_record(r, t, x, T, alive)``.

    ``merge(x, T, alive)`` (returning the new T) is applied after every
    ``merge_period``-th step when given.
    """
    T = np.zeros_like(x)
    sq = np.sqrt(2.0 * dt)
    r = 0
    if rec_idx[0] == 0:
        on_record(0, 0.0, x, T, alive)
        r = 1
    with np.errstate(all="ignore"):
        for k in range(1, n_steps + 1):
            w = noise.next()
            grad, hv = model.grad_hvp(x, T)
            drift_t = pert.dforce(x) - hv
            x = x - grad * dt + sq * w
            T = T + drift_t * dt
            if merge is not None and k % merge_period == 0:
                T = merge(x, T, alive)
            at_record = r < len(rec_idx) and k == rec_idx[r]
            if k % _CHECK_EVERY == 0 or at_record:
                bad = _bad_rows(x, T) & alive
                if bad.any():
                    alive &= ~bad
                    x[bad] = 0.0
                    T[bad] = 0.0
            if at_record:
                on_record(r, k * dt, x, T, alive)
                r += 1
    return x, T


def position_run(model, x, noise, n_steps, dt, rec_idx, on_record, alive):
    """Advance X alone, calling ``on_record(r, t, x, alive)`` at recorded steps."""
    sq = np.sqrt(2.0 * dt)
    r = 0
    if rec_idx[0] == 0:
        on_record(0, 0.0, x, alive)
        r = 1
    with np.errstate(all="ignore"):
        for k in range(1, n_steps + 1):
            x = x - model.gradient(x) * dt + sq * noise.next()
            at_record = r < len(rec_idx) and k == rec_idx[r]
            if k % _CHECK_EVERY == 0 or at_record:
                bad = _bad_rows(x) & alive
                if bad.any():
                    alive &= ~bad
                    x[bad] = 0.0
            if at_record:
                on_record(r, k * dt, x, alive)
                r += 1
    return x


def chunk_ranges(n_replicas, chunk_size=CHUNK_SIZE):
    return [(s, min(chunk_size, n_replicas - s)) for s in range(0, n_replicas, chunk_size)]


def run_chunks(fn, n_replicas, workers=1, chunk_size=CHUNK_SIZE):
    """Evaluate ``fn(start, count)`` on fixed replica chunks, results in chunk order.

    The chunk partition does not depend on ``workers``, so any reduction over
    the returned list in order is worker-count independent.
    """
    ranges = chunk_ranges(n_replicas, chunk_size)
    if workers <= 1 or len(ranges) == 1:
        return [fn(s, c) for s, c in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda sc: fn(*sc), ranges))


# --------------------------------------------------------------------------
# Single replica driver and resolvent


def simulate_replica(config, model, pert, noise, observers):
    """Run one replica and record each observer at the recording steps.

    ``observers`` maps names to functions of a :class:`ParticleState`.
    """
    idx = noise.replica_index
    x0, alive = initial_positions(config, model, idx, 1)
    rec = record_indices(config.n_steps, config.record_stride)
    out = {name: [] for name in observers}
    times = []

    def on_record(r, t, x, T, alive_):
        state = ParticleState(x=x[0].copy(), tangent=T[0].copy(), time=t, diverged=not alive_[0])
        times.append(t)
        for name, obs in observers.items():
            out[name].append(obs(state))

    diverged_at = [None]

    class _Adapter:
        def next(self):
            return noise.next()[None, :]

    def watch(r, t, x, T, alive_):
        if not alive_[0] and diverged_at[0] is None:
            diverged_at[0] = t
        on_record(r, t, x, T, alive_)

    if not alive[0]:
        diverged_at[0] = 0.0
    tangent_run(model, pert, x0, _Adapter(), config.n_steps, config.dt, rec, watch, alive)
    series = {name: np.asarray(v) for name, v in out.items()}
    return ReplicaRecord(np.asarray(times), series, idx, diverged_at[0])


def propagate_resolvent(acc, hessian_at_x, dt):
    """Explicit Euler step of ``dR/dt = -Hess V(X_t) R``."""
    H = np.asarray(hessian_at_x, dtype=float)
    return ResolventAccumulator(acc.matrix - H @ acc.matrix * dt, acc.s_anchor)


def resolvent(path, model, dt, s_index, t_index):
    """Resolvent ``R(s, t)`` from a trajectory recorded at every step."""
    path = np.asarray(path, dtype=float)
    if t_index < s_index:
        raise UsageError("resolvent needs s <= t")
    H = model.hessian(path[s_index:t_index])
    acc = ResolventAccumulator.identity(model.dim, s_index * dt)
    for h in H:
        acc = propagate_resolvent(acc, h, dt)
    return acc.matrix


def tangent_via_resolvent(path, model, pert, dt, stride=1):
    """Tangent at the last point of ``path`` as ``sum_s R(s, t) dF(X_s) dt``."""
    if stride != 1:
        raise UsageError("tangent_via_resolvent needs a trajectory recorded at every step")
    path = np.asarray(path, dtype=float)
    n = path.shape[0] - 1
    d = model.dim
    if n <= 0:
        return np.zeros(d)
    H = model.hessian(path[:n])
    b = pert.dforce(path[:n])
    P = np.eye(d)
    acc = np.zeros(d)
    for k in range(n - 1, -1, -1):
        P = P @ (np.eye(d) - H[k] * dt)
        acc += P @ b[k] * dt
    return acc


# --------------------------------------------------------------------------
# Pairs driven by a common noise


def simulate_perturbed_pair(config, model, pert, eps, with_tangent=True):
    """Divided difference ``(X^eps - X^0) / eps`` under shared noise.

    Returns ``(times, diff, tangent, alive)`` with ``diff`` and ``tangent`` of
    shape ``(n_records, n_replicas, d)``; ``tangent`` is the tangent vector
    integrated along X^0 (``None`` when ``with_tangent`` is false).
    """
    if not 0 < eps <= 0.1:
        raise UsageError("eps must lie in (0, 0.1]")
    n, d = config.n_replicas, model.dim
    rec = record_indices(config.n_steps, config.record_stride)
    x0, alive = initial_positions(config, model, 0, n)
    xe = x0.copy()
    T = np.zeros_like(x0)
    diff = np.empty((len(rec), n, d))
    tang = np.empty((len(rec), n, d)) if with_tangent else None
    noise = BlockNoise(config.master_seed, 0, n, d)
    dt = config.dt
    sq = np.sqrt(2.0 * dt)
    diff[0] = 0.0
    if with_tangent:
        tang[0] = 0.0
    r = 1
    with np.errstate(all="ignore"):
        for k in range(1, config.n_steps + 1):
            w = sq * noise.next()
            if with_tangent:
                T = T + (pert.dforce(x0) - model.hvp(x0, T)) * dt
            xe = xe + pert.force(xe, eps) * dt + w
            x0 = x0 - model.gradient(x0) * dt + w
            if r < len(rec) and k == rec[r]:
                alive &= ~_bad_rows(x0, xe)
                diff[r] = (xe - x0) / eps
                if with_tangent:
                    tang[r] = T
                r += 1
    return rec * dt, diff, tang, alive


def simulate_coupled_pair(x, y, config, model):
    """Separation ``|Y^x_t - Y^y_t|`` of two copies driven by the same noise.

    ``x`` and ``y`` are ``(n_pairs, d)`` starting points; pair ``k`` uses the
    noise of replica ``k``.  Returns ``(times, separation)`` with shape
    ``(n_records, n_pairs)``.
    """
    x = np.array(x, dtype=float, ndmin=2)
    y = np.array(y, dtype=float, ndmin=2)
    if x.shape != y.shape or x.shape[1] != model.dim:
        raise UsageError("coupled pair starting points must both be (n_pairs, dim)")
    n = x.shape[0]
    rec = record_indices(config.n_steps, config.record_stride)
    sep = np.empty((len(rec), n))
    sep[0] = np.linalg.norm(x - y, axis=1)
    noise = BlockNoise(config.master_seed, 0, n, model.dim)
    dt = config.dt
    sq = np.sqrt(2.0 * dt)
    r = 1
    with np.errstate(all="ignore"):
        for k in range(1, config.n_steps + 1):
            w = sq * noise.next()
            x = x - model.gradient(x) * dt + w
            y = y - model.gradient(y) * dt + w
            if r < len(rec) and k == rec[r]:
                sep[r] = np.linalg.norm(x - y, axis=1)
                r += 1
    return rec * dt, sep


def final_states(config, model, pert):
    """Positions and tangents of every replica at ``t_final``.

    Returns ``(x, T, alive)``; rows of diverged replicas are zero.
    """
    n, d = config.n_replicas, model.dim
    rec = np.array([config.n_steps])

    def run(start, count):
        x, alive = initial_positions(config, model, start, count)
        noise = BlockNoise(config.master_seed, start, count, d)
        out = {}

        def on_record(r, t, xr, T, alive_):
            out["x"], out["T"] = xr.copy(), T.copy()

        tangent_run(model, pert, x, noise, config.n_steps, config.dt, rec, on_record, alive)
        return out["x"], out["T"], alive

    parts = run_chunks(run, n, config.workers)
    return tuple(np.concatenate([p[j] for p in parts]) for j in range(3))
