import numpy as np
import pytest

from langevin_sensitivity.dynamics import (
    BlockNoise,
    InitialCondition,
    NoiseStream,
    ParticleState,
    ResolventAccumulator,
    SimConfig,
    final_states,
    initial_positions,
    propagate_resolvent,
    record_indices,
    resolvent,
    simulate_coupled_pair,
    simulate_perturbed_pair,
    simulate_replica,
    step_euler,
    tangent_via_resolvent,
)
from langevin_sensitivity.errors import UsageError
from langevin_sensitivity.potentials import PerturbationModel, build_model

from oracles import OU_TANGENT_T1


def _flat_model():
    pot, _ = build_model("ou")
    flat = type(pot)(dim=1, value=lambda x: np.zeros(len(x)), gradient=np.zeros_like,
                     hessian=lambda x: np.zeros((len(x), 1, 1)), domain_halfwidth=1.0)
    null = PerturbationModel(lambda x, lam: np.zeros_like(x), np.zeros_like, None, 0.0)
    return flat, null


def _path(model, x0, n_steps, dt, seed):
    """Euler-Maruyama path recorded at every step."""
    noise = NoiseStream(seed, 0, model.dim)
    xs = [np.array(x0, dtype=float)]
    for _ in range(n_steps):
        x = xs[-1]
        xs.append(x - model.gradient(x[None])[0] * dt + np.sqrt(2 * dt) * noise.next())
    return np.array(xs)


def test_step_euler_driftless():
    flat, null = _flat_model()
    s = step_euler(ParticleState.initial([0.3]), flat, null, 0.1, np.array([0.5]))
    assert s.x[0] == pytest.approx(0.3 + np.sqrt(2) * 0.5) and s.tangent[0] == 0.0
    assert s.time == pytest.approx(0.1)


def test_step_euler_ou_single_step():
    pot, pert = build_model("ou")
    s = step_euler(ParticleState.initial([0.0]), pot, pert, 0.1, np.zeros(1))
    assert s.tangent[0] == pytest.approx(0.1)


def test_step_euler_noiseless_ou_tangent():
    pot, pert = build_model("ou")
    s = ParticleState.initial([0.0])
    for _ in range(10000):
        s = step_euler(s, pot, pert, 1e-4, np.zeros(1))
    assert abs(s.tangent[0] - OU_TANGENT_T1) < 1e-3


def test_step_euler_flags_divergence():
    pot, pert = build_model("double_well", c=1.0)
    s = step_euler(ParticleState.initial([1e150]), pot, pert, 1e-3, np.zeros(1))
    assert s.diverged


def test_noise_stream_replay_and_independence():
    a = NoiseStream(42, 7, 3)
    b = NoiseStream(42, 7, 3)
    c = NoiseStream(42, 8, 3)
    xa = np.array([a.next() for _ in range(300)])
    xb = np.array([b.next() for _ in range(300)])
    xc = np.array([c.next() for _ in range(300)])
    assert np.array_equal(xa, xb)
    assert not np.array_equal(xa, xc)
    assert abs(np.corrcoef(xa.ravel(), xc.ravel())[0, 1]) < 0.1
    assert a.step_counter == 300


def test_block_noise_is_independent_of_chunking():
    whole = BlockNoise(3, 0, 700, 2)
    part = BlockNoise(3, 250, 300, 2)
    for _ in range(130):  # crosses a buffer refill
        assert np.array_equal(whole.next()[250:550], part.next())


def test_noise_stream_matches_block_lane():
    lane = NoiseStream(5, 300, 2)
    block = BlockNoise(5, 256, 100, 2)
    for _ in range(70):
        assert np.array_equal(lane.next(), block.next()[44])


def test_noise_moments():
    noise = BlockNoise(1, 0, 4096, 1)
    z = np.concatenate([noise.next()[:, 0] for _ in range(10)])
    assert abs(z.mean()) < 4 / np.sqrt(z.size) and abs(z.var() - 1) < 0.1


def test_record_indices_include_endpoints():
    assert list(record_indices(10, 3)) == [0, 3, 6, 9, 10]
    assert list(record_indices(0, 5)) == [0]


def test_simconfig_validation():
    with pytest.raises(UsageError):
        SimConfig(dt=0.5, t_final=0.1)
    with pytest.raises(UsageError):
        SimConfig(record_stride=0)
    with pytest.raises(UsageError):
        SimConfig(initial=InitialCondition("equilibrium"))
    with pytest.raises(UsageError):
        InitialCondition("point")
    with pytest.raises(UsageError):
        SimConfig(dt=0.3, t_final=1.0).n_steps


def test_simulate_replica_ou_tangent_and_initial_record():
    pot, pert = build_model("ou")
    cfg = SimConfig(dt=1e-3, t_final=3.0, n_replicas=1, record_stride=10)
    rec = simulate_replica(cfg, pot, pert, NoiseStream(0, 0, 1), {"T": lambda s: s.tangent[0]})
    assert rec.times[0] == 0.0 and rec.times[-1] == pytest.approx(3.0)
    assert rec.series["T"][0] == 0.0
    assert np.max(np.abs(rec.series["T"] - (1 - np.exp(-rec.times)))) < 1e-3
    assert rec.diverged_at is None


def test_simulate_replica_zero_horizon():
    pot, pert = build_model("ou")
    cfg = SimConfig(dt=1e-3, t_final=0.0, n_replicas=1)
    rec = simulate_replica(cfg, pot, pert, NoiseStream(0, 0, 1), {"x": lambda s: s.x[0]})
    assert len(rec.times) == 1 and rec.series["x"][0] == 0.0


def test_simulate_replica_time_average_relaxes_to_zero():
    pot, pert = build_model("ou")
    cfg = SimConfig(dt=1e-2, t_final=2000.0, n_replicas=1,
                    initial=InitialCondition("point", (5.0,)))
    rec = simulate_replica(cfg, pot, pert, NoiseStream(1, 0, 1), {"x": lambda s: s.x[0]})
    x = rec.series["x"][1000:]
    # batch means over blocks much longer than the correlation time
    blocks = x[: len(x) // 100 * 100].reshape(100, -1).mean(axis=1)
    se = blocks.std(ddof=1) / np.sqrt(len(blocks))
    assert abs(x.mean()) < 3 * se


def test_simulate_replica_reports_divergence():
    pot, pert = build_model("double_well", c=1.0)
    cfg = SimConfig(dt=0.5, t_final=5.0, n_replicas=1, initial=InitialCondition("point", (3.0,)))
    rec = simulate_replica(cfg, pot, pert, NoiseStream(0, 0, 1), {"x": lambda s: s.x[0]})
    assert rec.diverged_at is not None and rec.replica_index == 0


def test_replica_matches_batched_run():
    # the single-replica driver and the batched driver see the same noise
    pot, pert = build_model("double_well", c=1.0)
    cfg = SimConfig(dt=1e-3, t_final=1.0, n_replicas=300)
    x, T, alive = final_states(cfg, pot, pert)
    rec = simulate_replica(cfg, pot, pert, NoiseStream(0, 290, 1), {"T": lambda s: s.tangent[0]})
    assert rec.series["T"][-1] == T[290, 0]


def test_resolvent_identity_at_anchor():
    acc = ResolventAccumulator.identity(3, 0.5)
    assert np.array_equal(acc.matrix, np.eye(3)) and acc.s_anchor == 0.5
    pot, _ = build_model("double_well", c=2.0)
    path = _path(pot, [0.7], 10, 1e-3, 0)
    assert np.array_equal(resolvent(path, pot, 1e-3, 4, 4), np.eye(1))


def test_propagate_resolvent_step():
    acc = propagate_resolvent(ResolventAccumulator.identity(2), np.diag([1.0, -2.0]), 0.1)
    assert np.allclose(acc.matrix, np.diag([0.9, 1.2]))


def test_resolvent_matches_double_well_closed_form():
    c, dt = 2.0, 1e-4
    pot, _ = build_model("double_well", c=c)
    path = _path(pot, [np.sqrt(c) / 2], 2000, dt, 3)
    # short interval: the product of (1 - H dt) agrees with exp(-sum H dt) to O(n (H dt)^2)
    s, t = 500, 600
    R = resolvent(path, pot, dt, s, t)[0, 0]
    u = path[s:t, 0]
    integral = np.sum(c - 12 * u ** 2) * dt
    assert R == pytest.approx(np.exp(integral), rel=1e-4)


def test_resolvent_semigroup():
    pot, _ = build_model("mexican_hat", d=2)
    dt = 1e-4
    path = _path(pot, [0.4, -0.3], 3000, dt, 4)
    r, s, t = 200, 1400, 2900
    lhs = resolvent(path, pot, dt, s, t) @ resolvent(path, pot, dt, r, s)
    rhs = resolvent(path, pot, dt, r, t)
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(1.0, np.max(np.abs(rhs)))


def test_resolvent_norm_bound():
    pot, _ = build_model("mexican_hat", d=2)
    dt = 1e-4
    path = _path(pot, [0.1, 0.2], 4000, dt, 5)
    phi = pot.min_spec(path)
    for t in (500, 2000, 4000):
        R = resolvent(path, pot, dt, 0, t)
        bound = np.exp(-np.sum(phi[:t]) * dt)
        assert np.linalg.norm(R, 2) <= bound * (1 + 10 * dt * t * dt + 10 * dt)


def test_resolvent_decay_for_convex_model():
    a = 1.5
    pot, _ = build_model("ou", a=a, d=2)
    dt = 1e-3
    path = _path(pot, [0.0, 0.0], 3000, dt, 6)
    for t in (100, 1000, 3000):
        assert np.linalg.norm(resolvent(path, pot, dt, 0, t), 2) <= np.exp(-a * t * dt) * (1 + 10 * dt * t * dt)


def test_tangent_via_resolvent_matches_direct_tangent():
    for name, params in (("ou", {}), ("double_well", {"c": 1.0}), ("mexican_hat", {"d": 2})):
        pot, pert = build_model(name, **params)
        dt, n = 1e-3, 2000
        path = _path(pot, pot.start(), n, dt, 7)
        T = np.zeros(pot.dim)
        for k in range(n):
            x = path[k][None]
            T = T + (pert.dforce(x)[0] - pot.hvp(x, T[None])[0]) * dt
        via = tangent_via_resolvent(path, pot, pert, dt)
        assert np.linalg.norm(via - T) <= 10 * dt * max(1.0, np.linalg.norm(T))


def test_tangent_via_resolvent_null_perturbation_and_stride():
    flat, null = _flat_model()
    pot, _ = build_model("ou")
    path = _path(pot, [0.0], 100, 1e-3, 8)
    assert np.all(tangent_via_resolvent(path, pot, null, 1e-3) == 0.0)
    with pytest.raises(UsageError):
        tangent_via_resolvent(path, pot, null, 1e-3, stride=2)


def test_double_well_tangent_is_negative():
    c = 2.0
    pot, pert = build_model("double_well", c=c)
    for seed in range(5):
        path = _path(pot, [np.sqrt(c) / 2], 3000, 1e-3, seed)
        assert tangent_via_resolvent(path, pot, pert, 1e-3)[0] < 0


def test_perturbed_pair_converges_to_tangent():
    pot, pert = build_model("double_well", c=1.0)
    cfg = SimConfig(dt=1e-3, t_final=2.0, n_replicas=64, record_stride=100)
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        _, diff, tang, alive = simulate_perturbed_pair(cfg, pot, pert, eps)
        errs.append(np.max(np.abs(diff - tang)))
    K = np.array(errs) / np.array([1e-1, 1e-2, 1e-3])
    # error is O(eps): the constant K is stable across the sweep
    assert errs[0] > errs[1] > errs[2]
    assert K.max() / K.min() < 3


def test_perturbed_pair_without_perturbation_is_zero():
    flat, _ = _flat_model()
    pot, _ = build_model("ou")
    same = PerturbationModel(lambda x, lam: -pot.gradient(x), np.zeros_like, None, 0.0)
    cfg = SimConfig(dt=1e-2, t_final=1.0, n_replicas=8)
    _, diff, tang, _ = simulate_perturbed_pair(cfg, pot, same, 0.05)
    assert np.all(diff == 0.0) and np.all(tang == 0.0)
    with pytest.raises(UsageError):
        simulate_perturbed_pair(cfg, pot, same, 0.5)


def test_perturbed_pair_bounded_for_convex_model():
    pot, pert = build_model("ou", a=2.0)
    cfg = SimConfig(dt=1e-3, t_final=10.0, n_replicas=32, record_stride=50)
    _, diff, _, _ = simulate_perturbed_pair(cfg, pot, pert, 0.05)
    # |X^eps - X^0| / eps <= C with C = 1/a for a uniform shift
    assert np.max(np.abs(diff)) <= 0.5 + 1e-9


def test_coupled_pair_identical_starts():
    pot, _ = build_model("double_well", c=2.0)
    cfg = SimConfig(dt=1e-3, t_final=1.0, n_replicas=4)
    x = np.full((4, 1), 0.3)
    _, sep = simulate_coupled_pair(x, x, cfg, pot)
    assert np.all(sep == 0.0)


def test_coupled_pair_ou_exponential_contraction():
    pot, _ = build_model("ou", d=2)
    dt = 1e-3
    cfg = SimConfig(dt=dt, t_final=5.0, n_replicas=3, record_stride=100)
    x = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]])
    y = np.zeros((3, 2))
    t, sep = simulate_coupled_pair(x, y, cfg, pot)
    exact = np.linalg.norm(x - y, axis=1)[None] * np.exp(-t)[:, None]
    euler = np.linalg.norm(x - y, axis=1)[None] * (1 - dt) ** (t / dt)[:, None]
    assert np.allclose(sep, euler, rtol=1e-9)
    assert np.allclose(sep, exact, rtol=10 * dt * t.max())


def test_initial_conditions():
    pot, _ = build_model("ou", d=2)
    cfg = SimConfig(n_replicas=5, initial=InitialCondition("point", (1.0, 2.0)))
    x, alive = initial_positions(cfg, pot, 0, 5)
    assert np.all(x == [1.0, 2.0]) and alive.all()
    cfg = SimConfig(n_replicas=2000, initial=InitialCondition("gaussian", (0.0, 0.0), 2.0))
    x, _ = initial_positions(cfg, pot, 0, 2000)
    assert abs(x.std() - 2.0) < 0.1
    with pytest.raises(UsageError):
        initial_positions(SimConfig(initial=InitialCondition("point", (1.0, 2.0, 3.0))), pot, 0, 1)


def test_worker_count_does_not_change_results():
    pot, pert = build_model("double_well", c=2.0)
    cfg = SimConfig(dt=1e-3, t_final=0.5, n_replicas=9000)
    a = final_states(cfg, pot, pert)
    b = final_states(cfg.with_(workers=8), pot, pert)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
