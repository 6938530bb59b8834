import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psfnav.errors import ConfigurationError
from psfnav.psf import (
    ObstacleSet,
    PsfConfig,
    SafetyFilter,
    WarmStart,
    assemble,
    bypass_record,
    cold_start,
    cost_matrix,
    filter_cost,
    shift_warm_start,
    shooting_jacobians,
    solve,
    telemetry_record,
)
from psfnav.sensing import LidarConfig, StaticObstacle, World, extract_detection_points, raycast
from psfnav.terminal import TerminalSet
from psfnav.validation import validate

CFG = PsfConfig()
RNG_U = CFG.input_range()


def test_defaults():
    assert (CFG.N, CFG.dt, CFG.n_col, CFG.R_avoid, CFG.d_safe) == (50, 0.5, 5, 8.0, 5.0)
    assert CFG.u_lb == (-0.2, -0.15) and CFG.u_ub == (2.0, 0.15)
    assert (CFG.gamma_Fu, CFG.gamma_Tr) == (1.0, 0.01)
    assert CFG.horizon == 25.0
    with pytest.raises(ConfigurationError):
        PsfConfig(u_lb=(3.0, -0.15))
    with pytest.raises(ConfigurationError):
        PsfConfig(N=0)


def test_filter_cost_normalization():
    W = cost_matrix()
    assert filter_cost((1.0, 0.1), (1.0, 0.1), W) == 0.0
    assert filter_cost((2.2, 0.0), (0.0, 0.0), W) == pytest.approx(1.0)
    assert filter_cost((0.0, 0.3), (0.0, 0.0), W) == pytest.approx(0.01)


def test_assemble_empty_world(term, u_max):
    ocp = assemble(np.zeros(6), np.zeros(3), ObstacleSet(), CFG, term, u_max)
    assert ocp.centers.shape == (51, 0, 2)
    assert ocp.radii.shape == (0,)
    np.testing.assert_array_equal(ocp.P_nu, term.P_f_nu)


def test_assemble_ship_moves_with_velocity(term, u_max):
    obs = ObstacleSet(ship_pos=np.array([[30.0, 10.0]]), ship_vel=np.array([[-0.5, 0.2]]),
                      ship_len=np.array([6.0]))
    ocp = assemble(np.zeros(6), np.zeros(3), obs, CFG, term, u_max)
    for i in (0, 7, 50):
        np.testing.assert_allclose(ocp.centers[i, 0], (30.0 - 0.5 * i * 0.5, 10.0 + 0.2 * i * 0.5))
    assert ocp.radii[0] == 11.0
    assert ocp.family[0] == 1


def test_assemble_prunes_unreachable(term, u_max):
    pts = np.array([[20.0, 0.0], [500.0, 0.0]])
    ocp = assemble(np.zeros(6), np.zeros(3), ObstacleSet(points=pts), CFG, term, u_max)
    assert ocp.centers.shape[1] == 1
    assert ocp.radii[0] == 13.0


def _central_jac(model, x, u, tau, dt, h=1e-6):
    A = np.zeros((6, 6))
    B = np.zeros((6, 2))
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        A[:, i] = (model.rk4(x + e, u, dt, tau) - model.rk4(x - e, u, dt, tau)) / (2 * h)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        B[:, j] = (model.rk4(x, u + e, dt, tau) - model.rk4(x, u - e, dt, tau)) / (2 * h)
    return A, B


def test_shooting_jacobians(model, rng):
    X = rng.uniform(-1, 1, (4, 6)) * (10, 10, 3, 0.5, 0.2, 0.2)
    U = rng.uniform((-0.2, -0.15), (2.0, 0.15), (3, 2))
    tau = np.array([0.1, -0.05, 0.01])
    F, A, B = shooting_jacobians(model, X, U, tau, 0.5)
    for k in range(3):
        np.testing.assert_array_equal(F[k], model.rk4(X[k], U[k], 0.5, tau))
        Ac, Bc = _central_jac(model, X[k], U[k], tau, 0.5)
        np.testing.assert_allclose(A[k], Ac, atol=2e-6)
        np.testing.assert_allclose(B[k], Bc, atol=2e-6)


def test_open_water_no_intervention(term, u_max):
    f = SafetyFilter(term)
    x = np.array([0.0, 0.0, 0.3, 0.4, 0.0, 0.0])
    for u_L in [(1.0, 0.05), (2.0, 0.0), (0.3, -0.1)]:
        sol = f.filter(x, u_L)
        assert np.all(np.abs(sol.delta_u) <= 1e-6)
        assert sol.status == "optimal"


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.2, 2.0), st.floats(-0.15, 0.15), st.floats(0.0, 0.5))
def test_minimal_intervention_property(F, T, u):
    from psfnav.terminal import default_terminal_set
    f = SafetyFilter(default_terminal_set())
    sol = f.filter(np.array([0, 0, 0, u, 0, 0]), (F, T))
    assert np.max(np.abs(sol.delta_u)) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.floats(-5.0, 5.0), st.floats(-1.0, 1.0), st.floats(3.0, 40.0), st.floats(-math.pi, math.pi))
def test_output_within_bounds(F, T, d, bearing):
    from psfnav.terminal import default_terminal_set
    f = SafetyFilter(default_terminal_set())
    pt = np.array([[d * math.cos(bearing), d * math.sin(bearing)]])
    sol = f.filter(np.array([0, 0, 0, 0.5, 0, 0]), (F, T), obstacles=ObstacleSet(points=pt))
    assert np.all(sol.u0 >= CFG.u_lb) and np.all(sol.u0 <= CFG.u_ub)
    assert sol.status in ("optimal", "infeasible-soft", "max-iters", "fallback")


def test_violated_clearance_at_rest(term, model):
    """Start 12 m from a detection point (13 m required): the filter backs off."""
    f = SafetyFilter(term)
    pt = np.array([[12.0, 0.0]])
    x = np.zeros(6)
    dist = [12.0]
    for k in range(60):
        sol = f.filter(x, (0.0, 0.0), obstacles=ObstacleSet(points=pt))
        if k == 0:
            assert sol.slack["collision"] > 0
            assert sol.status == "infeasible-soft"
            assert np.any(sol.delta_u != 0)
        x = model.step(x, sol.u0, 0.5)
        dist.append(float(np.linalg.norm(x[:2] - pt[0])))
    assert np.all(np.diff(dist) >= -1e-9)
    assert dist[-1] > 13.0


@pytest.mark.slow
def test_wall_full_thrust(term, model):
    """Full thrust toward a wall 100 m ahead for 300 s never closes within d_safe."""
    cfg = LidarConfig()
    world = World([StaticObstacle((100.0, e), 5.0) for e in np.arange(-100, 101, 5.0)]).snapshot(0)
    f = SafetyFilter(term)
    x = np.zeros(6)
    clearance = []
    first = None
    for k in range(600):
        pts = extract_detection_points(x[:3], raycast(x[:3], world, cfg), cfg)
        sol = f.filter(x, (2.0, 0.0), obstacles=ObstacleSet(points=pts))
        if first is None and np.any(sol.delta_u != 0):
            first = k
        x = model.step(x, sol.u0, 0.5)
        clearance.append(np.min(np.linalg.norm(world.centers - x[:2], axis=1) - world.radii))
    assert min(clearance) >= CFG.d_safe
    # the proposal passes untouched until the wall is close
    assert first is not None and first > 200


def _head_on(term, model, F):
    cfg = LidarConfig()
    world = World([StaticObstacle((80.0, 0.0), 15.0)]).snapshot(0)
    f = SafetyFilter(term)
    x = np.array([0, 0, 0, model.max_surge_speed(F), 0, 0.0])
    dF, dT = [], []
    for _ in range(300):
        pts = extract_detection_points(x[:3], raycast(x[:3], world, cfg), cfg)
        sol = f.filter(x, (F, 0.0), obstacles=ObstacleSet(points=pts))
        if np.any(sol.delta_u != 0):
            dF.append(abs(sol.delta_u[0]) / RNG_U[0])
            dT.append(abs(sol.delta_u[1]) / RNG_U[1])
        x = model.step(x, sol.u0, 0.5)
    return np.array(dF), np.array(dT)


@pytest.mark.slow
def test_yaw_preference_head_on(term, model):
    dF, dT = _head_on(term, model, 1.0)
    assert len(dF) > 10
    assert dT.sum() > dF.sum()
    assert np.mean(dT > dF) > 0.5


def test_deterministic(term):
    pts = np.array([[25.0, 3.0], [25.0, -3.0]])
    x = np.array([0, 0, 0, 0.5, 0, 0.0])
    a = SafetyFilter(term).filter(x, (2.0, 0.0), obstacles=ObstacleSet(points=pts))
    b = SafetyFilter(term).filter(x, (2.0, 0.0), obstacles=ObstacleSet(points=pts))
    assert a.u0.tobytes() == b.u0.tobytes()
    assert a.X.tobytes() == b.X.tobytes()


def test_cold_start(term):
    ws = cold_start(np.arange(6.0), term, 50)
    assert ws.X.shape == (51, 6) and ws.U.shape == (50, 2)
    assert np.all(ws.X == np.arange(6.0))
    assert np.all(ws.U == term.u_e)


def test_shift_warm_start(term):
    rng = np.random.default_rng(0)
    prev = WarmStart(X=rng.normal(size=(51, 6)), U=rng.normal(size=(50, 2)))
    ws = shift_warm_start(prev, term, CFG.u_lb, CFG.u_ub)
    np.testing.assert_array_equal(ws.X[:50], prev.X[1:])
    np.testing.assert_array_equal(ws.X[50], prev.X[50])
    np.testing.assert_array_equal(ws.U[:49], prev.U[1:])
    assert np.all(ws.U[49] >= CFG.u_lb) and np.all(ws.U[49] <= CFG.u_ub)


def test_warm_start_reduces_iterations(term, model):
    # full thrust at a cluster of points keeps the filter busy every tick
    pts = np.array([[30.0, 5.0], [30.0, 0.0], [30.0, -5.0]])
    obs = ObstacleSet(points=pts)

    def run(warm):
        f = SafetyFilter(term)
        x = np.array([0, 0, 0, 0.5, 0, 0.0])
        its = []
        for _ in range(100):
            if not warm:
                f.reset()
            sol = f.filter(x, (2.0, 0.0), obstacles=obs)
            if sol.sqp_iterations:
                its.append(sol.sqp_iterations)
            x = model.step(x, sol.u0, 0.5)
        assert len(its) > 50
        return np.median(its)

    assert run(True) < run(False)


def test_certified_proposal_skips_qp(term, u_max):
    sol = SafetyFilter(term).filter(np.array([0, 0, 0, 0.4, 0, 0.0]), (1.0, 0.15))
    assert sol.sqp_iterations == 0
    assert sol.u0.tolist() == [1.0, 0.15]
    # an out-of-range proposal always goes through the QP
    sol = SafetyFilter(term).filter(np.array([0, 0, 0, 0.4, 0, 0.0]), (3.0, 0.0))
    assert sol.sqp_iterations > 0
    assert sol.u0[0] == pytest.approx(2.0, abs=1e-4)


def test_requires_verified_set(term):
    bad = TerminalSet(P_f=term.P_f, K=term.K, d_f=term.d_f, x_e=term.x_e, u_e=term.u_e, dt=0.5)
    with pytest.raises(ConfigurationError):
        SafetyFilter(bad)


def test_fallback_on_qp_failure(term, model, u_max, monkeypatch):
    import psfnav.psf as psf
    monkeypatch.setattr(psf, "_solve_qp", lambda qp, cfg: None)
    x = np.array([0, 0, 0, 0.3, 0.1, 0.0])
    ocp = assemble(x, np.zeros(3), ObstacleSet(), CFG, term, u_max)
    sol = solve(ocp, model, (3.0, 0.0))
    assert sol.status == "fallback"
    xbar = np.concatenate([np.zeros(3), x[3:]])
    np.testing.assert_allclose(sol.u0, term.control(xbar, CFG.u_lb, CFG.u_ub))
    validate(telemetry_record(3, sol), "telemetry")


def test_telemetry_records(term):
    sol = SafetyFilter(term).filter(np.zeros(6), (1.0, 0.0))
    rec = telemetry_record(5, sol)
    validate(rec, "telemetry")
    assert rec["tick"] == 5 and rec["status"] == "optimal"
    assert set(rec["max_slack"]) == {"velocity", "collision", "terminal_distance", "terminal_set"}
    by = bypass_record(6, (1.0, 0.0), (1.0, 0.0))
    validate(by, "telemetry")
    assert by["delta_u"] == [0.0, 0.0]
