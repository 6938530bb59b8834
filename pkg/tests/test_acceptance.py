"""Acceptance criteria A1-A9.

Campaign sizes scale with ``PSFNAV_ACCEPT_SCALE`` (default 1: 100 Case-1
episodes, 50 Case-2 episodes). Adversarial episodes never head for the goal,
so they are cut at ``PSFNAV_ACCEPT_ADV_TMAX`` seconds (default 400).
Each criterion prints one PASS/FAIL line, repeated in the terminal summary.
"""

import math
import os

import numpy as np
import pytest

from psfnav.disturbance import DisturbanceLimits, DisturbanceObserver, ObserverState, replay_observer
from psfnav.env import EnvConfig, normalized_intervention
from psfnav.policy import AdversarialPolicy, LosPolicy
from psfnav.runner import run_campaign, run_episode
from psfnav.scenario import ScenarioSpec
from psfnav.sensing import LidarConfig, StaticObstacle, World, extract_detection_points, raycast
from psfnav.terminal import (
    TerminalBounds,
    boundary_samples,
    build_polytope,
    compute_equilibrium,
    contained_in_polytope,
    linearize,
    rest_equilibrium,
    rollout_terminal_law,
    simplified_ode,
)
from psfnav.vessel import build_matrices, coriolis

SCALE = float(os.environ.get("PSFNAV_ACCEPT_SCALE", "1"))
ADV_TMAX = float(os.environ.get("PSFNAV_ACCEPT_ADV_TMAX", "400"))
U_LB, U_UB = (-0.2, -0.15), (2.0, 0.15)


def _n(full: int) -> int:
    return max(1, round(full * SCALE))


def _scale_note() -> str:
    return "" if SCALE == 1 else f" [scale {SCALE:g}]"


@pytest.fixture(scope="module")
def a1_report(term):
    return run_campaign(ScenarioSpec.for_case("1"), _n(100), 101, lambda s: LosPolicy(), term)


@pytest.fixture(scope="module")
def a2_reports(term):
    cfg = EnvConfig(t_max=ADV_TMAX, moving_obstacle_constraints=True)
    return {
        "1": run_campaign(ScenarioSpec.for_case("1"), _n(100), 201, AdversarialPolicy, term, cfg),
        "2": run_campaign(ScenarioSpec.for_case("2"), _n(50), 202, AdversarialPolicy, term, cfg),
    }


def _failed(report) -> int:
    return report.aggregate["n_failed"]


@pytest.mark.acceptance
def test_a1_los_follower_no_collisions(a1_report, acceptance):
    a = a1_report.aggregate
    ok = a["n_collisions"] == 0 and a["n_failed"] == 0
    assert acceptance("A1", ok, f"{a['n_episodes']} Case-1 episodes, los-follower + PSF: "
                                f"{a['n_collisions']} collisions, {a['n_failed']} failed, "
                                f"mean progress {a['mean_progress']:.3f}{_scale_note()}")


@pytest.mark.acceptance
def test_a2_adversarial_no_collisions(a2_reports, acceptance):
    parts, ok = [], True
    for case, rep in a2_reports.items():
        a = rep.aggregate
        ok &= a["n_collisions"] == 0 and a["n_failed"] == 0 and a["intervention_rate"] >= 0.30
        parts.append(f"Case {case}: {a['n_episodes']} episodes, {a['n_collisions']} collisions, "
                     f"{a['n_failed']} failed, intervention rate {a['intervention_rate']:.3f}")
    assert acceptance("A2", ok, "; ".join(parts) + f" (episodes cut at {ADV_TMAX:g} s)"
                      + _scale_note())


@pytest.mark.acceptance
def test_a3_minimal_intervention(term, acceptance):
    cfg = EnvConfig()
    n_int = n_ticks = 0
    quiet = []
    for k in range(_n(8)):
        h = -math.pi + 2 * math.pi * (k + 0.5) / _n(8)
        spec = ScenarioSpec(case="custom", n_static=0, world={}, t_max=2000.0,
                            waypoints=((0.0, 0.0), (500 * math.cos(h), 500 * math.sin(h))))
        res = run_episode(spec, LosPolicy(), term, cfg)
        for r in res.records:
            d = r.u_L - r.u0
            if normalized_intervention(d, cfg.psf) > 1e-3:
                n_int += 1
            else:
                quiet.append(float(np.linalg.norm(d)))
        n_ticks += len(res.records)
    rate = n_int / n_ticks
    mean_quiet = float(np.mean(quiet)) if quiet else 0.0
    ok = rate <= 0.01 and mean_quiet <= 1e-6
    assert acceptance("A3", ok, f"{_n(8)} open-water episodes, {n_ticks} ticks: intervention "
                                f"rate {rate:.4f}, mean |delta| on quiet ticks {mean_quiet:.2e}")


@pytest.mark.acceptance
def test_a4_solve_time(a2_reports, acceptance):
    times = np.concatenate([np.asarray(e["solve_times"] or [], dtype=float)
                            for rep in a2_reports.values() for e in rep.episodes])
    p50, p90, p99 = np.percentile(times, [50, 90, 99]) * 1e3
    ok = p50 < 10.0 and p99 < 50.0
    assert acceptance("A4", ok, f"{times.size} solves on the A2 campaign: median {p50:.2f} ms, "
                                f"p90 {p90:.2f} ms, p99 {p99:.2f} ms, max {times.max() * 1e3:.2f} ms")


@pytest.mark.acceptance
def test_a5_terminal_invariance(term, model, acceptance):
    b = TerminalBounds()
    poly = build_polytope(b.d_f, b.nu_lb, b.resolved_nu_ub(model.max_surge_speed(2.0)),
                          b.psi_max, b.u_lb, b.u_ub)
    xs = boundary_samples(term.P_f, 10_000, np.random.default_rng(20_24))
    traj = rollout_terminal_law(term, model, xs, term.dt, 60.0, U_LB, U_UB)
    worst = term.value(traj - term.x_e).max(axis=0)
    exits = int(np.sum(~(worst <= 1.0 + 1e-9)))
    inside = contained_in_polytope(term, poly, xs, atol=1e-12)
    assert acceptance("A5", exits == 0 and inside,
                      f"10000 boundary samples, 60 s nonlinear rollouts: {exits} exits, "
                      f"max level {worst.max():.6f}, contained in polytope: {inside}")


@pytest.mark.acceptance
def test_a6_observer(model, u_max, acceptance):
    limits = DisturbanceLimits.default(u_max)
    dt, n = 0.5, 400
    settle, worst_after, identical = [], 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        td = 0.5 * np.asarray(limits.tau_d_max) * rng.choice([-1.0, 1.0], 3)
        obs = DisturbanceObserver(model)
        s, x = ObserverState(), np.zeros(6)
        us = [(1.0 + 0.5 * math.sin(0.02 * k + seed), 0.05 * math.cos(0.03 * k)) for k in range(n)]
        est, nus = [], []
        for u in us:
            s = obs.step(s, x[3:], u, dt)
            est.append(s.tau_hat)
            nus.append(x[3:].copy())
            x = model.step(x, u, dt, td)
        est = np.array(est)
        err = np.linalg.norm(est - td, axis=1) / np.linalg.norm(td)
        k = int(np.nonzero(err > 0.05)[0].max()) + 1
        settle.append(k * dt)
        worst_after = max(worst_after, float(err[n // 2:].max()))
        offline = replay_observer(model, obs.T, nus, us, dt)
        identical &= offline.tobytes() == est.tobytes()
    ok = max(settle) < n * dt / 2 and worst_after < 0.05 and identical
    assert acceptance("A6", ok, f"20 seeds at 50% of limits: settling {min(settle):.1f}-"
                                f"{max(settle):.1f} s, worst error over 100-200 s {worst_after:.1e}, "
                                f"offline replay bit-identical: {identical}")


def _integrate(model, x, u, T, h):
    for _ in range(round(T / h)):
        x = model.rk4(x, u, h)
    return x


def _fd_rel_error(model, eq, h=1e-6):
    lin = linearize(model.params, eq)
    A = np.zeros((6, 6))
    B = np.zeros((6, 2))
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        A[:, i] = (simplified_ode(model, eq.x_e + e, eq.u_e)
                   - simplified_ode(model, eq.x_e - e, eq.u_e)) / (2 * h)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        B[:, j] = (simplified_ode(model, eq.x_e, eq.u_e + e)
                   - simplified_ode(model, eq.x_e, eq.u_e - e)) / (2 * h)
    return max(np.max(np.abs(lin.A - A)) / np.max(np.abs(A)),
               np.max(np.abs(lin.B - B)) / np.max(np.abs(B)))


@pytest.mark.acceptance
def test_a7_model_numerics(model, params, u_max, rng, acceptance):
    x0, u = np.array([0, 0, 0.2, 0.3, 0.1, 0.0]), (1.0, 0.0)
    ref = _integrate(model, x0, u, 4.0, 0.005)
    ratio = (np.linalg.norm(_integrate(model, x0, u, 4.0, 0.5) - ref)
             / np.linalg.norm(_integrate(model, x0, u, 4.0, 0.25) - ref))
    mat = build_matrices(params)
    skew = max(float(np.max(np.abs(C + C.T)))
               for C in (coriolis(mat, nu) for nu in rng.uniform(-2, 2, (1000, 3))))
    resid = abs(model.ode(np.array([0, 0, 0, u_max, 0, 0]), (2.0, 0.0))[3])
    jac = max(_fd_rel_error(model, rest_equilibrium()), _fd_rel_error(model, compute_equilibrium(params, 2.0)))
    ok = 14 <= ratio <= 18 and skew <= 1e-12 and resid <= 1e-6 and jac <= 1e-6
    assert acceptance("A7", ok, f"RK4 ratio {ratio:.2f}, Coriolis skew {skew:.1e}, surge residual "
                                f"{resid:.1e}, Jacobian relative error {jac:.1e}")


def _march(pose, snap, cfg, step=0.01):
    s = np.arange(step, cfg.r_detect + step, step)
    out = np.full(cfg.n_ray, cfg.r_detect)
    for i, th in enumerate(cfg.angles()):
        a = th + pose[2]
        px, py = pose[0] + s * math.cos(a), pose[1] + s * math.sin(a)
        d2 = (px[:, None] - snap.centers[:, 0]) ** 2 + (py[:, None] - snap.centers[:, 1]) ** 2
        inside = np.any(d2 <= snap.radii**2, axis=1)
        k = int(np.argmax(inside))
        if inside[k]:
            out[i] = s[k]
    return out


@pytest.mark.acceptance
def test_a8_sensing_oracle(acceptance):
    cfg = LidarConfig()
    rng = np.random.default_rng(88)
    worst_ray = worst_pt = 0.0
    for _ in range(50):
        obstacles = []
        while len(obstacles) < rng.integers(3, 9):
            c = rng.uniform(-140, 140, 2)
            r = rng.uniform(3, 30)
            if np.linalg.norm(c) > r + 1.0:
                obstacles.append(StaticObstacle((float(c[0]), float(c[1])), float(r)))
        snap = World(obstacles).snapshot(0.0)
        pose = (0.0, 0.0, float(rng.uniform(-math.pi, math.pi)))
        scan = raycast(pose, snap, cfg)
        worst_ray = max(worst_ray, float(np.max(np.abs(scan.ranges - _march(pose, snap, cfg)))))
        pts = extract_detection_points(pose, scan, cfg)
        if len(pts):
            gap = np.abs(np.linalg.norm(pts[:, None, :] - snap.centers[None], axis=2) - snap.radii)
            worst_pt = max(worst_pt, float(gap.min(axis=1).max()))
    ok = worst_ray <= 0.02 and worst_pt <= 0.02
    assert acceptance("A8", ok, f"50 worlds x 180 rays: max raycast discrepancy {worst_ray:.4f} m, "
                                f"max detection point off-boundary {worst_pt:.2e} m")


@pytest.mark.acceptance
def test_a9_not_reproducible(acceptance):
    acceptance("A9", True, verdict="NOT REPRODUCIBLE", detail="stated, not run: PPO training curves and real-environment (AIS, "
                           "terrain) statistics are out of reach without a trained agent or the "
                           "data; A1-A8 and the bit-identical replay test stand in for them")
