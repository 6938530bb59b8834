import math

import numpy as np
import pytest

from psfnav.env import (
    GOAL_TOLERANCE,
    NAV_FEATURES,
    EnvConfig,
    Episode,
    RewardParams,
    reward_colav,
    reward_path,
    reward_psf,
    reward_total,
    time_score,
)
from psfnav.errors import ConfigurationError
from psfnav.path import Path, _catmull_rom
from psfnav.scenario import GOAL_CLEARANCE, START_CLEARANCE, ScenarioSpec, generate
from psfnav.sensing import StaticObstacle, World

RP = RewardParams()


# ------------------------------------------------------------------- path


def test_straight_path_cte_and_progress():
    path = Path([[0.0, 0.0], [100.0, 0.0]])
    g = path.geometry([50.0, 10.0], psi=0.0)
    assert abs(g.cte) == pytest.approx(10.0, abs=1e-9)
    assert g.cte > 0  # east of a north-bound path is starboard
    assert g.progress == pytest.approx(0.5, abs=1e-9)
    assert g.course_error == pytest.approx(0.0, abs=1e-12)
    assert path.length == pytest.approx(100.0, abs=1e-9)


def test_course_uses_velocity_over_ground():
    path = Path([[0.0, 0.0], [100.0, 0.0]])
    g = path.geometry([10.0, 0.0], psi=0.0, nu=[1.0, 1.0, 0.0])
    assert g.course_error == pytest.approx(math.pi / 4)


@pytest.mark.parametrize("seed", range(5))
def test_curved_path_cte_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    wp = np.cumsum(rng.uniform(20, 80, (5, 2)) * [1, 1] * rng.choice([-1, 1], (5, 2)), axis=0)
    path = Path(wp)
    dense = _catmull_rom(wp, 20000)
    checked = 0
    for p in rng.uniform(wp.min(0) - 20, wp.max(0) + 20, (60, 2)):
        dist = np.linalg.norm(dense - p, axis=1)
        i = int(np.argmin(dist))
        # beyond the end points the cross-track error is a normal offset, not a distance
        if i < 200 or i > len(dense) - 200:
            continue
        checked += 1
        assert abs(path.geometry(p).cte) == pytest.approx(dist[i], abs=0.05)
    assert checked > 10


def test_path_rejects_bad_waypoints():
    with pytest.raises(ConfigurationError):
        Path([[0.0, 0.0]])
    with pytest.raises(ConfigurationError):
        Path([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])


def test_path_dict_roundtrip():
    p = Path([[0, 0], [30, 40], [80, 10]])
    q = Path.from_dict(p.to_dict())
    assert np.array_equal(p.points, q.points)


# -------------------------------------------------------------- scenarios


@pytest.mark.parametrize("case,n_s,n_d", [("1", 8, 0), ("2", 5, 5), ("3", 5, 5)])
def test_case_obstacle_counts(case, n_s, n_d, u_max):
    spec = ScenarioSpec.for_case(case, seed=3)
    world, path = generate(spec, u_max)
    assert len(world.statics) == n_s
    assert len(world.ships) == n_d
    assert path.length == pytest.approx(spec.path_length, rel=1e-3)
    for o in world.statics:
        c = np.asarray(o.center)
        assert np.linalg.norm(c - path.start) - o.radius >= START_CLEARANCE
        assert np.linalg.norm(c - path.goal) - o.radius >= GOAL_CLEARANCE


def test_generation_is_deterministic(u_max):
    spec = ScenarioSpec.for_case("2", seed=9)
    w1, p1 = generate(spec, u_max, np.random.default_rng(5))
    w2, p2 = generate(spec, u_max, np.random.default_rng(5))
    assert w1.to_dict() == w2.to_dict()
    assert np.array_equal(p1.points, p2.points)


def test_only_case3_has_disturbances():
    assert [ScenarioSpec.for_case(c).disturbances for c in "123"] == [False, False, True]


def test_unknown_case_rejected():
    with pytest.raises(ConfigurationError):
        ScenarioSpec.for_case("7")
    with pytest.raises(ConfigurationError):
        ScenarioSpec.from_dict({"case": "1", "bogus": 1})


def test_spec_dict_roundtrip():
    spec = ScenarioSpec.for_case("3", seed=4, observer_gains=(1.0, 2.0, 3.0),
                                 disturbance_limits={"V_c_max": 0.1})
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec


# ----------------------------------------------------------------- rewards


def test_path_reward_examples():
    U = 0.5
    # at speed, aligned and on the path
    assert reward_path(U, 0.0, 0.0, RP, U) == pytest.approx(1 + 2 * RP.gamma_r)
    # standing still far off the path earns nothing
    assert reward_path(0.0, 0.0, 1e6, RP, U) == pytest.approx(0.0, abs=1e-12)
    # standing still on the path keeps only the constant term
    assert reward_path(0.0, 0.0, 0.0, RP, U) == pytest.approx(RP.gamma_r)
    # monotone decreasing in |cte| and in |course error|
    r_cte = [reward_path(U, 0.0, e, RP, U) for e in (0, 1, 5, 20)]
    r_chi = [reward_path(U, a, 0.0, RP, U) for a in (0, 0.3, 1.0, 1.5)]
    assert np.all(np.diff(r_cte) < 0) and np.all(np.diff(r_chi) < 0)


def test_colav_reward_bounds(rng):
    for _ in range(200):
        ang = rng.uniform(-math.pi, math.pi, 180)
        d = rng.uniform(0, 150, 180)
        v = rng.uniform(-2, 0, 180)  # opening or static: factor at most one
        r = reward_colav(ang, d, v, RP)
        assert -1.0 <= r <= 0.0
    far = reward_colav(np.zeros(3), np.full(3, 150.0), np.zeros(3), RP)
    near = reward_colav(np.zeros(3), np.full(3, 5.0), np.zeros(3), RP)
    assert near < far


def test_psf_reward():
    assert reward_psf([1.0, 0.1], [1.0, 0.1], RP) == 0.0
    assert reward_psf([2.0, 0.0], [0.0, 0.0], RP) == pytest.approx(-RP.gamma_psf)
    assert reward_psf([0.0, 0.15], [0.0, 0.0], RP) == pytest.approx(-RP.gamma_psf)


def test_total_reward_weighting():
    comps = {"path": 1.0, "colav": -0.5, "psf": -0.2}
    assert reward_total(comps, True, RP) == RP.r_collision
    only_path = RewardParams(lam=1.0)
    only_colav = RewardParams(lam=0.0)
    assert reward_total(comps, False, only_path) == pytest.approx(1.0 - 0.2 + RP.r_exists)
    assert reward_total(comps, False, only_colav) == pytest.approx(-0.5 - 0.2 + RP.r_exists)
    with pytest.raises(ConfigurationError):
        RewardParams(lam=1.5)
    with pytest.raises(ConfigurationError):
        RewardParams(r_collision=1.0)


def test_time_score_examples():
    L, U = 500.0, 0.5
    assert time_score(L / U, L, U) == pytest.approx(1.0)
    assert time_score(5000.0, L, U) == pytest.approx(0.0)
    assert time_score(0.5 * (L / U + 5000.0), L, U) == pytest.approx(0.5)
    assert time_score(9000.0, L, U) == 0.0


# ----------------------------------------------------------------- episodes


def _custom(waypoints, statics=(), t_max=5000.0):
    world = {"static_obstacles": [{"center": list(c), "radius": r} for c, r in statics]}
    return ScenarioSpec(case="custom", n_static=0, waypoints=tuple(map(tuple, waypoints)),
                        world=world, t_max=t_max)


def test_goal_within_tolerance_ends_immediately():
    ep = Episode(_custom([[0, 0], [4, 0]]), cfg=EnvConfig(psf_enabled=False))
    assert ep.done and ep.done_reason == "goal-reached"
    assert 4.0 < GOAL_TOLERANCE


def test_timeout():
    ep = Episode(_custom([[0, 0], [500, 0]], t_max=5.0), cfg=EnvConfig(psf_enabled=False))
    while not ep.done:
        ep.step([0.0, 0.0])
    assert ep.done_reason == "timeout"
    assert ep.tick == 10
    assert ep.metrics().time_score == 0.0
    with pytest.raises(RuntimeError):
        ep.step([0.0, 0.0])


def test_collision_flag_matches_post_hoc_check():
    spec = _custom([[0, 0], [300, 0]], statics=[((60.0, 0.0), 10.0)], t_max=400.0)
    ep = Episode(spec, cfg=EnvConfig(psf_enabled=False))
    rewards = []
    while not ep.done:
        _, r, _, _ = ep.step([2.0, 0.0])
        rewards.append(r)
    assert ep.done_reason == "collision"
    assert rewards[-1] == RP.r_collision
    pos = np.array([rec.x[:2] for rec in ep.records])
    gap = np.linalg.norm(pos - [60.0, 0.0], axis=1) - 10.0
    assert gap[-1] < 0 and np.all(gap[:-1] >= 0)
    m = ep.metrics()
    assert m.collision and m.time_score is None


def test_observation_layout():
    ep = Episode(ScenarioSpec.for_case("1", seed=1), cfg=EnvConfig(psf_enabled=False))
    obs = ep.observation()
    n = ep.cfg.lidar.n_sector
    assert obs.shape == (len(NAV_FEATURES) + 2 * n,) == (51,)
    assert len(ep.observation_layout()) == obs.size
    assert np.all(np.isfinite(obs))
    assert np.all((obs[11:11 + n] >= 0) & (obs[11:11 + n] <= 1))
    assert np.all((obs[11 + n:] >= 0) & (obs[11 + n:] <= 1))


def test_disturbance_estimate_only_in_case3():
    for case, expect in (("2", False), ("3", True)):
        ep = Episode(ScenarioSpec.for_case(case, seed=2, t_max=30.0),
                     cfg=EnvConfig(psf_enabled=False))
        for _ in range(40):
            obs, *_ = ep.step([1.0, 0.0])
        assert bool(np.any(obs[8:11] != 0.0)) is expect


def test_episode_is_deterministic():
    def run():
        ep = Episode(ScenarioSpec.for_case("3", seed=5, t_max=20.0),
                     cfg=EnvConfig(psf_enabled=False))
        while not ep.done:
            ep.step([1.5, 0.05])
        return np.array([r.x for r in ep.records]), ep.total_reward

    (a, ra), (b, rb) = run(), run()
    assert np.array_equal(a, b) and ra == rb


def test_bypass_passes_clipped_action():
    ep = Episode(_custom([[0, 0], [500, 0]], t_max=2.0), cfg=EnvConfig(psf_enabled=False))
    ep.step([5.0, -1.0])
    assert np.array_equal(ep.records[0].u0, [2.0, -0.15])
    assert ep.telemetry[0]["status"] == "bypass"


def test_filter_requires_terminal_set():
    with pytest.raises(ConfigurationError):
        Episode(ScenarioSpec.for_case("1"))


def test_injected_world_and_path():
    world = World([StaticObstacle((200.0, 30.0), 10.0)], [])
    path = Path([[0, 0], [400, 0]])
    ep = Episode(ScenarioSpec.for_case("1"), cfg=EnvConfig(psf_enabled=False), world=world, path=path)
    assert ep.world is world and ep.path is path
    assert ep.x[2] == pytest.approx(0.0)


def test_filtered_episode_intervention_metrics(term):
    spec = _custom([[0, 0], [300, 0]], statics=[((60.0, 0.0), 10.0)], t_max=200.0)
    ep = Episode(spec, term)
    while not ep.done:
        ep.step([2.0, 0.0])
    m = ep.metrics()
    assert not m.collision
    assert m.interventions > 0 and 0 < m.intervention_rate <= 1
    assert m.mean_solve_time is not None
