"""Episode simulation: disturbances, sensing, filtering, integration and rewards.

One :class:`Episode` is an isolated state machine. Each tick runs the same
pipeline: advance the disturbances, form the observer estimate, filter the
proposed action through the safety filter, update the observer with the
applied input, integrate the vessel, move the target ships, check for
collisions, rescan and score.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from psfnav.disturbance import (
    CurrentState,
    DisturbanceLimits,
    DisturbanceObserver,
    ForceDisturbanceState,
    ObserverGains,
    ObserverState,
    current_force,
    initial_disturbance,
    step_current,
    step_forces,
)
from psfnav.errors import ConfigurationError
from psfnav.path import Path, PathGeometry
from psfnav.psf import ObstacleSet, PsfConfig, SafetyFilter, bypass_record, telemetry_record
from psfnav.scenario import ScenarioSpec, generate
from psfnav.sensing import (
    CriWeights,
    LidarConfig,
    LidarScan,
    World,
    WorldSnapshot,
    extract_detection_points,
    ray_closing_speeds,
    raycast,
    sector_pool,
    sector_risk,
)
from psfnav.terminal import TerminalSet
from psfnav.vessel import VesselModel, max_surge_speed, wrap_angle

GOAL_TOLERANCE = 5.0
PROGRESS_DONE = 0.99
# an action counts as modified when either input moved by more than this
# fraction of its admissible range
INTERVENTION_TOL = 1e-3

NAV_FEATURES = ("u", "v", "r", "cte", "course_error", "goal_distance", "goal_bearing",
                "progress", "tau_hat_X", "tau_hat_Y", "tau_hat_N")


@dataclass(frozen=True)
class RewardParams:
    gamma_r: float = 0.1
    gamma_eps: float = 0.5
    gamma_theta: float = 4.0
    gamma_v: float = 0.05
    gamma_x: float = 0.05
    gamma_psf: float = 1.0
    lam: float = 0.6
    r_exists: float = -0.05
    r_collision: float = -500.0
    U_max: float | None = None  # None: top speed of the vessel

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lambda must lie in [0, 1]")
        if not self.r_collision < 0:
            raise ConfigurationError("collision reward must be negative")


def reward_path(u: float, course_error: float, cte: float, params: RewardParams,
                U_max: float) -> float:
    g = params.gamma_r
    return ((u / U_max) * math.cos(course_error) + g) * (math.exp(-params.gamma_eps * abs(cte)) + g) - g * g


def reward_colav(angles, distances, closing_speeds, params: RewardParams) -> float:
    """Bearing-weighted average of exponential proximity penalties over the rays."""
    w = 1.0 / (1.0 + params.gamma_theta * np.abs(angles))
    terms = np.exp(params.gamma_v * np.maximum(0.0, closing_speeds) - params.gamma_x * distances)
    return -float(np.sum(w * terms) / np.sum(w))


def reward_psf(u_L, u0, params: RewardParams, F_max: float = 2.0, T_max: float = 0.15) -> float:
    d = np.abs(np.asarray(u_L, dtype=float) - np.asarray(u0, dtype=float))
    return -params.gamma_psf * (d[0] / F_max + d[1] / T_max)


def reward_total(components: dict, collision: bool, params: RewardParams) -> float:
    if collision:
        return params.r_collision
    lam = params.lam
    return (lam * components["path"] + (1.0 - lam) * components["colav"] + components["psf"]
            + params.r_exists)


def time_score(elapsed: float, path_length: float, U_max: float, t_max: float = 5000.0) -> float:
    """1 at the minimum possible time L_p / U_max, 0 at t_max, linear in between."""
    t_min = path_length / U_max
    if t_max <= t_min:
        return 1.0 if elapsed <= t_min else 0.0
    return float(np.clip((t_max - elapsed) / (t_max - t_min), 0.0, 1.0))


def normalized_intervention(delta_u, cfg: PsfConfig) -> float:
    return float(np.max(np.abs(np.asarray(delta_u)) / cfg.input_range()))


@dataclass
class EnvConfig:
    psf_enabled: bool = True
    moving_obstacle_constraints: bool = True
    psf: PsfConfig = field(default_factory=PsfConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    cri: CriWeights = field(default_factory=CriWeights)
    observer: ObserverGains = field(default_factory=ObserverGains)
    # None: take t_max from the scenario
    t_max: float | None = None
    # keep every LiDAR scan (ranges per tick) for export
    record_scans: bool = False


@dataclass(frozen=True)
class TickRecord:
    t: float
    x: np.ndarray
    u_L: np.ndarray
    u0: np.ndarray
    cte: float
    tau_d: np.ndarray
    tau_hat: np.ndarray
    current: tuple[float, float]
    reward: float
    solve_time: float
    status: str


@dataclass
class Metrics:
    collision: bool
    progress: float
    time_score: float | None
    mean_cte: float
    intervention_rate: float
    interventions: int
    mean_solve_time: float | None
    done_reason: str
    elapsed: float
    ticks: int
    total_reward: float
    min_clearance: float | None
    seed: int
    case: str

    def to_dict(self) -> dict:
        return asdict(self)


class Episode:
    """Simulate one scenario; call :meth:`observation` then :meth:`step` until done."""

    def __init__(self, spec: ScenarioSpec, term: TerminalSet | None = None,
                 cfg: EnvConfig | None = None, model: VesselModel | None = None,
                 world: World | None = None, path: Path | None = None):
        self.spec = spec
        self.cfg = cfg or EnvConfig()
        self.model = model or VesselModel()
        psf_cfg = self.cfg.psf
        self.u_lb = np.asarray(psf_cfg.u_lb, dtype=float)
        self.u_ub = np.asarray(psf_cfg.u_ub, dtype=float)
        self.u_max = max_surge_speed(self.model.params, float(self.u_ub[0]))
        self.U_max = self.cfg.reward.U_max or self.u_max
        self.dt = spec.dt
        self.t_max = self.cfg.t_max or spec.t_max
        if psf_cfg.dt != spec.dt:
            raise ConfigurationError("simulation dt must equal the filter step")

        # one generator for the world, an independent one for disturbances
        ss = np.random.SeedSequence(spec.seed)
        world_ss, dist_ss = ss.spawn(2)
        if world is None or path is None:
            world, path = generate(spec, self.u_max, np.random.default_rng(world_ss))
        self.world, self.path = world, path
        self.rng = np.random.default_rng(dist_ss)

        self.filter = None
        if self.cfg.psf_enabled:
            if term is None:
                raise ConfigurationError("the safety filter needs a terminal set")
            self.filter = SafetyFilter(term, psf_cfg, self.model)

        if spec.disturbances:
            limits = DisturbanceLimits.default(self.u_max, float(self.u_ub[0]), float(self.u_ub[1]))
            if spec.disturbance_limits:
                limits = DisturbanceLimits.from_dict({**limits.to_dict(), **spec.disturbance_limits})
            self.limits = limits
            self.current, self.forces = initial_disturbance(self.limits, self.rng)
        else:
            self.limits = DisturbanceLimits.zero()
            self.current, self.forces = CurrentState(), ForceDisturbanceState()
        gains = (ObserverGains(tuple(spec.observer_gains)) if spec.observer_gains is not None
                 else self.cfg.observer)
        self.observer = DisturbanceObserver(self.model, gains)
        self.obs_state = ObserverState()

        start, nxt = self.path.points[0], self.path.points[min(10, len(self.path.points) - 1)]
        psi0 = math.atan2(nxt[1] - start[1], nxt[0] - start[0])
        self.x = np.array([start[0], start[1], psi0, 0.0, 0.0, 0.0])
        self.t = 0.0
        self.tick = 0
        self.collision = False
        self.done = False
        self.done_reason = ""
        self.progress = 0.0
        self.total_reward = 0.0
        self.records: list[TickRecord] = []
        self.telemetry: list[dict] = []
        self.scans: list[np.ndarray] = []
        self.min_clearance = math.inf
        self._obs: np.ndarray | None = None
        self._obs_tick = -1
        self._sense()
        self.tau_hat = np.zeros(3)
        self._check_termination()

    # ------------------------------------------------------------------ sensing
    def _sense(self) -> None:
        self.snapshot: WorldSnapshot = self.world.snapshot(self.t)
        self.scan: LidarScan = raycast(self.x, self.snapshot, self.cfg.lidar)
        self.geom: PathGeometry = self.path.geometry(self.x[:2], self.x[2], self.x[3:5])
        self.progress = max(self.progress, self.geom.progress)
        if len(self.snapshot):
            gap = np.linalg.norm(self.snapshot.centers - self.x[:2], axis=1) - self.snapshot.radii
            self.min_clearance = min(self.min_clearance, float(gap.min()))
            self.collision = self.collision or bool(np.any(gap < 0.0))

    def _check_termination(self) -> None:
        if self.collision:
            self.done, self.done_reason = True, "collision"
        elif np.linalg.norm(self.path.goal - self.x[:2]) < GOAL_TOLERANCE:
            self.done, self.done_reason = True, "goal-reached"
        elif self.progress > PROGRESS_DONE:
            self.done, self.done_reason = True, "progress"
        elif self.t >= self.t_max - 1e-9:
            self.done, self.done_reason = True, "timeout"

    # -------------------------------------------------------------- observation
    def observation(self) -> np.ndarray:
        if self._obs is not None and self._obs_tick == self.tick:
            return self._obs.copy()
        g = self.geom
        to_goal = self.path.goal - self.x[:2]
        goal_bearing = wrap_angle(math.atan2(to_goal[1], to_goal[0]) - self.x[2])
        tau = self.tau_hat if self.spec.disturbances else np.zeros(3)
        nav = [self.x[3], self.x[4], self.x[5], g.cte, g.course_error,
               float(np.linalg.norm(to_goal)), goal_bearing, self.progress, *tau]
        dist = sector_pool(self.scan, self.cfg.lidar) / self.cfg.lidar.r_detect
        risk = sector_risk(self.x, self.x[3:6], self.snapshot, self.scan, self.cfg.lidar, self.cfg.cri)
        self._obs = np.concatenate([np.array(nav, dtype=float), dist, risk])
        self._obs_tick = self.tick
        return self._obs.copy()

    def observation_layout(self) -> list[str]:
        n = self.cfg.lidar.n_sector
        return (list(NAV_FEATURES) + [f"sector_distance_{i}" for i in range(n)]
                + [f"sector_cri_{i}" for i in range(n)])

    def obstacles(self) -> ObstacleSet:
        snap = self.snapshot
        skip = snap.is_ship if self.cfg.moving_obstacle_constraints else None
        pts = extract_detection_points(self.x, self.scan, self.cfg.lidar, self.cfg.psf.n_col, skip)
        if not self.cfg.moving_obstacle_constraints:
            return ObstacleSet(points=pts)
        return ObstacleSet.from_snapshot(pts, snap)

    # --------------------------------------------------------------------- step
    def step(self, u_L) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise RuntimeError("episode is finished")
        u_L = np.asarray(u_L, dtype=float).reshape(2)
        if not np.all(np.isfinite(u_L)):
            raise ConfigurationError("proposed action is not finite")
        dt = self.dt

        if self.spec.disturbances:
            self.current = step_current(self.current, self.limits, self.rng, dt)
            self.forces = step_forces(self.forces, self.limits, self.rng, dt)
        tau_d = self.forces.tau_d + current_force(self.model.params, self.current, self.x[2])
        self.tau_hat = self.observer.estimate(self.obs_state.zeta, self.x[3:6])
        psf_tau = self.tau_hat if self.spec.disturbances else np.zeros(3)

        if self.filter is not None:
            sol = self.filter.filter(self.x, u_L, psf_tau, self.obstacles())
            u0 = sol.u0
        else:
            sol = None
            u0 = np.clip(u_L, self.u_lb, self.u_ub)

        self.obs_state = self.observer.step(self.obs_state, self.x[3:6], u0, dt)
        self.x = self.model.step(self.x, u0, dt, tau_d if self.spec.disturbances else None)
        self.t = (self.tick + 1) * dt
        self.tick += 1
        self._sense()
        if self.cfg.record_scans:
            self.scans.append(self.scan.ranges.copy())

        comps = {
            "path": reward_path(self.x[3], self.geom.course_error, self.geom.cte,
                                self.cfg.reward, self.U_max),
            "colav": reward_colav(self.scan.angles, self.scan.ranges,
                                  ray_closing_speeds(self.x, self.snapshot, self.scan),
                                  self.cfg.reward),
            "psf": reward_psf(u_L, u0, self.cfg.reward, float(self.u_ub[0]), float(self.u_ub[1])),
        }
        reward = reward_total(comps, self.collision, self.cfg.reward)
        self.total_reward += reward
        self.records.append(TickRecord(
            t=self.t, x=self.x.copy(), u_L=u_L.copy(), u0=np.asarray(u0, dtype=float).copy(),
            cte=self.geom.cte, tau_d=np.asarray(tau_d, dtype=float).copy(),
            tau_hat=self.tau_hat.copy(), current=(self.current.V_c, self.current.beta_c),
            reward=reward, solve_time=sol.solve_time if sol is not None else 0.0,
            status=sol.status if sol is not None else "bypass",
        ))
        self.telemetry.append(telemetry_record(self.tick - 1, sol) if sol is not None
                              else bypass_record(self.tick - 1, u_L, u0))
        self._check_termination()
        info = {"components": comps, "solution": sol, "done_reason": self.done_reason}
        return self.observation(), reward, self.done, info

    # ------------------------------------------------------------------ metrics
    def _time_score(self) -> float | None:
        # scored against the scenario horizon even when the run was cut short;
        # an episode that never arrived scores zero
        if self.collision:
            return None
        if self.done_reason not in ("goal-reached", "progress"):
            return 0.0
        return time_score(self.t, self.path.length, self.U_max, self.spec.t_max)

    def metrics(self) -> Metrics:
        recs = self.records
        deltas = [normalized_intervention(r.u_L - r.u0, self.cfg.psf) for r in recs]
        n_int = sum(d > INTERVENTION_TOL for d in deltas)
        solve = [r.solve_time for r in recs if r.status != "bypass"]
        return Metrics(
            collision=self.collision,
            progress=float(min(self.progress, 1.0)),
            time_score=self._time_score(),
            mean_cte=float(np.mean([abs(r.cte) for r in recs])) if recs else 0.0,
            intervention_rate=n_int / len(recs) if recs else 0.0,
            interventions=int(n_int),
            mean_solve_time=float(np.mean(solve)) if solve else None,
            done_reason=self.done_reason,
            elapsed=self.t,
            ticks=self.tick,
            total_reward=self.total_reward,
            min_clearance=self.min_clearance if math.isfinite(self.min_clearance) else None,
            seed=self.spec.seed,
            case=self.spec.case,
        )
