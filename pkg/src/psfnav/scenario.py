"""Scenario descriptions and randomized world generation for the test cases."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path as FsPath

import numpy as np

from psfnav.errors import ConfigurationError
from psfnav.path import Path
from psfnav.sensing import MovingShip, StaticObstacle, World

CASES = ("1", "2", "3", "custom")
START_CLEARANCE = 50.0
GOAL_CLEARANCE = 20.0
MIN_RADIUS = 5.0
MAX_TRIES = 200


@dataclass(frozen=True)
class ScenarioSpec:
    case: str = "1"
    n_static: int = 8
    n_dynamic: int = 0
    n_waypoints: int = 2
    path_length: float = 500.0
    mu_r_stat: float = 30.0
    mu_r_dyn: float = 15.0
    sigma_d: float = 100.0
    disturbances: bool = False
    seed: int = 0
    dt: float = 0.5
    t_max: float = 5000.0
    # ship speeds are drawn from [min, max] times the ownship's top speed
    ship_speed_frac: tuple[float, float] = (0.2, 1.0)
    # explicit geometry for custom scenarios (None: generate randomly)
    waypoints: tuple | None = None
    world: dict | None = None
    # overrides of the default disturbance limits and observer gains
    disturbance_limits: dict | None = None
    observer_gains: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.case not in CASES:
            raise ConfigurationError(f"unknown case {self.case!r}; expected one of {CASES}")
        if min(self.n_static, self.n_dynamic) < 0 or self.n_waypoints < 2:
            raise ConfigurationError("obstacle counts must be >= 0 and n_waypoints >= 2")
        if self.path_length <= 0 or self.dt <= 0 or self.t_max <= 0:
            raise ConfigurationError("path length, dt and t_max must be positive")
        if self.sigma_d < 0 or min(self.mu_r_stat, self.mu_r_dyn) <= 0:
            raise ConfigurationError("obstacle size/displacement parameters must be positive")
        lo, hi = self.ship_speed_frac
        if not 0 <= lo <= hi:
            raise ConfigurationError("ship speed fractions must satisfy 0 <= min <= max")

    @classmethod
    def for_case(cls, case: str | int, seed: int = 0, **kw) -> "ScenarioSpec":
        case = str(case)
        if case == "1":
            base = dict(n_static=8, n_dynamic=0, mu_r_stat=30.0)
        elif case == "2":
            base = dict(n_static=5, n_dynamic=5, mu_r_stat=25.0, mu_r_dyn=15.0)
        elif case == "3":
            base = dict(n_static=5, n_dynamic=5, mu_r_stat=25.0, mu_r_dyn=15.0, disturbances=True)
        else:
            raise ConfigurationError(f"unknown case {case!r}; expected 1, 2 or 3")
        base.update(kw)
        return cls(case=case, seed=seed, **base)

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ship_speed_frac"] = list(self.ship_speed_frac)
        if self.waypoints is not None:
            d["waypoints"] = [list(w) for w in self.waypoints]
        if self.observer_gains is not None:
            d["observer_gains"] = list(self.observer_gains)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        d = dict(data)
        d["case"] = str(d.get("case", "1"))
        if "ship_speed_frac" in d:
            d["ship_speed_frac"] = tuple(d["ship_speed_frac"])
        if d.get("observer_gains") is not None:
            d["observer_gains"] = tuple(float(g) for g in d["observer_gains"])
        if d.get("waypoints") is not None:
            d["waypoints"] = tuple(tuple(float(c) for c in w) for w in d["waypoints"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | FsPath) -> "ScenarioSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _folded_radius(rng: np.random.Generator, mean: float) -> float:
    return max(MIN_RADIUS, abs(rng.normal(mean, 0.5 * mean)))


def _random_path(spec: ScenarioSpec, rng: np.random.Generator) -> Path:
    heading = rng.uniform(-math.pi, math.pi)
    pts = [np.zeros(2)]
    for _ in range(spec.n_waypoints - 1):
        heading += rng.uniform(-math.pi / 4, math.pi / 4) if len(pts) > 1 else 0.0
        pts.append(pts[-1] + np.array([math.cos(heading), math.sin(heading)]))
    raw = Path(np.array(pts))
    # centripetal Catmull-Rom is scale-equivariant, so one rescale hits L_p
    return Path(np.array(pts) * spec.path_length / raw.length)


def _clear_of(center, radius, path: Path, margin_start=START_CLEARANCE,
              margin_goal=GOAL_CLEARANCE) -> bool:
    c = np.asarray(center)
    return (np.linalg.norm(c - path.start) - radius >= margin_start
            and np.linalg.norm(c - path.goal) - radius >= margin_goal)


def generate(spec: ScenarioSpec, u_max: float, rng: np.random.Generator | None = None
             ) -> tuple[World, Path]:
    """Random path plus obstacles scattered around it.

    Static obstacles sit at a uniformly drawn path point displaced by an
    isotropic Gaussian; ships cross a displaced path point on a straight line,
    timed so that the crossing happens while the ownship could be nearby.
    Placements that violate the start/goal clearance are redrawn.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if spec.case == "custom" or spec.waypoints is not None:
        if spec.waypoints is None:
            raise ConfigurationError("custom scenarios need explicit waypoints")
        path = Path(np.array(spec.waypoints, dtype=float))
        world = World.from_dict(spec.world or {})
        return world, path

    path = _random_path(spec, rng)
    statics = []
    for _ in range(spec.n_static):
        for _ in range(MAX_TRIES):
            c = path.point_at(rng.uniform(0.0, path.length)) + rng.normal(0.0, spec.sigma_d, 2)
            r = _folded_radius(rng, spec.mu_r_stat)
            if _clear_of(c, r, path):
                statics.append(StaticObstacle((float(c[0]), float(c[1])), float(r)))
                break

    ships = []
    lo, hi = spec.ship_speed_frac
    for _ in range(spec.n_dynamic):
        for _ in range(MAX_TRIES):
            s_cross = rng.uniform(0.0, path.length)
            cross = path.point_at(s_cross) + rng.normal(0.0, 0.25 * spec.sigma_d, 2)
            length = _folded_radius(rng, spec.mu_r_dyn)
            speed = rng.uniform(lo, hi) * u_max
            course = rng.uniform(-math.pi, math.pi)
            d = np.array([math.cos(course), math.sin(course)])
            # arrive at the crossing roughly when the ownship passes there
            t_cross = s_cross / max(u_max, 1e-6) * rng.uniform(0.5, 1.5)
            p0 = cross - d * speed * t_cross
            p1 = cross + d * speed * spec.t_max
            if np.linalg.norm(p0 - path.start) - length < START_CLEARANCE:
                continue
            ships.append(MovingShip(((float(p0[0]), float(p0[1])), (float(p1[0]), float(p1[1]))),
                                    float(speed), float(length)))
            break
    return World(statics, ships), path
