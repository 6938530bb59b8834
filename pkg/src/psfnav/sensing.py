"""Obstacles, simulated 2-D LiDAR, detection points and collision risk.

Static obstacles and moving ships are both circles for sensing purposes; a
ship's circle has radius equal to its length (the hazard region the safety
filter also uses).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from psfnav.errors import ConfigurationError

MIN_RANGE = 1e-6


@dataclass(frozen=True)
class StaticObstacle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ConfigurationError("obstacle radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class MovingShip:
    """A target ship following a piecewise-linear trajectory at constant speed.

    Past the final waypoint the ship keeps going along the last segment.
    """

    waypoints: tuple[tuple[float, float], ...]
    speed: float
    length: float

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise ConfigurationError("ship length must be positive")
        if self.speed < 0:
            raise ConfigurationError("ship speed must be non-negative")
        wps = tuple((float(a), float(b)) for a, b in self.waypoints)
        if len(wps) < 2:
            raise ConfigurationError("ship trajectory needs at least two waypoints")
        object.__setattr__(self, "waypoints", wps)
        pts = np.array(wps)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ConfigurationError("ship trajectory has repeated waypoints")
        object.__setattr__(self, "_pts", pts)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def radius(self) -> float:
        return self.length

    def _segment(self, t: float) -> tuple[int, float]:
        s = self.speed * t
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(max(i, 0), len(self._cum) - 2)
        return i, s - self._cum[i]

    def position(self, t: float) -> np.ndarray:
        i, ds = self._segment(t)
        a, b = self._pts[i], self._pts[i + 1]
        d = (b - a) / (self._cum[i + 1] - self._cum[i])
        return a + d * ds

    def velocity(self, t: float) -> np.ndarray:
        i, _ = self._segment(t)
        a, b = self._pts[i], self._pts[i + 1]
        return (b - a) / (self._cum[i + 1] - self._cum[i]) * self.speed

    def heading(self, t: float) -> float:
        i, _ = self._segment(t)
        d = self._pts[i + 1] - self._pts[i]
        return math.atan2(d[1], d[0])

    def to_dict(self) -> dict:
        return {"waypoints": [list(w) for w in self.waypoints], "speed": self.speed,
                "length": self.length}


@dataclass(frozen=True)
class WorldSnapshot:
    """Circles at one instant: centers (K, 2), radii (K,), velocities (K, 2)."""

    centers: np.ndarray
    radii: np.ndarray
    velocities: np.ndarray
    is_ship: np.ndarray

    @classmethod
    def empty(cls) -> "WorldSnapshot":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.radii)


@dataclass
class World:
    statics: list[StaticObstacle] = field(default_factory=list)
    ships: list[MovingShip] = field(default_factory=list)

    def snapshot(self, t: float) -> WorldSnapshot:
        centers = [o.center for o in self.statics] + [tuple(s.position(t)) for s in self.ships]
        radii = [o.radius for o in self.statics] + [s.radius for s in self.ships]
        vel = [(0.0, 0.0)] * len(self.statics) + [tuple(s.velocity(t)) for s in self.ships]
        flags = [False] * len(self.statics) + [True] * len(self.ships)
        if not radii:
            return WorldSnapshot.empty()
        return WorldSnapshot(np.array(centers, dtype=float), np.array(radii, dtype=float),
                             np.array(vel, dtype=float), np.array(flags, dtype=bool))

    def to_dict(self) -> dict:
        return {"static_obstacles": [o.to_dict() for o in self.statics],
                "ships": [s.to_dict() for s in self.ships]}

    @classmethod
    def from_dict(cls, data: dict) -> "World":
        statics = [StaticObstacle(tuple(o["center"]), float(o["radius"]))
                   for o in data.get("static_obstacles", [])]
        ships = [MovingShip(tuple(tuple(w) for w in s["waypoints"]), float(s["speed"]),
                            float(s["length"])) for s in data.get("ships", [])]
        return cls(statics, ships)


@dataclass(frozen=True)
class LidarConfig:
    n_ray: int = 180
    n_sector: int = 20
    r_detect: float = 150.0

    def __post_init__(self) -> None:
        if self.n_ray <= 0 or self.n_sector <= 0 or self.n_ray % self.n_sector:
            raise ConfigurationError("n_sector must divide n_ray")
        if self.r_detect <= 0:
            raise ConfigurationError("detection range must be positive")

    @property
    def rays_per_sector(self) -> int:
        return self.n_ray // self.n_sector

    def angles(self) -> np.ndarray:
        """Ray angles relative to the heading; ray 0 points dead ahead."""
        a = 2.0 * np.pi * np.arange(self.n_ray) / self.n_ray
        return np.where(a > np.pi, a - 2.0 * np.pi, a)

    def sector_of(self, theta) -> np.ndarray:
        """Sector index for a relative bearing (same partition as the rays)."""
        width = 2.0 * np.pi / self.n_ray
        idx = np.round(np.mod(np.asarray(theta, dtype=float), 2.0 * np.pi) / width).astype(int)
        return (idx % self.n_ray) // self.rays_per_sector


@dataclass(frozen=True)
class LidarScan:
    ranges: np.ndarray
    angles: np.ndarray
    hit: np.ndarray  # index of the circle hit by each ray, -1 for none


def raycast(pose, world: WorldSnapshot, cfg: LidarConfig = LidarConfig()) -> LidarScan:
    """Exact ray/circle intersection for every ray, clamped to the sensor range.

    A sensor origin inside a circle yields a range of ``MIN_RANGE`` on every
    ray that starts inside it.
    """
    x, y, psi = float(pose[0]), float(pose[1]), float(pose[2])
    theta = cfg.angles()
    n = len(theta)
    ranges = np.full(n, cfg.r_detect)
    hit = np.full(n, -1)
    if len(world) == 0:
        return LidarScan(ranges, theta, hit)
    dirs = np.stack([np.cos(theta + psi), np.sin(theta + psi)], axis=1)  # (n, 2)
    rel = world.centers - np.array([x, y])  # (k, 2)
    b = dirs @ rel.T  # (n, k) projection of center on ray
    c = np.sum(rel * rel, axis=1) - world.radii**2  # (k,)
    disc = b * b - c[None, :]
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
    t_near = b - sq
    inside = np.broadcast_to(c[None, :] <= 0, t_near.shape)
    t = np.where(inside, MIN_RANGE, t_near)
    valid = (disc >= 0) & ((t_near >= 0) | inside)
    t = np.where(valid, t, np.inf)
    j = np.argmin(t, axis=1)
    tmin = t[np.arange(n), j]
    sel = tmin < cfg.r_detect
    ranges[sel] = np.maximum(tmin[sel], MIN_RANGE)
    hit[sel] = j[sel]
    return LidarScan(ranges, theta, hit)


def sector_pool(scan: LidarScan, cfg: LidarConfig = LidarConfig()) -> np.ndarray:
    return scan.ranges.reshape(cfg.n_sector, cfg.rays_per_sector).min(axis=1)


def detection_point(pose, theta: float, d: float) -> np.ndarray:
    x, y, psi = float(pose[0]), float(pose[1]), float(pose[2])
    return np.array([x + d * math.cos(theta + psi), y + d * math.sin(theta + psi)])


def extract_detection_points(pose, scan: LidarScan, cfg: LidarConfig = LidarConfig(),
                             n_col: int = 5, skip=None) -> np.ndarray:
    """Up to ``n_col`` nearest hits per sector, converted to world coordinates.

    Returns an array of shape (m, 2). ``skip`` is an optional boolean mask over
    the world's circles; rays that hit a masked circle are treated as misses
    before the per-sector selection.
    """
    k = cfg.rays_per_sector
    if n_col > k:
        raise ConfigurationError("n_col cannot exceed rays per sector")
    ranges = scan.ranges
    if skip is not None and np.any(skip):
        masked = (scan.hit >= 0) & np.asarray(skip)[np.maximum(scan.hit, 0)]
        ranges = np.where(masked, cfg.r_detect, ranges)
    r = ranges.reshape(cfg.n_sector, k)
    order = np.argsort(r, axis=1, kind="stable")[:, :n_col]
    rows = np.repeat(np.arange(cfg.n_sector), n_col)
    idx = (rows * k + order.ravel())
    idx = idx[ranges[idx] < cfg.r_detect]
    if idx.size == 0:
        return np.zeros((0, 2))
    d = ranges[idx]
    a = scan.angles[idx] + float(pose[2])
    return np.stack([pose[0] + d * np.cos(a), pose[1] + d * np.sin(a)], axis=1)


def cpa(p_own, v_own, p_target, v_target) -> tuple[float, float]:
    """Distance and time to the closest point of approach (TCPA >= 0)."""
    dp = np.asarray(p_target, dtype=float) - np.asarray(p_own, dtype=float)
    dv = np.asarray(v_target, dtype=float) - np.asarray(v_own, dtype=float)
    vv = float(dv @ dv)
    tcpa = 0.0 if vv == 0.0 else max(0.0, -float(dp @ dv) / vv)
    dcpa = float(np.linalg.norm(dp + dv * tcpa))
    return dcpa, tcpa


def ramp_down(z: float, lo: float, hi: float) -> float:
    return float(np.clip((hi - z) / (hi - lo), 0.0, 1.0))


def ramp_up(z: float, lo: float, hi: float) -> float:
    return float(np.clip((z - lo) / (hi - lo), 0.0, 1.0))


@dataclass(frozen=True)
class CriWeights:
    """Weights and membership parameters of the collision risk index.

    Memberships are descending ramps for DCPA, TCPA and range, a raised-cosine
    bump in relative bearing and an ascending ramp for relative speed.
    """

    a_cpa: float = 0.4
    a_theta: float = 0.25
    a_r: float = 0.2
    a_v: float = 0.15
    dcpa: tuple[float, float] = (20.0, 200.0)
    tcpa: tuple[float, float] = (0.0, 600.0)
    rng: tuple[float, float] = (20.0, 150.0)
    speed: tuple[float, float] = (0.0, 1.2)
    theta_width: float = math.pi

    def __post_init__(self) -> None:
        ws = (self.a_cpa, self.a_theta, self.a_r, self.a_v)
        if min(ws) < 0 or abs(sum(ws) - 1.0) > 1e-9:
            raise ConfigurationError("CRI weights must be non-negative and sum to 1")
        for lo, hi in (self.dcpa, self.tcpa, self.rng, self.speed):
            if not hi > lo:
                raise ConfigurationError("membership ramps need hi > lo")

    def memberships(self, dcpa: float, tcpa: float, theta: float, r: float, v: float
                    ) -> tuple[float, float, float, float, float]:
        phase = min(abs(float(theta)) / self.theta_width, 1.0)
        return (
            ramp_down(dcpa, *self.dcpa),
            ramp_down(tcpa, *self.tcpa),
            0.5 * (1.0 + math.cos(math.pi * phase)),
            ramp_down(r, *self.rng),
            ramp_up(v, *self.speed),
        )


def cri_from_memberships(u_dcpa, u_tcpa, u_theta, u_r, u_v, w: CriWeights = CriWeights()) -> float:
    clip = lambda z: min(max(float(z), 0.0), 1.0)  # noqa: E731
    val = (w.a_cpa * math.sqrt(clip(u_dcpa) * clip(u_tcpa)) + w.a_theta * clip(u_theta)
           + w.a_r * clip(u_r) + w.a_v * clip(u_v))
    return min(max(val, 0.0), 1.0)


def cri(dcpa: float, tcpa: float, theta: float, r: float, v: float,
        weights: CriWeights = CriWeights()) -> float:
    return cri_from_memberships(*weights.memberships(dcpa, tcpa, theta, r, v), weights)


def sector_risk(pose, nu, world: WorldSnapshot, scan: LidarScan, cfg: LidarConfig = LidarConfig(),
                weights: CriWeights = CriWeights()) -> np.ndarray:
    """Maximum CRI per LiDAR sector.

    Targets are every detected circle, evaluated at the closest hit point of
    the rays that see it; the target's own velocity is taken from the world.
    """
    risk = np.zeros(cfg.n_sector)
    hits = scan.hit >= 0
    if not np.any(hits):
        return risk
    psi = float(pose[2])
    c, s = math.cos(psi), math.sin(psi)
    v_own = np.array([c * nu[0] - s * nu[1], s * nu[0] + c * nu[1]])
    p_own = np.array([pose[0], pose[1]], dtype=float)
    sectors = np.arange(cfg.n_ray) // cfg.rays_per_sector
    for j in np.unique(scan.hit[hits]):
        rays = np.flatnonzero(scan.hit == j)
        i = rays[np.argmin(scan.ranges[rays])]
        d = scan.ranges[i]
        p_t = detection_point(pose, scan.angles[i], d)
        v_t = world.velocities[j]
        dcpa, tcpa = cpa(p_own, v_own, p_t, v_t)
        rel_speed = float(np.linalg.norm(v_t - v_own))
        value = cri(dcpa, tcpa, scan.angles[i], d, rel_speed, weights)
        sec = sectors[i]
        risk[sec] = max(risk[sec], value)
    return risk


def ray_closing_speeds(pose, world: WorldSnapshot, scan: LidarScan) -> np.ndarray:
    """Speed at which the object hit by each ray moves toward the vessel."""
    out = np.zeros(len(scan.ranges))
    hits = scan.hit >= 0
    if not np.any(hits):
        return out
    a = scan.angles[hits] + float(pose[2])
    dirs = np.stack([np.cos(a), np.sin(a)], axis=1)
    out[hits] = -np.sum(world.velocities[scan.hit[hits]] * dirs, axis=1)
    return out
