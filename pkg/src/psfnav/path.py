"""Reference paths: centripetal Catmull-Rom curves tabulated by arc length."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from psfnav.errors import ConfigurationError
from psfnav.vessel import wrap_angle

RESOLUTION = 0.1


def _catmull_rom(points: np.ndarray, samples_per_segment: int) -> np.ndarray:
    """Centripetal (alpha = 0.5) Catmull-Rom spline through all points."""
    if len(points) == 2:
        t = np.linspace(0.0, 1.0, samples_per_segment + 1)[:, None]
        return points[0] + t * (points[1] - points[0])
    # mirrored end points give the end segments a natural tangent
    ext = np.vstack([2 * points[0] - points[1], points, 2 * points[-1] - points[-2]])
    out = []
    for i in range(len(points) - 1):
        p0, p1, p2, p3 = ext[i], ext[i + 1], ext[i + 2], ext[i + 3]
        t0 = 0.0
        t1 = t0 + math.sqrt(max(np.linalg.norm(p1 - p0), 1e-12))
        t2 = t1 + math.sqrt(max(np.linalg.norm(p2 - p1), 1e-12))
        t3 = t2 + math.sqrt(max(np.linalg.norm(p3 - p2), 1e-12))
        t = np.linspace(t1, t2, samples_per_segment + 1)[:, None]
        if i < len(points) - 2:
            t = t[:-1]
        a1 = (t1 - t) / (t1 - t0) * p0 + (t - t0) / (t1 - t0) * p1
        a2 = (t2 - t) / (t2 - t1) * p1 + (t - t1) / (t2 - t1) * p2
        a3 = (t3 - t) / (t3 - t2) * p2 + (t - t2) / (t3 - t2) * p3
        b1 = (t2 - t) / (t2 - t0) * a1 + (t - t0) / (t2 - t0) * a2
        b2 = (t3 - t) / (t3 - t1) * a2 + (t - t1) / (t3 - t1) * a3
        out.append((t2 - t) / (t2 - t1) * b1 + (t - t1) / (t2 - t1) * b2)
    return np.vstack(out)


@dataclass(frozen=True)
class PathGeometry:
    cte: float  # signed, positive to starboard of the path direction
    course_error: float
    progress: float
    closest: np.ndarray
    s: float
    path_angle: float


class Path:
    """Smooth curve through ``waypoints`` (north, east), resampled every 0.1 m."""

    def __init__(self, waypoints, resolution: float = RESOLUTION):
        wp = np.asarray(waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
            raise ConfigurationError("a path needs at least two 2-D waypoints")
        if np.any(np.linalg.norm(np.diff(wp, axis=0), axis=1) < 1e-9):
            raise ConfigurationError("consecutive waypoints must be distinct")
        self.waypoints = wp
        seg_len = float(np.sum(np.linalg.norm(np.diff(wp, axis=0), axis=1)))
        per_seg = max(int(20 * seg_len / (len(wp) - 1) / resolution), 50)
        dense = _catmull_rom(wp, per_seg)
        ds = np.linalg.norm(np.diff(dense, axis=0), axis=1)
        s_dense = np.concatenate([[0.0], np.cumsum(ds)])
        self.length = float(s_dense[-1])
        n = max(int(math.ceil(self.length / resolution)), 1)
        self.s = np.linspace(0.0, self.length, n + 1)
        self.points = np.column_stack([np.interp(self.s, s_dense, dense[:, 0]),
                                       np.interp(self.s, s_dense, dense[:, 1])])
        d = np.gradient(self.points, axis=0)
        self.angles = np.arctan2(d[:, 1], d[:, 0])

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def goal(self) -> np.ndarray:
        return self.points[-1]

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(float(s), 0.0), self.length)
        return np.array([np.interp(s, self.s, self.points[:, 0]),
                         np.interp(s, self.s, self.points[:, 1])])

    def angle_at(self, s: float) -> float:
        i = int(np.clip(np.searchsorted(self.s, s), 0, len(self.s) - 1))
        return float(self.angles[i])

    def project(self, position) -> tuple[float, np.ndarray, float]:
        """Closest point on the tabulated polyline: (arc length, point, tangent angle)."""
        p = np.asarray(position, dtype=float)[:2]
        a, b = self.points[:-1], self.points[1:]
        ab = b - a
        L2 = np.maximum(np.sum(ab * ab, axis=1), 1e-18)
        t = np.clip(np.sum((p - a) * ab, axis=1) / L2, 0.0, 1.0)
        proj = a + t[:, None] * ab
        d2 = np.sum((proj - p) ** 2, axis=1)
        i = int(np.argmin(d2))
        s = float(self.s[i] + t[i] * (self.s[i + 1] - self.s[i]))
        return s, proj[i], float(math.atan2(ab[i, 1], ab[i, 0]))

    def geometry(self, position, psi: float = 0.0, nu=None) -> PathGeometry:
        """Cross-track error, course error and progress of a vessel at ``position``.

        The course is the direction of the velocity over ground when the vessel
        moves, otherwise its heading.
        """
        s, c, ang = self.project(position)
        p = np.asarray(position, dtype=float)[:2]
        normal = np.array([-math.sin(ang), math.cos(ang)])
        # distance to the closest point, signed by the side of the local tangent;
        # a plain normal offset undercounts when the closest point is a vertex
        side = float((p - c) @ normal)
        cte = math.copysign(float(np.linalg.norm(p - c)), side)
        course = psi
        if nu is not None and math.hypot(nu[0], nu[1]) > 1e-6:
            course = psi + math.atan2(nu[1], nu[0])
        return PathGeometry(cte=cte, course_error=wrap_angle(course - ang),
                            progress=s / self.length, closest=c, s=s, path_angle=ang)

    def to_dict(self) -> dict:
        return {"waypoints": self.waypoints.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Path":
        return cls(data["waypoints"])
