"""3-DOF surge-sway-yaw model of the Cybership II model ship.

State vectors are laid out as ``x = [north, east, psi, u, v, r]`` and the
control input as ``u = [F_u, T_r]`` (surge force, yaw moment). Sway is not
actuated. Every function here accepts leading batch dimensions so the same
code serves the simulator, the optimizer's finite-difference Jacobians and
the terminal-set verification rollouts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from psfnav.errors import ConfigurationError, IntegrationError


@dataclass(frozen=True)
class HydroParams:
    """Rigid-body, added-mass and damping coefficients (SI units)."""

    m: float = 23.8
    x_g: float = 0.046
    I_z: float = 1.760
    X_udot: float = -2.0
    Y_vdot: float = -10.0
    Y_rdot: float = 0.0
    N_vdot: float = 0.0
    N_rdot: float = -1.0
    X_u: float = -0.7225
    X_uu: float = -1.3274  # X_|u|u
    X_uuu: float = -5.8664
    Y_v: float = -0.8612
    Y_vv: float = -36.2823  # Y_|v|v
    Y_rv: float = -0.01  # Y_|r|v
    Y_r: float = 0.1079
    Y_vr: float = -0.01  # Y_|v|r
    Y_rr: float = -0.02  # Y_|r|r
    N_v: float = 0.1052
    N_vv: float = 5.0437  # N_|v|v
    N_r: float = -0.5
    N_vr: float = -0.001  # N_|v|r
    N_rr: float = 0.005  # N_|r|r
    N_rv: float = -0.001  # N_|r|v

    def __post_init__(self) -> None:
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ConfigurationError(f"hydro parameter {f.name} is not finite")
        if self.m <= 0:
            raise ConfigurationError("mass must be positive")
        if self.I_z <= 0:
            raise ConfigurationError("yaw inertia must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "HydroParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown hydro parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def from_json(cls, path: str | Path) -> "HydroParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw: float) -> "HydroParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class RigidBodyMatrices:
    M: np.ndarray
    M_inv: np.ndarray

    @property
    def m11(self) -> float:
        return float(self.M[0, 0])

    @property
    def m22(self) -> float:
        return float(self.M[1, 1])

    @property
    def m23(self) -> float:
        return float(self.M[1, 2])

    @property
    def m32(self) -> float:
        return float(self.M[2, 1])

    @property
    def m33(self) -> float:
        return float(self.M[2, 2])


def build_matrices(params: HydroParams) -> RigidBodyMatrices:
    """Assemble the mass matrix (rigid body plus added mass) and its inverse.

    The sway-yaw block is inverted in closed form so the ``k_ij`` entries used
    by the disturbance observer are exact.
    """
    p = params
    m11 = p.m - p.X_udot
    m22 = p.m - p.Y_vdot
    m23 = p.m * p.x_g - p.Y_rdot
    m32 = p.m * p.x_g - p.N_vdot
    m33 = p.I_z - p.N_rdot
    det = m22 * m33 - m23 * m32
    if m11 == 0.0 or abs(det) < 1e-12:
        raise ConfigurationError("mass matrix is singular")
    M = np.array([[m11, 0.0, 0.0], [0.0, m22, m23], [0.0, m32, m33]])
    M_inv = np.array(
        [
            [1.0 / m11, 0.0, 0.0],
            [0.0, m33 / det, -m23 / det],
            [0.0, -m32 / det, m22 / det],
        ]
    )
    M.setflags(write=False)
    M_inv.setflags(write=False)
    return RigidBodyMatrices(M=M, M_inv=M_inv)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rotation(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def coriolis(mat: RigidBodyMatrices, nu) -> np.ndarray:
    """Coriolis-centripetal matrix C(nu); skew-symmetric by construction."""
    u, v, r = (float(c) for c in nu)
    c13 = -mat.m11 * v - mat.m23 * r
    c23 = mat.m11 * u
    return np.array([[0.0, 0.0, c13], [0.0, 0.0, c23], [-c13, -c23, 0.0]])


def damping(params: HydroParams, nu) -> np.ndarray:
    p = params
    u, v, r = (float(c) for c in nu)
    au, av, ar = abs(u), abs(v), abs(r)
    d11 = -p.X_u - p.X_uu * au - p.X_uuu * u * u
    d22 = -p.Y_v - p.Y_vv * av - p.Y_rv * ar
    d23 = -p.Y_r - p.Y_vr * av - p.Y_rr * ar
    d32 = -p.N_v - p.N_vv * av - p.N_rv * ar
    d33 = -p.N_r - p.N_vr * av - p.N_rr * ar
    return np.array([[d11, 0.0, 0.0], [0.0, d22, d23], [0.0, d32, d33]])


def linear_damping(params: HydroParams) -> np.ndarray:
    return damping(params, (0.0, 0.0, 0.0))


def allocate(u) -> np.ndarray:
    """Map the 2-D control input (F_u, T_r) to generalized forces."""
    u = np.asarray(u, dtype=float)
    tau = np.zeros(u.shape[:-1] + (3,))
    tau[..., 0] = u[..., 0]
    tau[..., 2] = u[..., 1]
    return tau


def kinematics_ode(psi, nu) -> np.ndarray:
    """eta_dot = R(psi) nu, batched over leading dimensions."""
    psi = np.asarray(psi, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    u, v, r = nu[..., 0], nu[..., 1], nu[..., 2]
    return np.stack([c * u - s * v, s * u + c * v, r * np.ones_like(c)], axis=-1)


class VesselModel:
    """Precomputed matrices plus the batched right-hand side of the ODE."""

    def __init__(self, params: HydroParams | None = None):
        self.params = params or HydroParams()
        self.mat = build_matrices(self.params)
        p = self.params
        self._k = self.mat.M_inv
        self._m11 = self.mat.m11
        self._m23 = self.mat.m23
        self._lin = (-p.X_u, -p.Y_v, -p.Y_r, -p.N_v, -p.N_r)
        k = self._k
        self._scalar = (float(k[0, 0]), float(k[1, 1]), float(k[1, 2]), float(k[2, 1]),
                        float(k[2, 2]), float(self._m11), float(self._m23), self._lin,
                        (p.X_uu, p.X_uuu, p.Y_vv, p.Y_rv, p.Y_vr, p.Y_rr, p.N_vv, p.N_rv,
                         p.N_vr, p.N_rr))

    def dissipative_forces(self, nu) -> np.ndarray:
        """(C(nu) + D(nu)) nu, batched."""
        p = self.params
        nu = np.asarray(nu, dtype=float)
        u, v, r = nu[..., 0], nu[..., 1], nu[..., 2]
        au, av, ar = np.abs(u), np.abs(v), np.abs(r)
        d11 = -p.X_u - p.X_uu * au - p.X_uuu * u * u
        d22 = -p.Y_v - p.Y_vv * av - p.Y_rv * ar
        d23 = -p.Y_r - p.Y_vr * av - p.Y_rr * ar
        d32 = -p.N_v - p.N_vv * av - p.N_rv * ar
        d33 = -p.N_r - p.N_vr * av - p.N_rr * ar
        c13 = -self._m11 * v - self._m23 * r
        c23 = self._m11 * u
        f0 = c13 * r + d11 * u
        f1 = c23 * r + d22 * v + d23 * r
        f2 = -c13 * u - c23 * v + d32 * v + d33 * r
        return np.stack([f0, f1, f2], axis=-1)

    def dynamics_ode(self, nu, tau, tau_d=None) -> np.ndarray:
        """nu_dot = M^-1 (-C(nu) nu - D(nu) nu + tau + tau_d)."""
        rhs = np.asarray(tau, dtype=float) - self.dissipative_forces(nu)
        if tau_d is not None:
            rhs = rhs + np.asarray(tau_d, dtype=float)
        return rhs @ self._k.T

    def ode(self, x, u, tau_d=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        nu = x[..., 3:6]
        eta_dot = kinematics_ode(x[..., 2], nu)
        nu_dot = self.dynamics_ode(nu, allocate(u), tau_d)
        return np.concatenate([eta_dot, nu_dot], axis=-1)

    def rk4(self, x, u, dt: float, tau_d=None) -> np.ndarray:
        """One classical Runge-Kutta step; heading is left unwrapped."""
        k1 = self.ode(x, u, tau_d)
        k2 = self.ode(x + 0.5 * dt * k1, u, tau_d)
        k3 = self.ode(x + 0.5 * dt * k2, u, tau_d)
        k4 = self.ode(x + dt * k3, u, tau_d)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def rk4_single(self, x, u, dt: float, tau_d=(0.0, 0.0, 0.0)) -> tuple[float, ...]:
        """:meth:`rk4` for one state on plain floats.

        Numpy dispatch dominates for single 6-vectors; sequential rollouts use
        this path. Agrees with :meth:`rk4` to rounding.
        """
        k11, k22, k23, k32, k33, m11, m23, lin, quad = self._scalar
        Xu, Yv, Yr, Nv, Nr = lin
        Xuu, Xuuu, Yvv, Yrv, Yvr, Yrr, Nvv, Nrv, Nvr, Nrr = quad
        F = float(u[0]) + float(tau_d[0])
        Y = float(tau_d[1])
        T = float(u[1]) + float(tau_d[2])
        cos, sin = math.cos, math.sin

        def f(psi, su, sv, sr):
            au, av, ar = abs(su), abs(sv), abs(sr)
            c13 = -m11 * sv - m23 * sr
            c23 = m11 * su
            r0 = F - (c13 * sr + (Xu - Xuu * au - Xuuu * su * su) * su)
            r1 = Y - (c23 * sr + (Yv - Yvv * av - Yrv * ar) * sv + (Yr - Yvr * av - Yrr * ar) * sr)
            r2 = T - (-c13 * su - c23 * sv + (Nv - Nvv * av - Nrv * ar) * sv
                      + (Nr - Nvr * av - Nrr * ar) * sr)
            c, s = cos(psi), sin(psi)
            return (c * su - s * sv, s * su + c * sv, sr,
                    k11 * r0, k22 * r1 + k23 * r2, k32 * r1 + k33 * r2)

        x, y, psi, su, sv, sr = (float(v) for v in x)
        h = 0.5 * dt
        a = f(psi, su, sv, sr)
        b = f(psi + h * a[2], su + h * a[3], sv + h * a[4], sr + h * a[5])
        c = f(psi + h * b[2], su + h * b[3], sv + h * b[4], sr + h * b[5])
        d = f(psi + dt * c[2], su + dt * c[3], sv + dt * c[4], sr + dt * c[5])
        w = dt / 6.0
        return tuple(x0 + w * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i])
                     for i, x0 in enumerate((x, y, psi, su, sv, sr)))

    def step(self, x, u, dt: float, tau_d=None) -> np.ndarray:
        """Advance the plant by ``dt`` and re-wrap the heading."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        nxt = self.rk4(np.asarray(x, dtype=float), np.asarray(u, dtype=float), dt, tau_d)
        if not np.all(np.isfinite(nxt)):
            raise IntegrationError(f"non-finite state after integration: {nxt}")
        nxt[..., 2] = wrap_angle(nxt[..., 2])
        return nxt

    def max_surge_speed(self, F_max: float) -> float:
        return max_surge_speed(self.params, F_max)


def dynamics_ode(params: HydroParams, nu, tau, tau_d=None) -> np.ndarray:
    return VesselModel(params).dynamics_ode(nu, tau, tau_d)


def step(params: HydroParams, x, u, tau_d, dt: float) -> np.ndarray:
    return VesselModel(params).step(x, u, dt, tau_d)


def max_surge_speed(params: HydroParams, F_max: float, tol: float = 1e-13) -> float:
    """Positive root of -X_u u - X_|u|u u^2 - X_uuu u^3 = F_max (bisection)."""
    if F_max < 0:
        raise ConfigurationError("maximum surge force must be non-negative")
    if F_max == 0:
        return 0.0
    p = params

    def resid(u: float) -> float:
        return -p.X_u * u - p.X_uu * u * u - p.X_uuu * u**3 - F_max

    hi = 1.0
    while resid(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise ConfigurationError("no positive steady-state surge speed")
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if resid(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
