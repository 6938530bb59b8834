"""Environmental disturbances and the nonlinear disturbance observer.

The generators are bounded random walks: a slowly varying sea current
(speed and direction) and a generalized force disturbance made of a drifting
component plus bounded white noise. All noise is drawn uniformly on its bound.

The observer estimates the generalized force disturbance from measured body
velocities and applied inputs; its gain matrix is chosen so that
``T @ M_inv`` equals ``sigma * diag(gammas)`` and the estimation error decays
component-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from psfnav.errors import ConfigurationError, ObserverError
from psfnav.vessel import (
    HydroParams,
    RigidBodyMatrices,
    VesselModel,
    allocate,
    linear_damping,
)


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DisturbanceLimits:
    V_c_max: float
    beta_c_max: float = np.pi
    W_Vc_max: float = 0.005
    W_betac_max: float = 0.02
    tau_d_max: np.ndarray = field(default_factory=lambda: _vec3((0.4, 0.4, 0.015)))
    w_tau1_max: np.ndarray = field(default_factory=lambda: _vec3((0.02, 0.02, 0.00075)))
    w_tau2_max: np.ndarray = field(default_factory=lambda: _vec3((0.004, 0.004, 0.00015)))

    def __post_init__(self) -> None:
        for name in ("tau_d_max", "w_tau1_max", "w_tau2_max"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        scalars = (self.V_c_max, self.beta_c_max, self.W_Vc_max, self.W_betac_max)
        if min(scalars) < 0:
            raise ConfigurationError("disturbance limits must be non-negative")
        for name in ("tau_d_max", "w_tau1_max", "w_tau2_max"):
            if np.any(getattr(self, name) < 0):
                raise ConfigurationError(f"{name} must be non-negative")

    @classmethod
    def default(cls, u_max: float, F_u_max: float = 2.0, T_r_max: float = 0.15) -> "DisturbanceLimits":
        """Current up to 20% of top speed; forces 20%/20%/10% of actuator limits.

        The white-noise amplitude is 5% and the drift rate 1%/s of the force
        bound.
        """
        tau_max = np.array([0.2 * F_u_max, 0.2 * F_u_max, 0.1 * T_r_max])
        return cls(
            V_c_max=0.2 * u_max,
            tau_d_max=tau_max,
            w_tau1_max=0.05 * tau_max,
            w_tau2_max=0.01 * tau_max,
        )

    @classmethod
    def zero(cls) -> "DisturbanceLimits":
        z = np.zeros(3)
        return cls(V_c_max=0.0, beta_c_max=0.0, W_Vc_max=0.0, W_betac_max=0.0,
                   tau_d_max=z, w_tau1_max=z, w_tau2_max=z)

    def to_dict(self) -> dict:
        return {
            "V_c_max": self.V_c_max,
            "beta_c_max": self.beta_c_max,
            "W_Vc_max": self.W_Vc_max,
            "W_betac_max": self.W_betac_max,
            "tau_d_max": self.tau_d_max.tolist(),
            "w_tau1_max": self.w_tau1_max.tolist(),
            "w_tau2_max": self.w_tau2_max.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DisturbanceLimits":
        return cls(**data)


@dataclass(frozen=True)
class CurrentState:
    V_c: float = 0.0
    beta_c: float = 0.0


@dataclass(frozen=True)
class ForceDisturbanceState:
    delta_d: np.ndarray = field(default_factory=lambda: _vec3(np.zeros(3)))
    tau_d: np.ndarray = field(default_factory=lambda: _vec3(np.zeros(3)))


def step_current(state: CurrentState, limits: DisturbanceLimits, rng: np.random.Generator,
                 dt: float) -> CurrentState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    w_v, w_b = rng.uniform(-1.0, 1.0, size=2)
    V_c = state.V_c + w_v * limits.W_Vc_max * dt
    beta = state.beta_c + w_b * limits.W_betac_max * dt
    V_c = min(max(V_c, -limits.V_c_max), limits.V_c_max)
    beta = min(max(beta, -limits.beta_c_max), limits.beta_c_max)
    return CurrentState(V_c=float(V_c), beta_c=float(beta))


def step_forces(state: ForceDisturbanceState, limits: DisturbanceLimits,
                rng: np.random.Generator, dt: float) -> ForceDisturbanceState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = rng.uniform(-1.0, 1.0, size=(2, 3))
    # the drift itself is held inside the force bound so it cannot wind up
    delta = np.clip(state.delta_d + w[0] * limits.w_tau2_max * dt,
                    -limits.tau_d_max, limits.tau_d_max)
    tau = np.clip(delta + w[1] * limits.w_tau1_max, -limits.tau_d_max, limits.tau_d_max)
    return ForceDisturbanceState(delta_d=_vec3(delta), tau_d=_vec3(tau))


def initial_disturbance(limits: DisturbanceLimits, rng: np.random.Generator
                        ) -> tuple[CurrentState, ForceDisturbanceState]:
    V_c = rng.uniform(0.0, limits.V_c_max) if limits.V_c_max > 0 else 0.0
    beta = rng.uniform(-limits.beta_c_max, limits.beta_c_max) if limits.beta_c_max > 0 else 0.0
    delta = rng.uniform(-1.0, 1.0, size=3) * limits.tau_d_max
    return (CurrentState(V_c=float(V_c), beta_c=float(beta)),
            ForceDisturbanceState(delta_d=_vec3(delta), tau_d=_vec3(delta)))


def current_force(params: HydroParams, current: CurrentState, psi: float) -> np.ndarray:
    """Body-frame drag exerted by the current, via the linear damping.

    The current velocity is rotated into the body frame and pushed through
    ``D_L``; relative-velocity hydrodynamics are not modelled.
    """
    vn = current.V_c * np.cos(current.beta_c)
    ve = current.V_c * np.sin(current.beta_c)
    c, s = np.cos(psi), np.sin(psi)
    nu_c = np.array([c * vn + s * ve, -s * vn + c * ve, 0.0])
    return linear_damping(params) @ nu_c


@dataclass(frozen=True)
class ObserverGains:
    gammas: tuple[float, float, float] = (0.1, 0.1, 0.08)


@dataclass(frozen=True)
class ObserverState:
    zeta: np.ndarray = field(default_factory=lambda: _vec3(np.zeros(3)))
    tau_hat: np.ndarray = field(default_factory=lambda: _vec3(np.zeros(3)))


def observer_gain_matrix(mat: RigidBodyMatrices, gains: ObserverGains | tuple = ObserverGains()
                         ) -> np.ndarray:
    g1, g2, g3 = gains.gammas if isinstance(gains, ObserverGains) else gains
    k = mat.M_inv
    k11, k22, k23, k32, k33 = k[0, 0], k[1, 1], k[1, 2], k[2, 1], k[2, 2]
    if k22 * k33 == 0.0 or k11 == 0.0:
        raise ConfigurationError("degenerate inverse mass matrix for observer gains")
    sigma = 1.0 - k23 * k32 / (k22 * k33)
    return np.array(
        [
            [g1 * sigma / k11, 0.0, 0.0],
            [0.0, g2 / k22, -g2 * k23 / (k22 * k33)],
            [0.0, -g3 * k32 / (k22 * k33), g3 / k33],
        ]
    )


class DisturbanceObserver:
    """Forward-Euler discretization of the nonlinear observer.

    ``step`` consumes the velocity measured at tick k and the input applied
    over [k, k+1] and returns the estimate valid at tick k together with the
    advanced internal state.
    """

    def __init__(self, model: VesselModel, gains: ObserverGains = ObserverGains()):
        self.model = model
        self.T = observer_gain_matrix(model.mat, gains)

    def estimate(self, zeta, nu) -> np.ndarray:
        return np.asarray(zeta) + self.T @ np.asarray(nu, dtype=float)

    def step(self, obs: ObserverState, nu, u, dt: float) -> ObserverState:
        return observer_step(obs, nu, u, self.model, self.T, dt)


def observer_step(obs: ObserverState, nu, u, model: VesselModel, T: np.ndarray,
                  dt: float) -> ObserverState:
    """Functional form of :meth:`DisturbanceObserver.step` with an explicit gain."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    nu = np.asarray(nu, dtype=float)
    tau_hat = obs.zeta + T @ nu
    # model-consistent sign: M nu_dot = -C nu - D nu + tau + tau_d
    accel_force = -model.dissipative_forces(nu) + allocate(u) + tau_hat
    zeta = obs.zeta - T @ (model.mat.M_inv @ accel_force) * dt
    if not (np.all(np.isfinite(zeta)) and np.all(np.isfinite(tau_hat))):
        raise ObserverError("observer state became non-finite")
    return ObserverState(zeta=_vec3(zeta), tau_hat=_vec3(tau_hat))


def replay_observer(model: VesselModel, T: np.ndarray, nus, us, dt: float,
                    zeta0=None) -> np.ndarray:
    """Recompute the estimate trajectory offline from logged velocities/inputs."""
    obs = ObserverState() if zeta0 is None else ObserverState(zeta=_vec3(zeta0))
    out = []
    for nu, u in zip(nus, us):
        obs = observer_step(obs, nu, u, model, T, dt)
        out.append(obs.tau_hat)
    return np.array(out)
