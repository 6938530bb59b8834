"""Offline synthesis of the terminal control-invariant ellipsoid.

Pipeline: equilibrium -> linearization of the linear-damping model ->
polytopic state/input constraints -> LQR feedback plus the largest Lyapunov
level set inside the polytope -> sampled rollouts of the full nonlinear model,
shrinking the ellipsoid until no sample leaves it.

States are ordered ``[x, y, psi, u, v, r]``; ``xbar`` denotes the deviation
from the equilibrium and ``ubar`` the input deviation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize

from psfnav.errors import ConfigurationError, SynthesisError, VerificationError
from psfnav.vessel import HydroParams, VesselModel, max_surge_speed

log = logging.getLogger(__name__)

NX, NU = 6, 2


@dataclass(frozen=True)
class Equilibrium:
    x_e: np.ndarray
    u_e: np.ndarray


def compute_equilibrium(params: HydroParams, F_u_max: float) -> Equilibrium:
    """Steady cruise at full surge thrust."""
    u_max = max_surge_speed(params, F_u_max)
    return Equilibrium(x_e=np.array([0.0, 0.0, 0.0, u_max, 0.0, 0.0]),
                       u_e=np.array([float(F_u_max), 0.0]))


def rest_equilibrium() -> Equilibrium:
    return Equilibrium(x_e=np.zeros(NX), u_e=np.zeros(NU))


@dataclass(frozen=True)
class LinearizedModel:
    A: np.ndarray
    B: np.ndarray
    eq: Equilibrium


def simplified_ode(model: VesselModel, x, u) -> np.ndarray:
    """Vessel ODE with the nonlinear damping terms dropped (linear D_L only)."""
    p = model.params
    x = np.asarray(x, dtype=float)
    u_in = np.asarray(u, dtype=float)
    psi = x[..., 2]
    su, sv, sr = x[..., 3], x[..., 4], x[..., 5]
    c, s = np.cos(psi), np.sin(psi)
    m11, m23 = model.mat.m11, model.mat.m23
    c13 = -m11 * sv - m23 * sr
    c23 = m11 * su
    f0 = c13 * sr - p.X_u * su
    f1 = c23 * sr - p.Y_v * sv - p.Y_r * sr
    f2 = -c13 * su - c23 * sv - p.N_v * sv - p.N_r * sr
    rhs = np.stack([u_in[..., 0] - f0, -f1, u_in[..., 1] - f2], axis=-1)
    nu_dot = rhs @ model.mat.M_inv.T
    eta_dot = np.stack([c * su - s * sv, s * su + c * sv, sr], axis=-1)
    return np.concatenate([eta_dot, nu_dot], axis=-1)


def linearize(params: HydroParams, eq: Equilibrium) -> LinearizedModel:
    """Analytic Jacobians of :func:`simplified_ode` at the equilibrium."""
    model = VesselModel(params)
    m11, m23 = model.mat.m11, model.mat.m23
    psi = eq.x_e[2]
    u, v, r = eq.x_e[3:]
    c, s = math.cos(psi), math.sin(psi)
    A = np.zeros((NX, NX))
    A[0, 2] = -s * u - c * v
    A[1, 2] = c * u - s * v
    A[0:3, 3:6] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    # d(C(nu) nu)/d nu for the 3-DOF Coriolis structure
    JC = np.array(
        [
            [0.0, -m11 * r, -m11 * v - 2.0 * m23 * r],
            [m11 * r, 0.0, m11 * u],
            [m23 * r, 0.0, m23 * u],
        ]
    )
    DL = np.array([[-params.X_u, 0.0, 0.0], [0.0, -params.Y_v, -params.Y_r],
                   [0.0, -params.N_v, -params.N_r]])
    A[3:6, 3:6] = -model.mat.M_inv @ (JC + DL)
    B = np.zeros((NX, NU))
    B[3:6, :] = model.mat.M_inv @ np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    return LinearizedModel(A=A, B=B, eq=eq)


@dataclass(frozen=True)
class TerminalBounds:
    """Terminal feasible set: position buffer, heading bound, velocity and input boxes."""

    d_f: float = 5.0
    psi_max: float = math.pi / 4
    nu_lb: tuple[float, float, float] = (-0.2, -0.3, -0.3)
    nu_ub: tuple[float, float, float] | None = None  # None: (u_max, 0.3, 0.3)
    u_lb: tuple[float, float] = (-0.2, -0.15)
    u_ub: tuple[float, float] = (2.0, 0.15)

    def resolved_nu_ub(self, u_max: float) -> tuple[float, float, float]:
        return self.nu_ub if self.nu_ub is not None else (u_max, 0.3, 0.3)

    def to_dict(self, u_max: float) -> dict:
        return {"d_f": self.d_f, "psi_max": self.psi_max, "nu_lb": list(self.nu_lb),
                "nu_ub": list(self.resolved_nu_ub(u_max)), "u_lb": list(self.u_lb),
                "u_ub": list(self.u_ub)}


@dataclass(frozen=True)
class PolytopeConstraints:
    """Rows ``H xbar <= h_shift`` and ``G ubar <= g_shift`` around the equilibrium."""

    H: np.ndarray
    h: np.ndarray
    G: np.ndarray
    g: np.ndarray
    h_shift: np.ndarray
    g_shift: np.ndarray


def build_polytope(d_f: float, nu_lb, nu_ub, psi_max: float, u_lb, u_ub,
                   eq: Equilibrium | None = None) -> PolytopeConstraints:
    """Inscribed-square position bound, heading/velocity boxes and the input box."""
    if not d_f > 0:
        raise ConfigurationError("d_f must be positive")
    eq = eq or rest_equilibrium()
    half = d_f / math.sqrt(2.0)
    H, h = [], []
    ub = [half, half, psi_max, *nu_ub]
    lb = [-half, -half, -psi_max, *nu_lb]
    for i in range(NX):
        e = np.zeros(NX)
        e[i] = 1.0
        H += [e, -e]
        h += [ub[i], -lb[i]]
    G, g = [], []
    for j in range(NU):
        e = np.zeros(NU)
        e[j] = 1.0
        G += [e, -e]
        g += [u_ub[j], -u_lb[j]]
    H, h, G, g = np.array(H), np.array(h), np.array(G), np.array(g)
    if np.any(np.array(ub) < np.array(lb)) or np.any(np.array(u_ub) < np.array(u_lb)):
        raise ConfigurationError("terminal polytope has an empty interior")
    return PolytopeConstraints(H=H, h=h, G=G, g=g, h_shift=h - H @ eq.x_e, g_shift=g - G @ eq.u_e)


@dataclass
class TerminalSet:
    P_f: np.ndarray
    K: np.ndarray
    d_f: float
    x_e: np.ndarray
    u_e: np.ndarray
    dt: float
    verified: bool = False
    n_samples: int = 0
    shrink_iterations: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def P_f_nu(self) -> np.ndarray:
        return extract_pf_nu(self)

    def value(self, xbar) -> np.ndarray:
        xbar = np.asarray(xbar, dtype=float)
        return np.einsum("...i,ij,...j->...", xbar, self.P_f, xbar)

    def control(self, xbar, u_lb, u_ub) -> np.ndarray:
        """Terminal law ``clamp(u_e + K xbar)``."""
        return np.clip(self.u_e + np.asarray(xbar) @ self.K.T, u_lb, u_ub)

    def to_dict(self) -> dict:
        return {
            "P_f": self.P_f.tolist(),
            "P_f_nu": extract_pf_nu(self).tolist(),
            "K": self.K.tolist(),
            "d_f": self.d_f,
            "x_e": self.x_e.tolist(),
            "u_e": self.u_e.tolist(),
            "dt": self.dt,
            "verified": self.verified,
            "n_samples": self.n_samples,
            "shrink_iterations": self.shrink_iterations,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TerminalSet":
        return cls(
            P_f=np.array(d["P_f"], dtype=float),
            K=np.array(d["K"], dtype=float),
            d_f=float(d["d_f"]),
            x_e=np.array(d["x_e"], dtype=float),
            u_e=np.array(d["u_e"], dtype=float),
            dt=float(d["dt"]),
            verified=bool(d["verified"]),
            n_samples=int(d["n_samples"]),
            shrink_iterations=int(d.get("shrink_iterations", 0)),
            meta=dict(d.get("meta", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TerminalSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def extract_pf_nu(term: TerminalSet) -> np.ndarray:
    P = term.P_f[3:6, 3:6]
    return 0.5 * (P + P.T)


def discretize(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization via the augmented matrix exponential."""
    n, m = B.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    E = scipy.linalg.expm(aug * dt)
    return E[:n, :n], E[:n, n:]


def conserved_modes(Ad: np.ndarray, Bd: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Left vectors ``w`` with ``w' Ad = w'`` and ``w' Bd = 0`` (columns).

    Such a ``w`` is an uncontrollable marginal mode: ``w' xbar`` is conserved
    by every linear feedback. At rest the underactuated vessel has one, a
    combination of lateral offset, heading and sway/yaw velocity.
    """
    n = Ad.shape[0]
    M = np.hstack([Ad - np.eye(n), Bd])
    return scipy.linalg.null_space(M.T, rcond=tol)


def _level_set_scale(P0: np.ndarray, K: np.ndarray, poly: PolytopeConstraints) -> float:
    rows = np.vstack([poly.H, poly.G @ K])
    rhs = np.concatenate([poly.h_shift, poly.g_shift])
    if np.any(rhs <= 0):
        raise SynthesisError(
            "synthesis failed at scaling: equilibrium lies on or outside the constraint boundary")
    spread = np.einsum("ij,jk,ik->i", rows, np.linalg.inv(P0), rows)
    return float(np.min(rhs**2 / spread))


def synthesize(model: LinearizedModel, poly: PolytopeConstraints, dt: float, d_f: float,
               Q=None, R=None) -> TerminalSet:
    """LQR feedback and the largest Lyapunov level set inside the polytope.

    Marginal uncontrollable modes (see :func:`conserved_modes`) are split off:
    the LQR and the Lyapunov matrix live on the invariant complement, and the
    conserved coordinates get a quadratic weight chosen to maximize the
    ellipsoid volume. The result is non-increasing along the linear closed
    loop and strictly decreasing on the controllable part.
    """
    Q = np.diag([1.0, 1.0, 1.0, 10.0, 10.0, 10.0]) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(NU) if R is None else np.asarray(R, dtype=float)
    Ad, Bd = discretize(model.A, model.B, dt)
    if not np.any(Bd):
        raise SynthesisError("synthesis failed at LQR: input matrix is zero, pair not stabilizable")
    W = conserved_modes(Ad, Bd)
    k = W.shape[1]
    if k:
        # E spans directions that are rest points of the linear model and
        # carry the conserved coordinates: A E = 0, W' E = I
        N0 = scipy.linalg.null_space(model.A, rcond=1e-9)
        WN = W.T @ N0
        if N0.shape[1] < k or np.linalg.matrix_rank(WN) < k:
            raise SynthesisError("synthesis failed at decomposition: marginal mode is not semisimple")
        E = N0 @ np.linalg.pinv(WN)
        Pi = np.eye(NX) - E @ W.T
        V = scipy.linalg.null_space(W.T)
    else:
        Pi = np.eye(NX)
        V = np.eye(NX)
    As, Bs = V.T @ Ad @ V, V.T @ Bd
    Qs = V.T @ Q @ V
    try:
        Ps = scipy.linalg.solve_discrete_are(As, Bs, Qs, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SynthesisError(f"synthesis failed at LQR: {exc}") from exc
    Ks = -np.linalg.solve(R + Bs.T @ Ps @ Bs, Bs.T @ Ps @ As)
    Acl = As + Bs @ Ks
    if np.max(np.abs(np.linalg.eigvals(Acl))) >= 1.0:
        raise SynthesisError("synthesis failed at LQR: closed loop is not stable")
    P0s = scipy.linalg.solve_discrete_lyapunov(Acl.T, Qs + Ks.T @ R @ Ks)
    P0s = 0.5 * (P0s + P0s.T)
    if np.min(np.linalg.eigvalsh(P0s)) <= 0:
        raise SynthesisError("synthesis failed at Lyapunov: P is not positive definite")
    K = Ks @ V.T @ Pi
    Pc = Pi.T @ V @ P0s @ V.T @ Pi

    def scaled(log_beta: float) -> np.ndarray:
        P0 = Pc + math.exp(log_beta) * (W @ W.T) if k else Pc
        return P0 / _level_set_scale(P0, K, poly)

    if k:
        res = scipy.optimize.minimize_scalar(
            lambda lb: np.linalg.slogdet(scaled(lb))[1], bounds=(-12.0, 12.0),
            method="bounded", options={"xatol": 1e-6})
        P_f = scaled(float(res.x))
    else:
        P_f = scaled(0.0)
    P_f = 0.5 * (P_f + P_f.T)
    if np.min(np.linalg.eigvalsh(P_f)) <= 0:
        raise SynthesisError("synthesis failed at scaling: P_f is not positive definite")
    return TerminalSet(P_f=P_f, K=K, d_f=d_f, x_e=model.eq.x_e.copy(),
                       u_e=model.eq.u_e.copy(), dt=dt)


def boundary_samples(P: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points uniformly distributed in direction on the surface xbar' P xbar = 1."""
    z = rng.standard_normal((n, P.shape[0]))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    L = np.linalg.cholesky(P)
    # xbar = L^-T z gives xbar' P xbar = z' z = 1
    return scipy.linalg.solve_triangular(L.T, z.T, lower=False).T


def rollout_terminal_law(term: TerminalSet, model: VesselModel, xbar0: np.ndarray, dt: float,
                         horizon: float, u_lb, u_ub) -> np.ndarray:
    """Closed-loop rollouts of the full nonlinear model; returns (steps+1, n, 6)."""
    steps = int(round(horizon / dt))
    x = term.x_e + np.asarray(xbar0, dtype=float)
    traj = [x]
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            u = term.control(x - term.x_e, u_lb, u_ub)
            x = model.rk4(x, u, dt)
            traj.append(x)
    return np.array(traj)


def verify_nonlinear(term: TerminalSet, params: HydroParams, dt: float, n_samples: int = 10_000,
                     horizon: float = 60.0, u_lb=(-0.2, -0.15), u_ub=(2.0, 0.15), seed: int = 0,
                     shrink: float = 0.9, max_iter: int = 40, tol: float = 1e-9) -> TerminalSet:
    """Shrink the ellipsoid until sampled nonlinear rollouts never leave it.

    Every iteration draws fresh boundary samples of the current ellipsoid; the
    set is returned with ``verified=True`` only when all samples stay inside
    for the whole horizon.
    """
    model = VesselModel(params)
    rng = np.random.default_rng(seed)
    P = term.P_f.copy()
    for it in range(max_iter + 1):
        cand = TerminalSet(P_f=P, K=term.K, d_f=term.d_f, x_e=term.x_e, u_e=term.u_e, dt=term.dt)
        xs = boundary_samples(P, n_samples, rng)
        traj = rollout_terminal_law(cand, model, xs, dt, horizon, u_lb, u_ub)
        with np.errstate(over="ignore", invalid="ignore"):
            vals = cand.value(traj - term.x_e)
        worst = vals.max(axis=0)
        # a diverged (non-finite) rollout counts as an exit
        exits = ~(worst <= 1.0 + tol)
        if not np.any(exits):
            log.info("terminal set verified after %d shrink iterations", it)
            return TerminalSet(P_f=P, K=term.K, d_f=term.d_f, x_e=term.x_e, u_e=term.u_e,
                               dt=term.dt, verified=True, n_samples=n_samples,
                               shrink_iterations=it, meta=dict(term.meta))
        log.info("iteration %d: %d/%d samples left the ellipsoid (max value %.6f)",
                 it, int(exits.sum()), n_samples, float(worst.max()))
        P = P / shrink
    raise VerificationError(
        f"verification failed: samples still leave the ellipsoid after {max_iter} shrinks",
        samples=xs[exits][:10])


def contained_in_polytope(term: TerminalSet, poly: PolytopeConstraints, xbar: np.ndarray,
                          atol: float = 1e-12) -> bool:
    xs = np.atleast_2d(xbar)
    ok_x = np.all(xs @ poly.H.T <= poly.h_shift + atol)
    ok_u = np.all((xs @ term.K.T) @ poly.G.T <= poly.g_shift + atol)
    return bool(ok_x and ok_u)


def params_hash(params: HydroParams) -> str:
    blob = json.dumps(params.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class SynthesisConfig:
    F_u_max: float = 2.0
    dt: float = 0.5
    bounds: TerminalBounds = TerminalBounds()
    equilibrium: str = "rest"  # or "max-surge"
    # light pose weights keep the feedback from spending input on position,
    # which leaves room for larger terminal velocities
    Q: tuple[float, ...] = (1e-4, 1e-4, 1e-3, 1.0, 1.0, 1.0)
    R: tuple[float, ...] = (0.2, 44.0)
    n_samples: int = 10_000
    horizon: float = 60.0
    seed: int = 0
    # scales the input matrix of the linearization; 0 gives an
    # unstabilizable toy that exercises the failure path
    input_gain: float = 1.0

    @classmethod
    def from_dict(cls, data: dict) -> "SynthesisConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown synthesis fields: {sorted(unknown)}")
        d = dict(data)
        if "bounds" in d:
            b = dict(d["bounds"])
            bad = set(b) - {f.name for f in fields(TerminalBounds)}
            if bad:
                raise ConfigurationError(f"unknown terminal bound fields: {sorted(bad)}")
            d["bounds"] = TerminalBounds(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in b.items()})
        for key in ("Q", "R"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if len(d.get("Q", cls.Q)) != NX or len(d.get("R", cls.R)) != NU:
            raise ConfigurationError(f"Q needs {NX} and R needs {NU} diagonal entries")
        return cls(**d)


def _meta(params: HydroParams, cfg: SynthesisConfig) -> dict:
    u_max = max_surge_speed(params, cfg.F_u_max)
    return {
        "params_sha256": params_hash(params),
        "equilibrium": cfg.equilibrium,
        "bounds": cfg.bounds.to_dict(u_max),
        "lqr_Q": list(cfg.Q),
        "lqr_R": list(cfg.R),
        "horizon": cfg.horizon,
        "seed": cfg.seed,
        "input_gain": cfg.input_gain,
    }


def synthesize_terminal_set(params: HydroParams = HydroParams(),
                            cfg: SynthesisConfig = SynthesisConfig()) -> TerminalSet:
    """Full offline pipeline; the returned set is verified or an error is raised."""
    u_max = max_surge_speed(params, cfg.F_u_max)
    if cfg.equilibrium == "rest":
        eq = rest_equilibrium()
    elif cfg.equilibrium == "max-surge":
        eq = compute_equilibrium(params, cfg.F_u_max)
    else:
        raise ConfigurationError(f"unknown equilibrium {cfg.equilibrium!r}")
    b = cfg.bounds
    lin = linearize(params, eq)
    lin = LinearizedModel(A=lin.A, B=cfg.input_gain * lin.B, eq=lin.eq)
    poly = build_polytope(b.d_f, b.nu_lb, b.resolved_nu_ub(u_max), b.psi_max, b.u_lb, b.u_ub, eq)
    term = synthesize(lin, poly, cfg.dt, b.d_f, np.diag(cfg.Q), np.diag(cfg.R))
    term = verify_nonlinear(term, params, cfg.dt, cfg.n_samples, cfg.horizon, b.u_lb, b.u_ub,
                            seed=cfg.seed)
    term.meta = _meta(params, cfg)
    return term


DEFAULT_ARTIFACT = Path(__file__).parent / "data" / "terminal_set.json"
_DEFAULT_CACHE: dict = {}


def default_terminal_set() -> TerminalSet:
    """Terminal set for the compiled-in defaults.

    Loaded from the artifact shipped with the package when its metadata matches
    the defaults, otherwise synthesized (once per process).
    """
    if "term" not in _DEFAULT_CACHE:
        term = None
        if DEFAULT_ARTIFACT.exists():
            cand = TerminalSet.load(DEFAULT_ARTIFACT)
            if cand.verified and cand.meta == _meta(HydroParams(), SynthesisConfig()):
                term = cand
        _DEFAULT_CACHE["term"] = term or synthesize_terminal_set()
    return _DEFAULT_CACHE["term"]
