"""Predictive safety filter solved by SQP real-time iterations.

Every tick the filter builds a multiple-shooting OCP over ``N`` nodes whose
objective only penalizes the deviation of the first input from the proposed
action. Dynamics, velocity bounds, obstacle clearances and the terminal
conditions are linearized around the shifted previous solution and the
resulting convex QP is solved once (up to ``cold_sqp_iter`` times on a cold
start). Inputs are hard-bounded; every state constraint carries an L1
penalized slack so the QP is always feasible.

The QP is written in deviation variables ``dz = z - zbar`` so positions of
hundreds of metres never reach the solver directly.
"""

from __future__ import annotations

import functools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import piqp
import scipy.sparse as sp

from psfnav.errors import ConfigurationError
from psfnav.sensing import WorldSnapshot
from psfnav.terminal import TerminalSet
from psfnav.vessel import VesselModel, max_surge_speed

log = logging.getLogger(__name__)

NX, NU = 6, 2
SLACK_FAMILIES = ("velocity", "collision", "terminal_distance", "terminal_set")
STATUSES = ("optimal", "max-iters", "infeasible-soft", "fallback")


@dataclass(frozen=True)
class PsfConfig:
    N: int = 50
    dt: float = 0.5
    u_lb: tuple[float, float] = (-0.2, -0.15)
    u_ub: tuple[float, float] = (2.0, 0.15)
    n_col: int = 5
    R_avoid: float = 8.0
    d_safe: float = 5.0
    gamma_Fu: float = 1.0
    gamma_Tr: float = 0.01
    nu_lb: tuple[float, float, float] = (-0.2, -0.3, -0.3)
    nu_ub: tuple[float, float, float] | None = None  # None: (u_max, 0.3, 0.3)
    slack_weight: float = 1e4
    sqp_iter: int = 1
    cold_sqp_iter: int = 5
    sqp_tol: float = 1e-4
    qp_eps: float = 1e-7
    qp_max_iter: int = 200
    # rows are kept only for obstacles within this clearance of the warm start
    select_margin: float = 10.0
    max_rows_per_node: int = 5
    # velocity bound rows are kept where the warm start is within this
    # fraction of the admissible range from the bound
    nu_select_margin: float = 0.25
    # deviations of the filtered input below this (normalized by the input
    # range) are solver noise and the proposal is returned unchanged
    snap_tol: float = 1e-4
    slack_tol: float = 1e-5
    # a warm start whose first node is further than this from the measured
    # state (scaled units, see ``_jump``) is discarded for a cold start
    warm_jump_tol: float = 1.0
    reg_x: float = 1e-6
    reg_u: float = 1e-4

    def __post_init__(self) -> None:
        if self.N < 1 or self.dt <= 0:
            raise ConfigurationError("horizon length and step must be positive")
        if any(lo >= hi for lo, hi in zip(self.u_lb, self.u_ub)):
            raise ConfigurationError("input bounds must satisfy lb < ub")
        if min(self.R_avoid, self.d_safe) < 0 or self.slack_weight <= 0:
            raise ConfigurationError("radii must be non-negative and slack weight positive")
        if self.sqp_iter < 1 or self.cold_sqp_iter < 1:
            raise ConfigurationError("SQP iteration caps must be at least 1")

    @property
    def horizon(self) -> float:
        return self.N * self.dt

    def input_range(self) -> np.ndarray:
        return np.asarray(self.u_ub) - np.asarray(self.u_lb)

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


def cost_matrix(cfg: PsfConfig = PsfConfig()) -> np.ndarray:
    """Diagonal W normalizing each input by its admissible range."""
    rng = cfg.input_range()
    return np.diag([cfg.gamma_Fu / rng[0] ** 2, cfg.gamma_Tr / rng[1] ** 2])


def filter_cost(u0, u_L, W: np.ndarray) -> float:
    d = np.asarray(u0, dtype=float) - np.asarray(u_L, dtype=float)
    return float(d @ W @ d)


@dataclass(frozen=True)
class ObstacleSet:
    """LiDAR detection points (static) and moving hazards with constant velocity."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ship_pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ship_vel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    ship_len: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_snapshot(cls, points, snap: WorldSnapshot) -> "ObstacleSet":
        ships = snap.is_ship
        return cls(points=np.asarray(points, dtype=float).reshape(-1, 2),
                   ship_pos=snap.centers[ships], ship_vel=snap.velocities[ships],
                   ship_len=snap.radii[ships])


@dataclass(frozen=True)
class OcpInstance:
    """One tick's OCP data: obstacle centres per node and their clearance radii."""

    x0: np.ndarray
    tau_hat: np.ndarray
    centers: np.ndarray  # (N+1, K, 2)
    radii: np.ndarray  # (K,)
    family: np.ndarray  # (K,) 0 = detection point, 1 = ship
    cfg: PsfConfig
    P_nu: np.ndarray
    u_e: np.ndarray
    K_term: np.ndarray
    d_f: float
    x_e: np.ndarray
    nu_lb: np.ndarray
    nu_ub: np.ndarray


def assemble(x0, tau_hat, obstacles: ObstacleSet, cfg: PsfConfig, term: TerminalSet,
             u_max: float) -> OcpInstance:
    """Instantiate the OCP data for the current state.

    Detection points keep their position over the horizon; ships move with
    their current velocity. Obstacles that cannot be reached within the
    horizon are pruned.
    """
    x0 = np.asarray(x0, dtype=float).copy()
    N = cfg.N
    t = cfg.dt * np.arange(N + 1)
    pts = np.asarray(obstacles.points, dtype=float).reshape(-1, 2)
    reach = N * cfg.dt * u_max
    keep = np.linalg.norm(pts - x0[:2], axis=1) <= reach + cfg.R_avoid + cfg.d_safe + term.d_f
    pts = pts[keep]
    centers = [np.broadcast_to(pts, (N + 1,) + pts.shape)]
    radii = [np.full(len(pts), cfg.R_avoid + cfg.d_safe)]
    family = [np.zeros(len(pts), dtype=int)]
    if len(obstacles.ship_len):
        path = obstacles.ship_pos[None, :, :] + t[:, None, None] * obstacles.ship_vel[None, :, :]
        r = obstacles.ship_len + cfg.d_safe
        dist = np.linalg.norm(path - x0[:2], axis=2).min(axis=0)
        sel = dist <= reach + r + term.d_f
        centers.append(path[:, sel, :])
        radii.append(r[sel])
        family.append(np.ones(int(sel.sum()), dtype=int))
    if cfg.nu_ub is None:
        nu_ub = np.array([u_max, 0.3, 0.3])
    else:
        nu_ub = np.asarray(cfg.nu_ub, dtype=float)
    return OcpInstance(
        x0=x0, tau_hat=np.asarray(tau_hat, dtype=float).reshape(3),
        centers=np.concatenate(centers, axis=1), radii=np.concatenate(radii),
        family=np.concatenate(family), cfg=cfg, P_nu=term.P_f_nu, u_e=term.u_e.copy(),
        K_term=term.K.copy(), d_f=term.d_f, x_e=term.x_e.copy(), nu_lb=np.asarray(cfg.nu_lb, dtype=float),
        nu_ub=nu_ub,
    )


@dataclass
class WarmStart:
    X: np.ndarray  # (N+1, 6)
    U: np.ndarray  # (N, 2)


@dataclass
class PsfSolution:
    u0: np.ndarray
    u_L: np.ndarray
    delta_u: np.ndarray
    X: np.ndarray
    U: np.ndarray
    slack: dict
    status: str
    solve_time: float
    sqp_iterations: int
    n_active: int

    @property
    def intervened(self) -> bool:
        return bool(np.any(self.delta_u != 0.0))

    @property
    def max_slack(self) -> float:
        return max(self.slack.values()) if self.slack else 0.0


def shift_warm_start(prev: PsfSolution | WarmStart, term: TerminalSet, u_lb, u_ub) -> WarmStart:
    """Drop the first node, duplicate the last, fill the last input with the terminal law."""
    X = np.vstack([prev.X[1:], prev.X[-1:]])
    last = prev.X[-1]
    xbar = np.concatenate([np.zeros(3), last[3:]]) - term.x_e
    u_fill = term.control(xbar, u_lb, u_ub)
    U = np.vstack([prev.U[1:], u_fill[None, :]])
    return WarmStart(X=X, U=U)


def cold_start(x0, term: TerminalSet, N: int) -> WarmStart:
    return WarmStart(X=np.tile(np.asarray(x0, dtype=float), (N + 1, 1)),
                     U=np.tile(term.u_e, (N, 1)))


def rollout_start(ocp: OcpInstance, model: VesselModel, u_L) -> WarmStart:
    """Cold-start guess: the proposal for one step, then the terminal law.

    The guess is a trajectory of the prediction model, so the first
    linearization has no dynamics defects.
    """
    cfg = ocp.cfg
    N = cfg.N
    X = np.empty((N + 1, NX))
    U = np.empty((N, NU))
    X[0] = ocp.x0
    U[0] = np.clip(u_L, cfg.u_lb, cfg.u_ub)
    # terminal law u = u_e + K (xbar) with xbar = (0, 0, 0, nu) - x_e
    Kn = ocp.K_term[:, 3:]
    base = ocp.u_e - ocp.K_term @ ocp.x_e
    (k0, k1, k2), (k3, k4, k5) = Kn.tolist()
    b0, b1 = base.tolist()
    lo0, lo1 = cfg.u_lb
    hi0, hi1 = cfg.u_ub
    tau = ocp.tau_hat.tolist()
    x = model.rk4_single(X[0], U[0], cfg.dt, tau)
    rows = [x]
    us = []
    for _ in range(N - 1):
        su, sv, sr = x[3], x[4], x[5]
        f = min(max(b0 + k0 * su + k1 * sv + k2 * sr, lo0), hi0)
        t = min(max(b1 + k3 * su + k4 * sv + k5 * sr, lo1), hi1)
        us.append((f, t))
        x = model.rk4_single(x, (f, t), cfg.dt, tau)
        rows.append(x)
    X[1:] = rows
    U[1:] = us
    return WarmStart(X=X, U=U)


def certify(ocp: OcpInstance, ws: WarmStart) -> bool:
    """True when the trajectory meets every constraint of the OCP exactly.

    Such a trajectory starting with the proposal proves the proposal safe.
    """
    X = ws.X
    nu = X[1:, 3:6]
    if np.any(nu > ocp.nu_ub) or np.any(nu < ocp.nu_lb):
        return False
    nu_N = X[-1, 3:6]
    if nu_N @ ocp.P_nu @ nu_N > 1.0:
        return False
    if ocp.radii.size:
        d = np.linalg.norm(X[1:, None, :2] - ocp.centers[1:], axis=2)
        R = np.broadcast_to(ocp.radii, d.shape).copy()
        R[-1] += ocp.d_f
        if np.any(d < R):
            return False
    return True


def _align_heading(ws: WarmStart, psi0: float) -> WarmStart:
    # the plant wraps its heading; keep the warm start on the same branch
    k = np.round((ws.X[0, 2] - psi0) / (2.0 * np.pi))
    if k != 0:
        X = ws.X.copy()
        X[:, 2] -= 2.0 * np.pi * k
        return WarmStart(X=X, U=ws.U)
    return ws


def _jump(x_ws: np.ndarray, x0: np.ndarray) -> float:
    """Mismatch between a warm start's first node and the state, in units of
    1 m, 0.1 rad and 0.1 m/s (rad/s)."""
    d = np.asarray(x_ws, dtype=float) - np.asarray(x0, dtype=float)
    d[2] = (d[2] + np.pi) % (2.0 * np.pi) - np.pi
    return float(np.max(np.abs(d) / (1.0, 1.0, 0.1, 0.1, 0.1, 0.1)))


def shooting_jacobians(model: VesselModel, X: np.ndarray, U: np.ndarray, tau_hat, dt: float,
                       h: float = 1e-7) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 transition and its forward-difference Jacobians at every node.

    Returns F (N, 6), A (N, 6, 6), B (N, 6, 2).
    """
    n = U.shape[0]
    z = np.concatenate([X[:n], U], axis=1)  # (n, 8)
    step = h * (1.0 + np.abs(z))  # (n, 8)
    pert = np.repeat(z[:, None, :], 1 + NX + NU, axis=1)
    idx = np.arange(NX + NU)
    pert[:, 1 + idx, idx] += step
    flat = pert.reshape(-1, NX + NU)
    nxt = model.rk4(flat[:, :NX], flat[:, NX:], dt, tau_hat).reshape(n, 1 + NX + NU, NX)
    F = nxt[:, 0]
    J = (nxt[:, 1:] - F[:, None, :]) / step[:, :, None]  # (n, 8, 6)
    J = np.transpose(J, (0, 2, 1))
    return F, J[:, :, :NX], J[:, :, NX:]


@dataclass
class _Qp:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix  # equality rows
    b: np.ndarray
    G: sp.csc_matrix  # inequality rows G dz <= h
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    layout: dict
    row_family: np.ndarray


def _layout(N: int) -> dict:
    nxv = NX * (N + 1)
    nuv = NU * N
    # one slack per constraint family; the L1 penalty then acts on the
    # worst violation of each family
    return {
        "x": 0,
        "u": nxv,
        "s_vel": nxv + nuv,
        "s_col": nxv + nuv + 1,
        "s_td": nxv + nuv + 2,
        "s_te": nxv + nuv + 3,
        "n": nxv + nuv + 4,
    }


def _tangent_cuts(P_nu: np.ndarray, nu_bar: np.ndarray) -> np.ndarray:
    """Supporting hyperplanes a' nu <= 1 of the terminal velocity ellipsoid.

    The six eigen-direction cuts bound the terminal velocity at all times; an
    extra cut at the radial projection of the warm start tracks the active
    part of the boundary.
    """
    lam, V = np.linalg.eigh(P_nu)
    cuts = [s * math.sqrt(l) * V[:, i] for i, l in enumerate(lam) for s in (1.0, -1.0)]
    g = float(nu_bar @ P_nu @ nu_bar)
    if g > 1e-8:
        cuts.append(P_nu @ nu_bar / math.sqrt(g))
    return np.array(cuts)


def _select_rows(ocp: OcpInstance, X: np.ndarray):
    """Linearized clearance rows ``n' dp >= rhs`` for the obstacles near each node.

    Returns node indices (1..N), unit normals (m, 2) and right-hand sides (m,).
    """
    cfg = ocp.cfg
    N = cfg.N
    if ocp.radii.size == 0:
        return np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros(0)
    rel = X[1:, None, :2] - ocp.centers[1:]  # (N, K, 2)
    d = np.linalg.norm(rel, axis=2)
    R = np.broadcast_to(ocp.radii, d.shape).copy()
    R[-1] += ocp.d_f
    clearance = d - R
    cap = min(cfg.max_rows_per_node, clearance.shape[1])
    order = np.argsort(clearance, axis=1, kind="stable")[:, :cap]
    nodes = np.repeat(np.arange(N), cap)
    ks = order.ravel()
    sel = clearance[nodes, ks] < cfg.select_margin
    nodes, ks = nodes[sel], ks[sel]
    dk = d[nodes, ks]
    safe = np.maximum(dk, 1e-3)
    n = np.where((dk > 1e-3)[:, None], rel[nodes, ks] / safe[:, None], np.array([1.0, 0.0]))
    # ||p - c||^2 >= R^2 linearized and scaled by 1 / (2 d)
    rhs = (R[nodes, ks] ** 2 - dk**2) / (2.0 * safe)
    return nodes + 1, n, rhs


@functools.lru_cache(maxsize=8)
def _eq_pattern(N: int):
    """CSC structure of the shooting equalities and the COO-to-CSC permutation.

    Value order: identity on x_0, identity on x_{i+1}, -A_i, -B_i (row-major).
    """
    L = _layout(N)
    node = np.arange(N)
    rr = NX + NX * node[:, None, None] + np.arange(NX)[None, :, None]
    ri = [np.arange(NX), (NX + NX * node[:, None] + np.arange(NX)).ravel(),
          np.broadcast_to(rr, (N, NX, NX)).ravel(), np.broadcast_to(rr, (N, NX, NU)).ravel()]
    ci = [np.arange(NX), (NX * (node[:, None] + 1) + np.arange(NX)).ravel(),
          np.broadcast_to(NX * node[:, None, None] + np.arange(NX)[None, None, :],
                          (N, NX, NX)).ravel(),
          np.broadcast_to(L["u"] + NU * node[:, None, None] + np.arange(NU)[None, None, :],
                          (N, NX, NU)).ravel()]
    ri, ci = np.concatenate(ri), np.concatenate(ci)
    M = sp.csc_matrix((np.arange(1, len(ri) + 1, dtype=float), (ri, ci)),
                      shape=(NX * (N + 1), L["n"]))
    M.sort_indices()
    perm = M.data.astype(np.int64) - 1
    return M.indices.copy(), M.indptr.copy(), perm


def _build_qp(ocp: OcpInstance, model: VesselModel, X: np.ndarray, U: np.ndarray,
              u_L: np.ndarray) -> _Qp:
    cfg = ocp.cfg
    N = cfg.N
    L = _layout(N)
    n = L["n"]
    W = cost_matrix(cfg)

    F, Aj, Bj = shooting_jacobians(model, X, U, ocp.tau_hat, cfg.dt)

    # objective
    p_diag = np.zeros(n)
    p_diag[:L["u"]] = cfg.reg_x
    u_diag = np.tile(2.0 * np.diag(W) * cfg.reg_u, N)
    u_diag[:NU] = 2.0 * np.diag(W)
    p_diag[L["u"]:L["s_vel"]] = u_diag
    P = sp.csc_matrix((p_diag, np.arange(n), np.arange(n + 1)), shape=(n, n))
    q = np.zeros(n)
    q[L["u"]:L["u"] + NU] = 2.0 * W @ (U[0] - u_L)
    q[L["s_vel"]:] = cfg.slack_weight

    # equalities: initial state and shooting gaps
    indices, indptr, perm = _eq_pattern(N)
    vals = np.concatenate([np.ones(NX * (N + 1)), -Aj.ravel(), -Bj.ravel()])
    A = sp.csc_matrix((vals[perm], indices, indptr), shape=(NX * (N + 1), n))
    b = np.concatenate([ocp.x0 - X[0], (F - X[1:]).ravel()])

    # inequalities, assembled row by row (CSR) since the row set varies
    cols, vals, h, fam, nnz = [], [], [], [], []
    scale = ocp.nu_ub - ocp.nu_lb
    nu_bar = X[1:, 3:6]
    nu_col = NX * (np.arange(N)[:, None] + 1) + 3 + np.arange(3)
    for sign, bound in ((1.0, ocp.nu_ub), (-1.0, ocp.nu_lb)):
        # sign * (nu_bar + dnu - bound) / scale <= s_vel
        margin = sign * (bound - nu_bar) / scale
        keep = margin < cfg.nu_select_margin
        m = int(keep.sum())
        cols.append(np.column_stack([nu_col[keep], np.full(m, L["s_vel"])]).ravel())
        vals.append(np.column_stack([np.broadcast_to(sign / scale, (N, 3))[keep],
                                     -np.ones(m)]).ravel())
        h.append(margin[keep])
        fam.append(np.zeros(m, dtype=int))
        nnz.append(np.full(m, 2))

    nodes, nvec, rhs = _select_rows(ocp, X)
    m = len(rhs)
    if m:
        # -n' dp - s <= -rhs
        slack = np.where(nodes == N, L["s_td"], L["s_col"])
        cols.append(np.stack([NX * nodes, NX * nodes + 1, slack], axis=1).ravel())
        vals.append(np.column_stack([-nvec, -np.ones(m)]).ravel())
        h.append(-rhs)
        fam.append(np.where(nodes == N, 2, 1))
        nnz.append(np.full(m, 3))

    nu_N = X[N, 3:6]
    cuts = _tangent_cuts(ocp.P_nu, nu_N)
    m = len(cuts)
    cols.append(np.tile(np.array([NX * N + 3, NX * N + 4, NX * N + 5, L["s_te"]]), m))
    vals.append(np.column_stack([cuts, -np.ones(m)]).ravel())
    h.append(1.0 - cuts @ nu_N)
    fam.append(np.full(m, 3))
    nnz.append(np.full(m, 4))

    nnz = np.concatenate(nnz)
    indptr = np.concatenate([[0], np.cumsum(nnz)])
    G = sp.csr_matrix((np.concatenate(vals), np.concatenate(cols), indptr),
                      shape=(len(nnz), n)).tocsc()
    h = np.concatenate(h)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[L["u"]:L["s_vel"]] = (np.asarray(cfg.u_lb) - U).ravel()
    ub[L["u"]:L["s_vel"]] = (np.asarray(cfg.u_ub) - U).ravel()
    lb[L["s_vel"]:] = 0.0
    return _Qp(P=P, q=q, A=A, b=b, G=G, h=h, lb=lb, ub=ub, layout=L,
               row_family=np.concatenate(fam))


def _solve_qp(qp: _Qp, cfg: PsfConfig):
    solver = piqp.SparseSolver()
    s = solver.settings
    s.eps_abs = cfg.qp_eps
    s.eps_rel = cfg.qp_eps
    s.max_iter = cfg.qp_max_iter
    # rows are already normalized; Ruiz equilibration costs more than it saves
    s.preconditioner_iter = 0
    s.verbose = False
    solver.setup(qp.P, qp.q, qp.A, qp.b, qp.G, np.full(qp.h.shape, -np.inf), qp.h,
                 qp.lb, qp.ub)
    status = solver.solve()
    if status != piqp.PIQP_SOLVED:
        return None
    return np.array(solver.result.x)


def _fallback(ocp: OcpInstance, u_L: np.ndarray, t0: float, ws: WarmStart) -> PsfSolution:
    cfg = ocp.cfg
    xbar = np.concatenate([np.zeros(3), ocp.x0[3:]]) - ocp.x_e
    u0 = np.clip(ocp.u_e + ocp.K_term @ xbar, cfg.u_lb, cfg.u_ub)
    return PsfSolution(u0=u0, u_L=u_L.copy(), delta_u=u_L - u0, X=ws.X, U=ws.U,
                       slack={k: math.nan for k in SLACK_FAMILIES}, status="fallback",
                       solve_time=time.perf_counter() - t0, sqp_iterations=0, n_active=0)


def solve(ocp: OcpInstance, model: VesselModel, u_L, warm: WarmStart | None = None,
          term: TerminalSet | None = None) -> PsfSolution:
    """Filter ``u_L``: run the SQP iterations and return the first input."""
    t0 = time.perf_counter()
    cfg = ocp.cfg
    u_L = np.asarray(u_L, dtype=float).reshape(NU)
    if warm is not None and _jump(warm.X[0], ocp.x0) > cfg.warm_jump_tol:
        log.debug("warm start far from the measured state; cold start")
        warm = None
    if np.all(u_L >= cfg.u_lb) and np.all(u_L <= cfg.u_ub):
        guess = rollout_start(ocp, model, u_L)
        if certify(ocp, guess):
            # the proposal followed by the terminal law is a feasible
            # trajectory, so the proposal itself is optimal (zero cost)
            zero = {k: 0.0 for k in SLACK_FAMILIES}
            return PsfSolution(u0=u_L.copy(), u_L=u_L.copy(), delta_u=np.zeros(NU), X=guess.X,
                               U=guess.U, slack=zero, status="optimal",
                               solve_time=time.perf_counter() - t0, sqp_iterations=0,
                               n_active=0)
    else:
        guess = None
    if warm is None:
        ws = guess if guess is not None else rollout_start(ocp, model, u_L)
        cap = cfg.cold_sqp_iter
    else:
        ws = _align_heading(warm, float(ocp.x0[2]))
        cap = cfg.sqp_iter
    X = ws.X.copy()
    U = ws.U.copy()
    X[0] = ocp.x0
    # linearizing the first stage at the proposal makes the prediction exact
    # whenever the proposal is accepted unchanged
    U[0] = np.clip(u_L, cfg.u_lb, cfg.u_ub)
    rng = cfg.input_range()
    converged = False
    it = 0
    qp = sol = None
    for it in range(1, cap + 1):
        qp = _build_qp(ocp, model, X, U, u_L)
        sol = _solve_qp(qp, cfg)
        if sol is None or not np.all(np.isfinite(sol)):
            log.warning("QP failed; applying the terminal control law")
            return _fallback(ocp, u_L, t0, ws)
        L = qp.layout
        dX = sol[:L["u"]].reshape(cfg.N + 1, NX)
        dU = sol[L["u"]:L["s_vel"]].reshape(cfg.N, NU)
        X = X + dX
        U = U + dU
        # later inputs are free in the cost and are only pinned by the
        # regularization, so convergence is judged on the filtered input
        if np.max(np.abs(dU[0]) / rng) < cfg.sqp_tol:
            converged = True
            break

    L = qp.layout
    slack = {name: float(max(sol[L[key]], 0.0))
             for name, key in zip(SLACK_FAMILIES, ("s_vel", "s_col", "s_td", "s_te"))}
    resid = qp.G @ sol - qp.h
    n_active = int(np.sum(resid > -1e-6))

    U = np.clip(U, cfg.u_lb, cfg.u_ub)
    u0 = U[0].copy()
    feasible_proposal = np.all(u_L >= cfg.u_lb) and np.all(u_L <= cfg.u_ub)
    if feasible_proposal and np.max(np.abs(u0 - u_L) / rng) <= cfg.snap_tol:
        u0 = u_L.copy()
        U[0] = u0

    if max(slack.values()) > cfg.slack_tol:
        status = "infeasible-soft"
    elif cap > 1 and not converged:
        status = "max-iters"
    else:
        status = "optimal"
    return PsfSolution(u0=u0, u_L=u_L.copy(), delta_u=u_L - u0, X=X, U=U, slack=slack,
                       status=status, solve_time=time.perf_counter() - t0,
                       sqp_iterations=it, n_active=n_active)


class SafetyFilter:
    """Stateful wrapper holding the warm start between ticks.

    One instance per vessel; not safe to share across threads.
    """

    def __init__(self, term: TerminalSet, cfg: PsfConfig = PsfConfig(),
                 model: VesselModel | None = None):
        if not term.verified:
            raise ConfigurationError("the safety filter needs a verified terminal set")
        self.term = term
        self.cfg = cfg
        self.model = model or VesselModel()
        self.u_max = max_surge_speed(self.model.params, cfg.u_ub[0])
        self._prev: PsfSolution | None = None

    def reset(self) -> None:
        self._prev = None

    def warm_start(self) -> WarmStart | None:
        if self._prev is None or self._prev.status == "fallback":
            return None
        return shift_warm_start(self._prev, self.term, self.cfg.u_lb, self.cfg.u_ub)

    def filter(self, x, u_L, tau_hat=None, obstacles: ObstacleSet | None = None) -> PsfSolution:
        tau_hat = np.zeros(3) if tau_hat is None else tau_hat
        ocp = assemble(x, tau_hat, obstacles or ObstacleSet(), self.cfg, self.term, self.u_max)
        sol = solve(ocp, self.model, u_L, self.warm_start(), self.term)
        self._prev = sol
        return sol


def telemetry_record(tick: int, sol: PsfSolution) -> dict:
    return {
        "tick": int(tick),
        "u_L": sol.u_L.tolist(),
        "u0": sol.u0.tolist(),
        "delta_u": sol.delta_u.tolist(),
        "status": sol.status,
        "solve_time": sol.solve_time,
        "max_slack": {k: (None if math.isnan(v) else v) for k, v in sol.slack.items()},
        "active_constraints": sol.n_active,
        "sqp_iterations": sol.sqp_iterations,
    }


def bypass_record(tick: int, u_L, u0) -> dict:
    """Telemetry for a tick where the filter was switched off."""
    u_L = np.asarray(u_L, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    return {
        "tick": int(tick),
        "u_L": u_L.tolist(),
        "u0": u0.tolist(),
        "delta_u": (u_L - u0).tolist(),
        "status": "bypass",
        "solve_time": 0.0,
        "max_slack": {k: None for k in SLACK_FAMILIES},
        "active_constraints": 0,
        "sqp_iterations": 0,
    }
