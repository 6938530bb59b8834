"""Action proposers: LOS baseline, adversarial stress policy, external agents, replay.

All policies see only the observation vector (see ``Episode.observation``)
and return a clamped ``(F_u, T_r)`` proposal.
"""

from __future__ import annotations

import csv
import json
import math
import selectors
import subprocess
from dataclasses import dataclass

import numpy as np

from psfnav.errors import ConfigurationError, ProtocolError

U_LB = np.array([-0.2, -0.15])
U_UB = np.array([2.0, 0.15])
POLICY_KINDS = ("los-follower", "adversarial", "external", "replay")

# observation indices
I_U, I_V, I_R, I_CTE, I_COURSE = 0, 1, 2, 3, 4
N_NAV = 11


def _clamp(u, lb=U_LB, ub=U_UB) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), lb, ub)


@dataclass(frozen=True)
class LosGains:
    lookahead: float = 25.0
    k_psi: float = 1.0
    k_r: float = 3.0
    k_u: float = 20.0
    U_max: float = 0.5787522


def los_follower(obs, gains: LosGains = LosGains(), lb=U_LB, ub=U_UB) -> np.ndarray:
    """Steer toward a lookahead point on the path; proportional surge control.

    The desired course relative to the path tangent is ``-atan(cte / lookahead)``,
    so the yaw moment is a PD law on ``course_error + atan(cte / lookahead)``.
    """
    obs = np.asarray(obs, dtype=float)
    err = obs[I_COURSE] + math.atan2(obs[I_CTE], gains.lookahead)
    err = math.atan2(math.sin(err), math.cos(err))
    T = -gains.k_psi * err - gains.k_r * obs[I_R]
    F = gains.k_u * (gains.U_max - obs[I_U])
    return _clamp([F, T], lb, ub)


class LosPolicy:
    kind = "los-follower"

    def __init__(self, gains: LosGains = LosGains(), lb=U_LB, ub=U_UB):
        self.gains, self.lb, self.ub = gains, np.asarray(lb), np.asarray(ub)

    def reset(self, info: dict | None = None) -> None:
        pass

    def act(self, obs) -> np.ndarray:
        return los_follower(obs, self.gains, self.lb, self.ub)

    def close(self) -> None:
        pass


def adversarial(obs, rng: np.random.Generator, n_sector: int = 20, lb=U_LB, ub=U_UB,
                k_psi: float = 1.0, k_r: float = 3.0, n_ray: int = 180) -> np.ndarray:
    """Full thrust toward the closest detected obstacle, else a random action."""
    obs = np.asarray(obs, dtype=float)
    dist = obs[N_NAV:N_NAV + n_sector]
    if np.all(dist >= 1.0):
        return _clamp(rng.uniform(lb, ub), lb, ub)
    j = int(np.argmin(dist))
    # sector j holds rays j*k .. j*k + k - 1, ray i at bearing 2*pi*i / n_ray
    k = n_ray // n_sector
    bearing = 2.0 * math.pi / n_ray * (j * k + 0.5 * (k - 1))
    bearing = math.atan2(math.sin(bearing), math.cos(bearing))
    T = k_psi * bearing - k_r * obs[I_R]
    return _clamp([ub[0], T], lb, ub)


class AdversarialPolicy:
    kind = "adversarial"

    def __init__(self, seed: int = 0, n_sector: int = 20, lb=U_LB, ub=U_UB, n_ray: int = 180):
        self.seed, self.n_sector, self.n_ray = seed, n_sector, n_ray
        self.lb, self.ub = np.asarray(lb), np.asarray(ub)
        self.rng = np.random.default_rng(seed)

    def reset(self, info: dict | None = None) -> None:
        self.rng = np.random.default_rng(self.seed)

    def act(self, obs) -> np.ndarray:
        return adversarial(obs, self.rng, self.n_sector, self.lb, self.ub, n_ray=self.n_ray)

    def close(self) -> None:
        pass


class ReplayPolicy:
    """Re-emit the proposals logged in a trajectory CSV, tick for tick."""

    kind = "replay"

    def __init__(self, actions):
        self.actions = np.asarray(actions, dtype=float).reshape(-1, 2)
        self.i = 0

    @classmethod
    def from_csv(cls, path) -> "ReplayPolicy":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and not {"uL_F", "uL_T"} <= set(rows[0]):
            raise ConfigurationError("trajectory file has no proposed-action columns")
        return cls([(float(r["uL_F"]), float(r["uL_T"])) for r in rows])

    def reset(self, info: dict | None = None) -> None:
        self.i = 0

    def act(self, obs) -> np.ndarray:
        if self.i >= len(self.actions):
            raise ConfigurationError("replay log exhausted before the episode ended")
        u = self.actions[self.i]
        self.i += 1
        return u.copy()

    def close(self) -> None:
        pass


class ExternalPolicy:
    """Child process speaking line-delimited JSON on stdin/stdout.

    Handshake: the environment sends ``{"type": "hello", "layout": [...],
    "u_lb": [...], "u_ub": [...], "dt": ...}`` and expects ``{"type": "ready"}``.
    Each tick: ``{"type": "obs", "tick": n, "data": [...]}`` is answered with
    ``{"type": "act", "tick": n, "u": [F_u, T_r]}``. ``{"type": "close"}`` ends
    the session.
    """

    kind = "external"

    def __init__(self, command: list[str], timeout: float = 10.0, lb=U_LB, ub=U_UB):
        if not command:
            raise ConfigurationError("external policy needs a command")
        self.command = list(command)
        self.timeout = timeout
        self.lb, self.ub = np.asarray(lb), np.asarray(ub)
        self.proc: subprocess.Popen | None = None
        self.tick = 0

    def _send(self, msg: dict) -> None:
        assert self.proc is not None
        try:
            self.proc.stdin.write(json.dumps(msg) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolError(f"agent process is gone: {exc}") from exc

    def _recv(self) -> dict:
        assert self.proc is not None
        sel = selectors.DefaultSelector()
        sel.register(self.proc.stdout, selectors.EVENT_READ)
        ready = sel.select(self.timeout)
        sel.close()
        if not ready:
            raise ProtocolError(f"agent did not answer within {self.timeout} s")
        line = self.proc.stdout.readline()
        if not line:
            code = self.proc.poll()
            raise ProtocolError(f"agent process exited (code {code})")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed message from agent: {line.strip()!r}") from exc
        if not isinstance(msg, dict) or "type" not in msg:
            raise ProtocolError(f"message without a type: {line.strip()!r}")
        return msg

    def reset(self, info: dict | None = None) -> None:
        self.close()
        self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, bufsize=1)
        self.tick = 0
        hello = {"type": "hello", "u_lb": self.lb.tolist(), "u_ub": self.ub.tolist()}
        hello.update(info or {})
        self._send(hello)
        msg = self._recv()
        if msg["type"] != "ready":
            raise ProtocolError(f"expected a ready message, got {msg['type']!r}")

    def act(self, obs) -> np.ndarray:
        if self.proc is None:
            raise ProtocolError("handshake has not been performed")
        self._send({"type": "obs", "tick": self.tick, "data": [float(v) for v in obs]})
        msg = self._recv()
        if msg["type"] != "act" or msg.get("tick") != self.tick:
            raise ProtocolError(f"expected act for tick {self.tick}, got {msg}")
        u = msg.get("u")
        if not (isinstance(u, list) and len(u) == 2):
            raise ProtocolError(f"action must be a list of two numbers, got {u!r}")
        try:
            u = np.array([float(u[0]), float(u[1])])
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"action is not numeric: {u!r}") from exc
        if not np.all(np.isfinite(u)):
            raise ProtocolError("action is not finite")
        self.tick += 1
        return _clamp(u, self.lb, self.ub)

    def close(self) -> None:
        if self.proc is None:
            return
        try:
            if self.proc.poll() is None:
                self._send({"type": "close"})
                self.proc.stdin.close()
                self.proc.wait(timeout=2.0)
        except (ProtocolError, subprocess.TimeoutExpired, OSError):
            self.proc.kill()
            self.proc.wait()
        self.proc = None


def make_policy(kind: str, seed: int = 0, command: list[str] | None = None,
                replay_file=None, los_gains: LosGains | None = None):
    if kind == "los-follower":
        return LosPolicy(los_gains or LosGains())
    if kind == "adversarial":
        return AdversarialPolicy(seed)
    if kind == "external":
        return ExternalPolicy(command or [])
    if kind == "replay":
        if replay_file is None:
            raise ConfigurationError("replay policy needs a trajectory file")
        return ReplayPolicy.from_csv(replay_file)
    raise ConfigurationError(f"unknown policy {kind!r}; expected one of {POLICY_KINDS}")
