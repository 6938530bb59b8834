"""Episode and campaign drivers and the files they write.

Trajectory CSV rows hold the state after each tick together with the applied
input, the proposal and the filter correction; floats are written with
``repr`` so a logged episode can be replayed bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable

import numpy as np

from psfnav.env import EnvConfig, Episode, Metrics, TickRecord
from psfnav.path import Path
from psfnav.scenario import ScenarioSpec
from psfnav.sensing import World
from psfnav.terminal import TerminalSet

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("t", "x", "y", "psi", "u", "v", "r", "F_u", "T_r", "uL_F", "uL_T",
                      "delta_F", "delta_T", "cte")


@dataclass
class EpisodeResult:
    spec: ScenarioSpec
    metrics: Metrics
    records: list[TickRecord]
    telemetry: list[dict]
    world: World
    path: Path
    x0: np.ndarray
    scans: list[np.ndarray] = field(default_factory=list)

    @property
    def solve_times(self) -> np.ndarray:
        return np.array([r.solve_time for r in self.records if r.status != "bypass"])


def run_episode(spec: ScenarioSpec, policy, term: TerminalSet | None = None,
                cfg: EnvConfig | None = None) -> EpisodeResult:
    """Drive one episode to termination with ``policy`` proposing the actions."""
    ep = Episode(spec, term, cfg)
    x0 = ep.x.copy()
    policy.reset({"layout": ep.observation_layout(), "dt": ep.dt,
                  "u_lb": ep.u_lb.tolist(), "u_ub": ep.u_ub.tolist()})
    try:
        while not ep.done:
            ep.step(policy.act(ep.observation()))
    finally:
        policy.close()
    return EpisodeResult(spec=spec, metrics=ep.metrics(), records=ep.records,
                         telemetry=ep.telemetry, world=ep.world, path=ep.path, x0=x0,
                         scans=ep.scans)


def trajectory_rows(records: list[TickRecord]) -> list[list[float]]:
    rows = []
    for r in records:
        d = r.u_L - r.u0
        rows.append([r.t, *r.x.tolist(), *r.u0.tolist(), *r.u_L.tolist(), *d.tolist(), r.cte])
    return rows


def write_trajectory(records: list[TickRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for row in trajectory_rows(records):
            w.writerow([repr(float(v)) for v in row])


def read_trajectory(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRAJECTORY_COLUMNS:
        raise ValueError(f"{path}: not a trajectory file")
    return np.array([[float(v) for v in row] for row in rows[1:]]).reshape(-1, len(TRAJECTORY_COLUMNS))


DISTURBANCE_COLUMNS = ("t", "V_c", "beta_c", "tau_d_u", "tau_d_v", "tau_d_r",
                       "tau_hat_u", "tau_hat_v", "tau_hat_r")


def write_disturbances(records: list[TickRecord], path) -> None:
    """True current and force disturbance next to the observer estimate, per tick."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DISTURBANCE_COLUMNS)
        for r in records:
            row = [r.t, *r.current, *r.tau_d.tolist(), *r.tau_hat.tolist()]
            w.writerow([repr(float(v)) for v in row])


def write_scans(scans: list[np.ndarray], dt: float, path) -> None:
    """Long-format LiDAR export: one row per tick and ray."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("tick", "t", "ray", "range"))
        for k, ranges in enumerate(scans, start=1):
            t = repr(k * dt)
            for j, d in enumerate(ranges):
                w.writerow((k, t, j, repr(float(d))))


def write_telemetry(telemetry: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in telemetry:
            fh.write(json.dumps(rec) + "\n")


def write_json(data, path) -> None:
    FsPath(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def episode_seed(seed: int, index: int) -> int:
    """Seed of episode ``index`` in a campaign seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint32)[0])


def _percentiles(x: np.ndarray) -> dict:
    if x.size == 0:
        return {"n": 0, "mean": None, "p50": None, "p90": None, "p99": None, "max": None}
    p50, p90, p99 = np.percentile(x, [50, 90, 99])
    return {"n": int(x.size), "mean": float(x.mean()), "p50": float(p50), "p90": float(p90),
            "p99": float(p99), "max": float(x.max())}


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate(episodes: list[dict]) -> dict:
    """Campaign statistics from per-episode entries.

    Each entry holds ``metrics`` (a Metrics dict, absent when the episode
    failed) and ``solve_times``. Rates over ticks are tick-weighted.
    """
    ok = [e for e in episodes if e.get("metrics") is not None]
    ms = [e["metrics"] for e in ok]
    ticks = sum(m["ticks"] for m in ms)
    times = (np.concatenate([np.asarray(e.get("solve_times") or [], dtype=float) for e in ok])
             if ok else np.zeros(0))
    return {
        "n_episodes": len(episodes),
        "n_failed": len(episodes) - len(ok),
        "n_collisions": sum(bool(m["collision"]) for m in ms),
        "collision_rate": (sum(bool(m["collision"]) for m in ms) / len(ms)) if ms else None,
        "mean_progress": _mean(m["progress"] for m in ms),
        "mean_time_score": _mean(m["time_score"] for m in ms),
        "mean_cte": _mean(m["mean_cte"] for m in ms),
        "intervention_rate": (sum(m["interventions"] for m in ms) / ticks) if ticks else None,
        "total_ticks": ticks,
        "solve_time": _percentiles(times),
    }


@dataclass
class CampaignReport:
    config: dict
    episodes: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        eps = [{k: v for k, v in e.items() if k != "solve_times"} for e in self.episodes]
        return {"config": self.config, "aggregate": self.aggregate, "episodes": eps}


def run_campaign(base: ScenarioSpec, n: int, seed: int, make_policy: Callable[[int], object],
                 term: TerminalSet | None, cfg: EnvConfig | None = None, workers: int = 1,
                 on_episode: Callable[[int, dict, EpisodeResult | None], None] | None = None
                 ) -> CampaignReport:
    """Run ``n`` episodes with seeds split from ``seed``; failures are recorded, not raised."""

    def one(i: int) -> dict:
        s = episode_seed(seed, i)
        entry = {"index": i, "seed": s, "metrics": None, "solve_times": None, "error": None}
        result = None
        try:
            result = run_episode(base.with_seed(s), make_policy(s), term, cfg)
            entry["metrics"] = result.metrics.to_dict()
            entry["solve_times"] = result.solve_times.tolist()
        except Exception as exc:  # noqa: BLE001 - one bad episode must not stop the campaign
            log.error("episode %d (seed %d) failed: %s", i, s, exc)
            entry["error"] = f"{type(exc).__name__}: {exc}"
        if on_episode is not None:
            on_episode(i, entry, result)
        return entry

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        episodes = list(pool.map(one, range(n)))
    config = {"scenario": base.to_dict(), "episodes": n, "seed": seed}
    return CampaignReport(config=config, episodes=episodes, aggregate=aggregate(episodes))


def summary_table(report: CampaignReport) -> str:
    """Plain-text table of the per-episode metrics followed by the aggregates."""
    head = f"{'ep':>4} {'seed':>10} {'done':>12} {'coll':>5} {'prog':>6} {'time':>6} {'cte':>7} {'int':>6}"
    lines = [head]
    for e in report.episodes:
        m = e["metrics"]
        if m is None:
            lines.append(f"{e['index']:>4} {e['seed']:>10} {'error':>12}  {e['error']}")
            continue
        ts = "-" if m["time_score"] is None else f"{m['time_score']:.3f}"
        lines.append(f"{e['index']:>4} {e['seed']:>10} {m['done_reason']:>12} "
                     f"{str(m['collision'])[0]:>5} {m['progress']:6.3f} {ts:>6} "
                     f"{m['mean_cte']:7.2f} {m['intervention_rate']:6.3f}")
    a = report.aggregate

    def fmt(v, spec=".3f"):
        return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, spec)

    st = a["solve_time"]
    lines += [
        "",
        f"episodes {a['n_episodes']} (failed {a['n_failed']})  collisions {a['n_collisions']}"
        f"  collision rate {fmt(a['collision_rate'])}",
        f"mean progress {fmt(a['mean_progress'])}  mean time score {fmt(a['mean_time_score'])}"
        f"  mean |cte| {fmt(a['mean_cte'], '.2f')} m  intervention rate {fmt(a['intervention_rate'])}",
        f"solve time ms: median {fmt(st['p50'] and st['p50'] * 1e3, '.2f')}"
        f"  p99 {fmt(st['p99'] and st['p99'] * 1e3, '.2f')}  max {fmt(st['max'] and st['max'] * 1e3, '.2f')}",
    ]
    return "\n".join(lines)
