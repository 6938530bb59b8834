"""Figures for runs and campaigns, rendered with matplotlib to SVG (or any
format matplotlib infers from the file suffix).

Axes follow the NED convention of the simulation: east to the right, north up.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle  # noqa: E402

from psfnav.env import INTERVENTION_TOL, normalized_intervention  # noqa: E402
from psfnav.psf import PsfConfig  # noqa: E402

# fixed metadata keeps the SVG output byte-stable between runs
_SVG_META = {"Date": None, "Creator": "psfnav"}

RADAR_AXES = ("safety", "progress", "time score", "path accuracy", "autonomy")


def _save(fig, path) -> None:
    fmt = str(path).rsplit(".", 1)[-1].lower()
    meta = _SVG_META if fmt == "svg" else None
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)


def plot_run(result, path, psf_cfg: PsfConfig = PsfConfig()) -> None:
    """Reference path, obstacles, ship tracks, own trajectory and interventions.

    Green dots mark ticks where the filter changed the proposed action.
    """
    recs = result.records
    xy = np.array([result.x0[:2]] + [r.x[:2] for r in recs])
    t_end = recs[-1].t if recs else 0.0
    fig, ax = plt.subplots(figsize=(7, 7))
    p = result.path.points
    ax.plot(p[:, 1], p[:, 0], "--", color="0.5", lw=1, label="path")
    wp = result.path.waypoints
    ax.plot(wp[:, 1], wp[:, 0], "s", color="0.5", ms=4)
    for o in result.world.statics:
        ax.add_patch(Circle((o.center[1], o.center[0]), o.radius, color="0.3", alpha=0.6))
    for k, s in enumerate(result.world.ships):
        ts = np.linspace(0.0, t_end, 100)
        track = np.array([s.position(t) for t in ts])
        ax.plot(track[:, 1], track[:, 0], ":", color="tab:red", lw=1,
                label="ship tracks" if k == 0 else None)
        end = track[-1]
        ax.add_patch(Circle((end[1], end[0]), s.radius, color="tab:red", alpha=0.3))
    ax.plot(xy[:, 1], xy[:, 0], color="tab:blue", lw=1.5, label="vessel")
    hits = [i for i, r in enumerate(recs)
            if normalized_intervention(r.u_L - r.u0, psf_cfg) > INTERVENTION_TOL]
    if hits:
        h = np.array([recs[i].x[:2] for i in hits])
        ax.plot(h[:, 1], h[:, 0], "o", color="tab:green", ms=2.5, label="PSF intervention")
    ax.plot(xy[0, 1], xy[0, 0], "k^", ms=7, label="start")
    ax.plot(result.path.goal[1], result.path.goal[0], "k*", ms=10, label="goal")
    m = result.metrics
    ax.set_title(f"case {m.case}, seed {m.seed}: {m.done_reason}, "
                 f"intervention rate {m.intervention_rate:.2f}")
    ax.set_xlabel("east (m)")
    ax.set_ylabel("north (m)")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def radar_values(aggregate: dict) -> list[float]:
    """Campaign aggregates mapped to [0, 1], larger is better.

    Path accuracy is exp(-mean |cte| / 10 m); autonomy is one minus the
    intervention rate.
    """
    def val(v, default=0.0):
        return default if v is None else float(v)

    return [
        1.0 - val(aggregate.get("collision_rate"), 1.0),
        val(aggregate.get("mean_progress")),
        val(aggregate.get("mean_time_score")),
        math.exp(-val(aggregate.get("mean_cte"), math.inf) / 10.0),
        1.0 - val(aggregate.get("intervention_rate"), 0.0),
    ]


def plot_radar(aggregates: dict[str, dict], path) -> None:
    """One polygon per labelled campaign over the metric axes of :data:`RADAR_AXES`."""
    n = len(RADAR_AXES)
    ang = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    fig, ax = plt.subplots(figsize=(5, 5), subplot_kw={"polar": True})
    for label, agg in aggregates.items():
        v = radar_values(agg)
        ax.plot(np.append(ang, ang[0]), v + v[:1], lw=1.5, label=label)
        ax.fill(np.append(ang, ang[0]), v + v[:1], alpha=0.15)
    ax.set_xticks(ang)
    ax.set_xticklabels(RADAR_AXES)
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="upper right", bbox_to_anchor=(1.3, 1.1), fontsize=8)
    _save(fig, path)


def plot_solve_times(times, path) -> None:
    t = np.asarray(times, dtype=float) * 1e3
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if t.size:
        ax.hist(t, bins=60, color="tab:blue", alpha=0.8)
        for q, ls in ((50, "-"), (99, "--")):
            v = np.percentile(t, q)
            ax.axvline(v, color="k", ls=ls, lw=1, label=f"p{q} = {v:.2f} ms")
        ax.legend(fontsize=8)
    ax.set_xlabel("PSF solve time per tick (ms)")
    ax.set_ylabel("ticks")
    _save(fig, path)
