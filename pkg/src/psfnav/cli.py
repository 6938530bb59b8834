"""Command-line entry points: synth, run, eval and replay.

Exit codes: 0 success, 1 configuration error, 2 terminal-set synthesis or
verification failure, 3 output I/O failure.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import sys
from pathlib import Path

import click
import numpy as np

from psfnav.env import EnvConfig
from psfnav.errors import ConfigurationError, ProtocolError, SynthesisError
from psfnav.policy import POLICY_KINDS, ReplayPolicy, make_policy
from psfnav.runner import (
    TRAJECTORY_COLUMNS,
    aggregate,
    read_trajectory,
    run_campaign,
    run_episode,
    summary_table,
    trajectory_rows,
    write_json,
    write_disturbances,
    write_scans,
    write_telemetry,
    write_trajectory,
)
from psfnav.scenario import ScenarioSpec
from psfnav.terminal import (
    SynthesisConfig,
    TerminalSet,
    default_terminal_set,
    synthesize_terminal_set,
)
from psfnav.validation import validate
from psfnav.vessel import HydroParams

EXIT_CONFIG, EXIT_SYNTH, EXIT_IO = 1, 2, 3
CONFIG_ENV = "PSFNAV_CONFIG_DIR"

log = logging.getLogger("psfnav")


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _resolve(path: str | None, config_dir: str | None) -> Path | None:
    """Use ``path`` as given when it exists, else look it up in the config directory."""
    if path is None:
        return None
    p = Path(path)
    if not p.exists() and config_dir and not p.is_absolute() and (Path(config_dir) / p).exists():
        return Path(config_dir) / p
    if not p.exists():
        raise _Fail(EXIT_CONFIG, f"file not found: {path}")
    return p


def _read_json(path: Path, schema: str) -> dict:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise _Fail(EXIT_CONFIG, f"{path}: invalid JSON: {exc}") from exc
    validate(data, schema)
    return data


def _scenario(case: str | None, scenario: str | None, seed: int | None,
              config_dir: str | None) -> ScenarioSpec:
    if case is not None and scenario is not None:
        raise _Fail(EXIT_CONFIG, "give either --case or --scenario, not both")
    if scenario is not None:
        spec = ScenarioSpec.from_dict(_read_json(_resolve(scenario, config_dir), "scenario"))
    else:
        case = "1" if case is None else case
        validate({"case": case}, "scenario")
        spec = ScenarioSpec.for_case(case)
    return spec.with_seed(seed) if seed is not None else spec


def _terminal_set(path: str | None, config_dir: str | None, needed: bool) -> TerminalSet | None:
    if not needed:
        return None
    if path is None and config_dir and (Path(config_dir) / "terminal_set.json").exists():
        path = str(Path(config_dir) / "terminal_set.json")
    if path is None:
        return default_terminal_set()
    data = _read_json(_resolve(path, config_dir), "terminal_set")
    term = TerminalSet.from_dict(data)
    if not term.verified:
        raise _Fail(EXIT_SYNTH, f"{path}: terminal set is not verified; rerun synth")
    return term


def _env_config(no_psf: bool, no_ship_constraints: bool, t_max: float | None,
                record_scans: bool = False) -> EnvConfig:
    return EnvConfig(psf_enabled=not no_psf, moving_obstacle_constraints=not no_ship_constraints,
                     t_max=t_max, record_scans=record_scans)


def _guard(fn):
    """Map library errors to exit codes with a one-line diagnostic."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _Fail as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.code)
        except SynthesisError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_SYNTH)
        except (ConfigurationError, ProtocolError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_IO)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
@click.option("--config-dir", envvar=CONFIG_ENV, type=click.Path(file_okay=False),
              help=f"Directory searched for relative input files and a default "
                   f"terminal_set.json (env: {CONFIG_ENV}).")
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug output).")
@click.pass_context
def main(ctx, config_dir, verbose):
    """Predictive safety filter for autonomous surface vessels."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config_dir": config_dir}


@main.command()
@click.option("--config", "config_file", help="Synthesis config JSON (bounds, LQR weights, samples).")
@click.option("--params", "params_file", help="Hydrodynamic parameter overrides (JSON object).")
@click.option("--out", required=True, help="Where to write the terminal-set JSON.")
@click.pass_context
@_guard
def synth(ctx, config_file, params_file, out):
    """Synthesize and verify the terminal set."""
    cdir = ctx.obj["config_dir"]
    data = _read_json(_resolve(config_file, cdir), "synth_config") if config_file else {}
    overrides = dict(data.pop("params", {}))
    if params_file:
        p = _resolve(params_file, cdir)
        try:
            overrides.update(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise _Fail(EXIT_CONFIG, f"{p}: invalid JSON: {exc}") from exc
    params = HydroParams.from_dict({**HydroParams().to_dict(), **overrides})
    cfg = SynthesisConfig.from_dict(data)
    term = synthesize_terminal_set(params, cfg)
    term.save(out)
    lam = np.linalg.eigvalsh(term.P_f_nu)
    click.echo(f"verified: {term.verified}  samples: {term.n_samples}  "
               f"shrink iterations: {term.shrink_iterations}")
    click.echo("velocity semi-axes: " + ", ".join(f"{1 / np.sqrt(v):.4f}" for v in lam))
    click.echo(f"wrote {out}")


@main.command()
@click.option("--case", type=str, help="Scenario case id (1, 2 or 3).")
@click.option("--scenario", help="Scenario JSON file.")
@click.option("--policy", type=click.Choice(POLICY_KINDS), default="los-follower", show_default=True)
@click.option("--agent-cmd", help="Command line of the external agent (policy external).")
@click.option("--replay-file", help="Trajectory CSV whose proposals are re-emitted (policy replay).")
@click.option("--no-psf", is_flag=True, help="Bypass the safety filter.")
@click.option("--no-ship-constraints", is_flag=True, help="Treat moving ships as LiDAR points only.")
@click.option("--seed", type=int, help="Scenario seed (overrides the scenario file).")
@click.option("--t-max", type=float, help="Episode time limit in seconds.")
@click.option("--terminal-set", help="Terminal-set JSON (default: shipped artifact).")
@click.option("--out", required=True, help="Output directory.")
@click.option("--plot/--no-plot", default=True, show_default=True, help="Write run.svg.")
@click.option("--telemetry/--no-telemetry", default=True, show_default=True,
              help="Write per-tick filter telemetry.")
@click.option("--scans", is_flag=True, help="Also write every LiDAR scan to scans.csv.")
@click.pass_context
@_guard
def run(ctx, case, scenario, policy, agent_cmd, replay_file, no_psf, no_ship_constraints, seed,
        t_max, terminal_set, out, plot, telemetry, scans):
    """Run one episode and write its trajectory, telemetry and metrics."""
    cdir = ctx.obj["config_dir"]
    spec = _scenario(case, scenario, seed, cdir)
    cfg = _env_config(no_psf, no_ship_constraints, t_max, scans)
    term = _terminal_set(terminal_set, cdir, not no_psf)
    pol = make_policy(policy, spec.seed, shlex.split(agent_cmd) if agent_cmd else None,
                      _resolve(replay_file, cdir) if replay_file else None)
    result = run_episode(spec, pol, term, cfg)

    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_json(spec.to_dict(), outdir / "scenario.json")
    write_json({"policy": policy, "psf": not no_psf,
                "ship_constraints": not no_ship_constraints, "t_max": t_max},
               outdir / "run_config.json")
    write_json({"world": result.world.to_dict(), "path": result.path.to_dict()},
               outdir / "world.json")
    write_trajectory(result.records, outdir / "trajectory.csv")
    if telemetry:
        write_telemetry(result.telemetry, outdir / "telemetry.jsonl")
    if spec.disturbances:
        write_disturbances(result.records, outdir / "disturbances.csv")
    if scans:
        write_scans(result.scans, spec.dt, outdir / "scans.csv")
    write_json(result.metrics.to_dict(), outdir / "metrics.json")
    if plot:
        from psfnav.plotting import plot_run
        plot_run(result, outdir / "run.svg", cfg.psf)
    m = result.metrics
    click.echo(f"{m.done_reason}: collision={m.collision} progress={m.progress:.3f} "
               f"intervention_rate={m.intervention_rate:.3f} ticks={m.ticks}")


@main.command(name="eval")
@click.option("--case", type=str, help="Scenario case id (1, 2 or 3).")
@click.option("--scenario", help="Scenario JSON file (the seed field is replaced per episode).")
@click.option("--policy", type=click.Choice(POLICY_KINDS), default="los-follower", show_default=True)
@click.option("--agent-cmd", help="Command line of the external agent (policy external).")
@click.option("--no-psf", is_flag=True, help="Bypass the safety filter.")
@click.option("--no-ship-constraints", is_flag=True, help="Treat moving ships as LiDAR points only.")
@click.option("--episodes", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Campaign seed.")
@click.option("--t-max", type=float, help="Episode time limit in seconds.")
@click.option("--workers", type=click.IntRange(min=1), default=os.cpu_count() or 1,
              show_default=True)
@click.option("--terminal-set", help="Terminal-set JSON (default: shipped artifact).")
@click.option("--out", required=True, help="Output directory.")
@click.option("--plot/--no-plot", default=True, show_default=True,
              help="Write radar.svg and solve_times.svg.")
@click.pass_context
@_guard
def evaluate(ctx, case, scenario, policy, agent_cmd, no_psf, no_ship_constraints, episodes,
             seed, t_max, workers, terminal_set, out, plot):
    """Run a campaign of episodes with split seeds and aggregate the metrics."""
    cdir = ctx.obj["config_dir"]
    spec = _scenario(case, scenario, None, cdir)
    cfg = _env_config(no_psf, no_ship_constraints, t_max)
    term = _terminal_set(terminal_set, cdir, not no_psf)
    command = shlex.split(agent_cmd) if agent_cmd else None
    if policy == "replay":
        raise _Fail(EXIT_CONFIG, "the replay policy replays one episode; use the replay command")
    if policy == "external" and not command:
        raise _Fail(EXIT_CONFIG, "policy external needs --agent-cmd")

    outdir = Path(out)
    ep_dir = outdir / "episodes"
    try:
        ep_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot create {ep_dir}: {exc}") from exc

    def save(i, entry, result):
        write_json(entry, ep_dir / f"{i:04d}.json")
        click.echo(f"episode {i}: " + (entry["error"] or entry["metrics"]["done_reason"]), err=True)

    report = run_campaign(spec, episodes, seed, lambda s: make_policy(policy, s, command), term,
                          cfg, workers, on_episode=save)
    report.config.update({"policy": policy, "psf": not no_psf,
                          "ship_constraints": not no_ship_constraints, "t_max": t_max})
    try:
        write_json(report.to_dict(), outdir / "report.json")
        table = summary_table(report)
        (outdir / "summary.txt").write_text(table + "\n")
        if plot:
            from psfnav.plotting import plot_radar, plot_solve_times
            label = f"{policy}{'' if no_psf else ' + PSF'}"
            plot_radar({label: report.aggregate}, outdir / "radar.svg")
            times = [t for e in report.episodes for t in (e["solve_times"] or [])]
            plot_solve_times(times, outdir / "solve_times.svg")
    except OSError as exc:
        raise _Fail(EXIT_IO, f"writing the report failed: {exc}") from exc
    click.echo(table)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--terminal-set", help="Terminal-set JSON (default: shipped artifact).")
@click.option("--out", help="Write the replayed trajectory here.")
@click.pass_context
@_guard
def replay(ctx, run_dir, terminal_set, out):
    """Re-run a logged episode from its proposals and compare trajectories."""
    cdir = ctx.obj["config_dir"]
    rd = Path(run_dir)
    spec = ScenarioSpec.from_dict(_read_json(rd / "scenario.json", "scenario"))
    rc = json.loads((rd / "run_config.json").read_text())
    cfg = _env_config(not rc["psf"], not rc["ship_constraints"], rc["t_max"])
    term = _terminal_set(terminal_set, cdir, rc["psf"])
    logged = read_trajectory(rd / "trajectory.csv")
    pol = ReplayPolicy.from_csv(rd / "trajectory.csv")
    result = run_episode(spec, pol, term, cfg)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_trajectory(result.records, Path(out) / "trajectory.csv")
    again = np.array(trajectory_rows(result.records)).reshape(-1, len(TRAJECTORY_COLUMNS))
    identical = again.shape == logged.shape and bool(np.array_equal(again, logged))
    click.echo(f"ticks: {len(again)} (logged {len(logged)})  bit-identical: {identical}")
    if not identical:
        raise _Fail(EXIT_CONFIG, "replayed trajectory differs from the log")


def recompute_aggregate(report_dir) -> dict:
    """Aggregate a campaign from its per-episode files alone."""
    files = sorted((Path(report_dir) / "episodes").glob("*.json"))
    return aggregate([json.loads(f.read_text()) for f in files])


if __name__ == "__main__":
    main()
