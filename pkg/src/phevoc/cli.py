import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from phevoc import __version__
from phevoc.cycles import (SPEED_UNITS, highway_like_cycle, load_cycle_csv, sawtooth_cycle,
                           sinusoidal_grade, write_cycle_csv)
from phevoc.embedding import project_modes, pwm_schedule
from phevoc.io import (check_parameters, load_initial_state, load_parameters,
                       parse_overrides, read_controls, read_document, write_json, write_nlp_description,
                       write_schedule, write_table, write_trajectory)
from phevoc.nmpc import NmpcConfig, NmpcController, sliding_soc_weight
from phevoc.report import summarize
from phevoc.simulator import Simulator
from phevoc.solver import SolverConfig
from phevoc.transcription import Mesh, build_nlp

logger = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
EXIT_ERROR = 1
EXIT_SOLVER = 2


def configure_logging() -> None:
    name = os.environ.get("EOCP_LOG_LEVEL", "info").strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if name not in LOG_LEVELS:
        logger.warning("unknown EOCP_LOG_LEVEL %r; using info", name)


def _require_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise click.FileError(path, hint=f"{what} not found")


@click.group()
@click.version_option(__version__, prog_name="phevoc")
def cli():
    """phevoc: embedded optimal control and NMPC for a bi-modal parallel HEV"""
    configure_logging()


@cli.command()
@click.option('--cycle', 'cycle_path', required=True, help='Drive cycle CSV (t, speed[, grade_deg]).')
@click.option('--speed-unit', default='mph', type=click.Choice(sorted(SPEED_UNITS)), help='Unit of the speed column.')
@click.option('--params', 'params_path', default='params/vehicle.yml', show_default=True, help='Vehicle parameter document.')
@click.option('--init', 'init_path', default=None, help='Initial state document (default: init.yml next to --params).')
@click.option('--mode', default='nmpc', type=click.Choice(['nmpc', 'full', 'simulate']), show_default=True)
@click.option('--out', default='.', type=click.Path(file_okay=False), help='Output directory.')
@click.option('--window', default=4.0, show_default=True, help='NMPC window length [s].')
@click.option('--partition', default=1.0, show_default=True, help='Collocation interval and apply length [s].')
@click.option('--tmin', default=1.0, show_default=True, help='Minimum switching period [s].')
@click.option('--tfinal', default=None, type=float, help='Cycle end used by the sliding SOC weight [s] (default: cycle duration).')
@click.option('--grade-deg', default=0.0, show_default=True, help='Sinusoidal road grade amplitude over the cycle [deg].')
@click.option('--weight', 'weights', multiple=True, metavar='KEY=VALUE', help='Override a cost weight.')
@click.option('--controls', 'controls_path', default=None, help='Control table replayed in simulate mode.')
@click.option('--kkt-tol', default=1e-6, show_default=True, help='SQP convergence tolerance.')
@click.option('--max-iter', default=200, show_default=True, help='SQP iteration limit per solve.')
@click.option('--dump-nlp', is_flag=True, help='Write the first NLP (names, bounds, sparsity) to nlp.json.')
def run(cycle_path, speed_unit, params_path, init_path, mode, out, window, partition, tmin, tfinal,
        grade_deg, weights, controls_path, kkt_tol, max_iter, dump_nlp):
    """Run NMPC, a full-horizon solve, or a plant replay over a drive cycle."""
    try:
        _require_file(params_path, "parameter file")
        _require_file(cycle_path, "cycle file")
        params, cost_weights = load_parameters(params_path, parse_overrides(weights))
        init_path = init_path or str(Path(params_path).parent / 'init.yml')
        x0 = load_initial_state(init_path, cost_weights)
        cycle = load_cycle_csv(cycle_path, speed_unit)
        if grade_deg:
            cycle = cycle.with_grade(sinusoidal_grade(math.radians(grade_deg), cycle.duration))
        config = NmpcConfig(window_length=window, partition=partition, t_min=tmin, t_final=tfinal)
        solver_config = SolverConfig(kkt_tol=kkt_tol, max_iter=max_iter)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)

        sim = Simulator(params, cost_weights, config.max_substep)
        controller = NmpcController(sim, config, solver_config)
        if dump_nlp and mode != 'simulate':
            resolved = config.resolved(cycle, cost_weights)
            if mode == 'full':
                mesh = Mesh(0.0, int(round(cycle.duration / partition)), partition)
                c_bat = resolved.c_bat_nom
            else:
                n = max(1, min(resolved.intervals_per_window, int(cycle.duration // partition)))
                mesh = Mesh(0.0, n, partition)
                c_bat = sliding_soc_weight(mesh.t_end, resolved)
            problem = build_nlp(mesh, x0, cycle, cost_weights, params, c_bat=c_bat, freeze_grade=(mode == 'nmpc'))
            write_nlp_description(problem, out_dir / 'nlp.json')

        click.echo(f"Running {mode} over {cycle.name} ({cycle.duration:.0f} s)...")
        if mode == 'nmpc':
            log = controller.run(cycle, x0)
        elif mode == 'full':
            log = controller.run_full_horizon(cycle, x0)
        else:
            if controls_path is None:
                raise click.UsageError("--mode simulate needs --controls")
            _require_file(controls_path, "control table")
            log = sim.replay(cycle, x0, read_controls(controls_path))

        summary = summarize(log, params)
        write_trajectory(log.frame, out_dir / 'trajectory.csv')
        write_json(summary, out_dir / 'summary.json')
        write_schedule(log.schedule, out_dir / 'mode_schedule.csv')
        write_table(log.solver_history, out_dir / 'solver_iterations.csv')
        write_table(log.windows, out_dir / 'windows.csv')
        write_table(log.applied, out_dir / 'applied_controls.csv')
        if log.embedded is not None:
            write_table(log.embedded, out_dir / 'embedded_solution.csv')
        write_json({
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "phevoc_version": __version__,
            "mode": mode, "cycle": str(cycle_path), "speed_unit": speed_unit,
            "params": str(params_path), "init": str(init_path), "weight_overrides": list(weights),
            "window": window, "partition": partition, "tmin": tmin, "tfinal": tfinal,
            "grade_deg": grade_deg, "kkt_tol": kkt_tol, "max_iter": max_iter,
        }, out_dir / 'run_metadata.json')

        click.echo(f"RMS tracking error: {summary.get('rms_tracking_mps', float('nan')):.4f} m/s")
        click.echo(f"Final SOC: {summary.get('final_soc', float('nan')):.4f}")
        click.echo(f"Fuel economy: {summary.get('mpg', float('nan')):.2f} mpg")
        click.echo(f"Results saved to {out_dir}")
        if log.aborted or log.solver_failures:
            click.echo(f"Warning: {log.solver_failures} non-optimal solves"
                       f"{', run aborted' if log.aborted else ''}", err=True)
            sys.exit(EXIT_SOLVER)
    except (click.FileError, click.UsageError) as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        sys.exit(EXIT_ERROR)
    except (OSError, ValueError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_ERROR)


@cli.command('validate-params')
@click.argument('path')
def validate_params(path):
    """Check a parameter document against every invariant."""
    try:
        _require_file(path, "parameter file")
        problems = check_parameters(read_document(path))
    except click.FileError as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        sys.exit(EXIT_ERROR)
    except (OSError, ValueError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_ERROR)
    if problems:
        for problem in problems:
            click.echo(problem, err=True)
        click.echo(f"{len(problems)} violation(s) in {path}", err=True)
        sys.exit(EXIT_ERROR)
    click.echo(f"{path}: OK")


@cli.command()
@click.argument('trajectory')
@click.option('--tmin', default=1.0, show_default=True, help='Minimum switching period [s].')
@click.option('--out', default='.', type=click.Path(file_okay=False), help='Output directory.')
def project(trajectory, tmin, out):
    """Turn a fractional mode trace into switched schedules (projection and PWM)."""
    try:
        _require_file(trajectory, "trajectory file")
        table = read_controls(trajectory)
        t = table["t_s"].to_numpy()
        if t.size < 2:
            raise ValueError(f"{trajectory}: need at least two rows")
        nodes = np.append(t, t[-1] + (t[-1] - t[-2]))
        v = table["v"].to_numpy()
        u0 = table[["u0_ice", "u0_fr", "u0_em"]].to_numpy()
        u1 = table[["u1_ice", "u1_fr", "u1_gen"]].to_numpy()
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        projected = project_modes(nodes, v, u0, u1, tmin)
        pwm = pwm_schedule(nodes, v, tmin)
        write_schedule(projected, out_dir / 'schedule_projection.csv')
        write_schedule(pwm, out_dir / 'schedule_pwm.csv')
        click.echo(f"Projection: {projected.n_switches} switches; PWM: {pwm.n_switches} switches")
        click.echo(f"Schedules saved to {out_dir}")
    except click.FileError as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        sys.exit(EXIT_ERROR)
    except (OSError, ValueError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_ERROR)


@cli.command()
@click.argument('kind', type=click.Choice(['sawtooth', 'highway']))
@click.option('--duration', default=None, type=float, help='Cycle length [s].')
@click.option('--peak', default=25.0, show_default=True, help='Sawtooth peak speed [m/s].')
@click.option('--period', default=45.0, show_default=True, help='Sawtooth period [s].')
@click.option('--cruise', default=22.0, show_default=True, help='Highway cruise speed [m/s].')
@click.option('--grade-deg', default=0.0, show_default=True, help='Sinusoidal grade amplitude [deg].')
@click.option('--speed-unit', default='mps', type=click.Choice(sorted(SPEED_UNITS)), show_default=True)
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False), help='CSV to write.')
def cycle(kind, duration, peak, period, cruise, grade_deg, speed_unit, out_path):
    """Generate a synthetic drive cycle."""
    try:
        if kind == 'sawtooth':
            generated = sawtooth_cycle(period=period, peak=peak, duration=duration)
        else:
            generated = highway_like_cycle(duration=duration or 100.0, cruise=cruise)
        if grade_deg:
            generated = generated.with_grade(sinusoidal_grade(math.radians(grade_deg), generated.duration))
        write_cycle_csv(generated, out_path, speed_unit)
        click.echo(f"{kind} cycle ({generated.duration:.0f} s) saved to {out_path}")
    except (OSError, ValueError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_ERROR)
