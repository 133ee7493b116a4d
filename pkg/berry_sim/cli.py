"""
    berry_sim.cli
    ~~~~~~~~~~~~~

    The ``berry-sim`` command.  Every command runs inside the application
    built by :func:`berry_sim.create_app` from ``--config``, ``--set`` and
    its own flags, and writes an effective-config snapshot next to its
    outputs.

    Exit codes: 0 success, 2 configuration or input error, 3 numerical
    failure during training.
"""

import logging
import os

import click
from flask import render_template
from flask.cli import ScriptInfo, with_appcontext

from berry_sim import create_app, get_sim
from berry_sim.config import config_hash, dump_config
from berry_sim.env import BUNDLED_PREFIX, env_factory
from berry_sim.errors import BerrySimError, TrainingDivergedError
from berry_sim.evaluation import (
    comparison_csv,
    compare_reports,
    read_report,
    run_campaign,
    write_report,
)
from berry_sim.faults import MemoryLayout, fault_statistics, read_fault_map, write_fault_map
from berry_sim.formatting import format_decimal
from berry_sim.qnet import load_checkpoint, save_checkpoint
from berry_sim.rl import MODES, berry_train, estimate_learning_energy

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class CommandError(click.ClickException):
    def __init__(self, message: str, exit_code: int = EXIT_USAGE):
        super().__init__(message)
        self.exit_code = exit_code


class BerryGroup(click.Group):
    """Turns library errors into click errors with stable exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except TrainingDivergedError as e:
            raise CommandError(str(e), EXIT_NUMERICAL) from e
        except BerrySimError as e:
            raise CommandError(str(e)) from e
        except OSError as e:
            raise CommandError(f"{e.filename or ''}: {e.strerror or e}") from e


def _flag(key: str):
    """Option callback recording a value that overrides config key `key`."""

    def callback(ctx, param, value):
        if value is not None and value != ():
            flags = ctx.ensure_object(ScriptInfo).data.setdefault("flags", {})
            flags[key] = list(value) if isinstance(value, tuple) else value
        return value

    return callback


def _check_paths(run, *, checkpoint: bool = False) -> None:
    missing = []
    candidates = [
        ("faults.fault_map", run.faults.fault_map),
        ("faults.curve", run.faults.curve),
        ("platform.file", run.platform.file),
    ]
    if not run.env.map_file.startswith(BUNDLED_PREFIX):
        candidates.append(("env.map_file", run.env.map_file))
    if checkpoint:
        if not run.io.checkpoint:
            raise CommandError("no checkpoint given (io.checkpoint or --checkpoint)")
        candidates.append(("io.checkpoint", run.io.checkpoint))
    for key, path in candidates:
        if path and not os.path.isfile(path):
            missing.append(f"{key}={path}")
    if missing:
        raise CommandError("missing input files: " + ", ".join(missing))


def _output_dir(sim) -> str:
    path = sim.run.io.output_dir
    os.makedirs(path, exist_ok=True)
    snapshot = os.path.join(path, f"effective-config-{sim.config_hash}.toml")
    with open(snapshot, "w", encoding="utf-8") as fh:
        fh.write(dump_config(sim.run))
    return path


@click.group(cls=BerryGroup)
@click.option(
    "-c",
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    help="TOML run configuration.",
)
@click.option(
    "-s",
    "--set",
    "overrides",
    multiple=True,
    metavar="SECTION.KEY=VALUE",
    help="Override one config value (TOML literal).",
)
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for details.")
@click.pass_context
def main(ctx, config, overrides, verbose):
    """Error-aware RL simulator for low-voltage aerial robots."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    info = ctx.ensure_object(ScriptInfo)
    info.create_app = lambda: create_app(config, overrides, info.data.get("flags"))


@main.command()
@click.option("--mode", type=click.Choice(MODES), expose_value=False, callback=_flag("train.mode"))
@click.option("--p", type=float, expose_value=False, callback=_flag("train.p"),
              help="Training bit error rate.")
@click.option("--seed", type=int, expose_value=False, callback=_flag("seed"))
@click.option("--episodes", type=int, expose_value=False, callback=_flag("train.episodes"))
@click.option("--fault-map", expose_value=False, callback=_flag("faults.fault_map"),
              help="Chip map for berry_ondevice.")
@click.option("--output-dir", expose_value=False, callback=_flag("io.output_dir"))
@with_appcontext
def train(**_):
    """Train a policy and write checkpoint, log and config snapshot."""
    sim = get_sim()
    run = sim.run
    _check_paths(run)
    fault_map = sim.fault_map if run.train.mode == "berry_ondevice" else None
    out = _output_dir(sim)
    net, log = berry_train(
        env_factory(run.env),
        run.train,
        seed=run.seed,
        fault_map=fault_map,
        fault_model=sim.fault_model,
        activation_injection=run.faults.activation_injection,
    )
    stem = os.path.join(out, f"{run.train.mode}-{sim.config_hash}")
    save_checkpoint(stem + ".bqn", net, seed=run.seed, step=log.steps)
    log.write_csv(stem + "-log.csv")
    click.echo(f"checkpoint {stem}.bqn")
    click.echo(f"log {stem}-log.csv")
    click.echo(
        f"{log.steps} steps, success {format_decimal(log.success_rate(), '0.000')} overall"
    )


@main.command()
@click.option("--checkpoint", expose_value=False, callback=_flag("io.checkpoint"))
@click.option("--voltage", "voltages", type=float, multiple=True, expose_value=False,
              callback=_flag("campaign.voltages"), help="Repeat for several voltages.")
@click.option("--maps", type=int, expose_value=False, callback=_flag("campaign.maps_per_voltage"))
@click.option("--episodes", type=int, expose_value=False,
              callback=_flag("campaign.episodes_per_map"))
@click.option("--jobs", type=int, expose_value=False, callback=_flag("campaign.jobs"))
@click.option("--output-dir", expose_value=False, callback=_flag("io.output_dir"))
@with_appcontext
def sweep(**_):
    """Evaluate a checkpoint across supply voltages."""
    sim = get_sim()
    run = sim.run
    _check_paths(run, checkpoint=True)
    network = load_checkpoint(run.io.checkpoint).network
    out = _output_dir(sim)
    report = run_campaign(
        run.campaign,
        network,
        run.env,
        sim.fault_model,
        sim.platform,
        sim.curve,
        profiled_map=sim.fault_map if run.faults.pattern == "profiled" else None,
        activation_injection=run.faults.activation_injection,
        metadata={"config_hash": sim.config_hash, "checkpoint": run.io.checkpoint},
    )
    csv_path, json_path = write_report(report, out)
    click.echo(render_template("sweep.txt", rows=report.rows, meta=report.metadata))
    click.echo(f"wrote {csv_path} and {json_path}")


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", type=click.Path(dir_okay=False),
              help="Comparison CSV (default: under io.output_dir).")
@with_appcontext
def report(reports, output):
    """Compare sweeps: one report against itself or B against A."""
    if len(reports) > 2:
        raise CommandError("give one or two reports")
    a = read_report(reports[0])
    b = read_report(reports[-1])
    rows = compare_reports(a, b)
    click.echo(
        render_template(
            "report.txt",
            rows=rows,
            name_a=os.path.basename(reports[0]),
            name_b=os.path.basename(reports[-1]),
        )
    )
    if output is None:
        out = _output_dir(get_sim())
        names = "|".join(os.path.basename(r) for r in reports)
        output = os.path.join(out, f"comparison-{config_hash({'reports': names})}.csv")
    with open(output, "w", encoding="utf-8", newline="") as fh:
        fh.write(comparison_csv(rows))
    click.echo(f"wrote {output}")


@main.group()
def faultmap():
    """Sample or inspect profiled fault-map files."""


@faultmap.command("sample")
@click.option("--p", "rate", type=float, required=True, help="Bit error rate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--rows", type=int, help="Chip rows; default fits the configured network.")
@click.option("--output", type=click.Path(dir_okay=False))
@with_appcontext
def faultmap_sample(rate, seed, rows, output):
    """Write a fault map drawn with the configured pattern."""
    sim = get_sim()
    run = sim.run
    model = sim.fault_model
    if rows is None:
        widths = (run.env.observation_size, *run.train.hidden, run.env.n_actions)
        counts = [
            fan_in * fan_out + (fan_out if model.include_biases else 0)
            for fan_in, fan_out in zip(widths, widths[1:])
        ]
        layout = MemoryLayout.for_codes(counts, model.columns)
    else:
        layout = MemoryLayout(rows, model.columns)
    fault_map = model.sample(layout, rate, seed)
    if output is None:
        out = _output_dir(sim)
        output = os.path.join(out, f"faultmap-{model.pattern}-p{rate:g}-s{seed}.txt")
    write_fault_map(output, fault_map)
    click.echo(f"wrote {len(fault_map)} faults ({layout.rows}x{layout.cols} bits) to {output}")


@faultmap.command("inspect")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@with_appcontext
def faultmap_inspect(path):
    """Summarise a fault map: count, rate, column histogram, stuck bias."""
    fault_map = read_fault_map(path)
    stats = fault_statistics(fault_map)
    columns = [(c, n) for c, n in enumerate(stats.column_counts) if n]
    click.echo(
        render_template(
            "inspect.txt",
            stats=stats,
            source=fault_map.source,
            rows=fault_map.rows,
            cols=fault_map.cols,
            columns=columns,
        )
    )


@main.command("learning-energy")
@click.option("--steps", type=int, multiple=True, default=(1000, 2000, 4000, 6000),
              show_default=True)
@click.option("--voltage", "voltages", type=float, multiple=True, default=(1.0, 0.77),
              show_default=True)
@with_appcontext
def learning_energy(steps, voltages):
    """Energy of on-device learning on the configured platform."""
    sim = get_sim()
    click.echo(f"{'steps':>8} {'v_norm':>7} {'energy J':>12}")
    for v_norm in voltages:
        for n in steps:
            joules = estimate_learning_energy(n, v_norm, sim.platform, sim.curve)
            click.echo(
                f"{n:>8} {format_decimal(v_norm, '0.00'):>7} "
                f"{format_decimal(joules, '#,##0.0'):>12}"
            )
