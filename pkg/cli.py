"""
Command Line Interface for the q-space structure toolkit
"""

import click
import sys
import logging
from functools import wraps
from pathlib import Path

from config import APP_VERSION, load_config
from db_operations import DatabaseManager, list_calibrations, save_calibration
from errors import ConfigurationError, QStructureError
from harness import (
    LABEL_CODES, TRACE_COLUMNS, analyze_volume, format_rejections, load_volume, resolve_scheme, run_fiber_trace,
    run_rejection_study, simulate_volume,
)
from phantom import electrostatic_scheme, min_antipodal_angle, save_scheme
from sentry_logging import (
    init_sentry, log_calibration_completed, log_rejection_study_completed, log_volume_analyzed,
    sentry_track, set_run_context
)
from stats import STATISTICS, calibrate_all, write_calibrations

logger = logging.getLogger(__name__)


def experiment_options(func):
    """Config file plus the flags that override it"""
    options = [
        click.option('--config', 'config_path', type=click.Path(), help='key = value configuration file'),
        click.option('--models', help='Comma-separated models, e.g. A1,A3'),
        click.option('--noise', help='Comma-separated noise levels as fractions of A(0), e.g. 1/30,1/2'),
        click.option('--scheme', help='Direction count or scheme file'),
        click.option('--n0', type=int, help='Number of b=0 acquisitions'),
        click.option('--reps', type=int, help='Monte Carlo replicates'),
        click.option('--seed', type=int, help='Master seed'),
        click.option('--output', help='Output directory'),
        click.option('--workers', type=int, help='Worker processes'),
        click.option('--backend', help='joblib backend'),
        click.option('--N', 'N', type=int, help='Grid size (multiple of 8)'),
        click.option('--rho', type=float),
        click.option('--m', type=int),
        click.option('--m-prime', 'm_prime', type=int),
        click.option('--c', type=float),
        click.option('--min-tail-count', 'min_tail_count', type=int),
        click.option('--chunk-size', 'chunk_size', type=int),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def resolve_config(config_path, **overrides):
    """Load the configuration and print the version banner"""
    if config_path and not Path(config_path).exists():
        click.echo(f"Error: config file not found: {config_path}", err=True)
        sys.exit(2)
    try:
        config = load_config(config_path, **overrides)
    except ConfigurationError as e:
        raise click.UsageError(str(e))
    click.echo(f"qstructure {APP_VERSION} - config {config.config_hash()[:16]}")
    set_run_context(config)
    return config


def handle_errors(func):
    """One-line diagnostic and exit status 1 for toolkit errors (already reported by sentry_track)"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (QStructureError, OSError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(1)
    return wrapper


def get_db(ctx):
    db = ctx.obj['db']
    if db is None:
        db = DatabaseManager(ctx.obj['db_url'])
        db.init_database()
        ctx.obj['db'] = db
    return db


@click.group()
@click.option('--verbose', is_flag=True, help='Debug logging')
@click.option('--db-url', envvar='QSTRUCT_DB_URL', help='Calibration database URL')
@click.version_option(APP_VERSION, prog_name='qstructure')
@click.pass_context
def cli(ctx, verbose, db_url):
    """q-space structure tests for HARDI data"""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    init_sentry()
    ctx.ensure_object(dict)
    ctx.obj.setdefault('db_url', db_url)
    ctx.obj.setdefault('db', None)


@cli.command()
@click.option('--directions', type=int, default=60, show_default=True, help='Number of directions')
@click.option('--n0', type=int, default=1, show_default=True)
@click.option('--output', type=click.Path(), required=True, help='Scheme file to write')
@handle_errors
@sentry_track('scheme')
def scheme(directions, n0, output):
    """Write an electrostatic direction scheme"""
    result = electrostatic_scheme(directions, n0=n0)
    save_scheme(result, output)
    click.echo(f"{result.n} directions, smallest pair angle {min_antipodal_angle(result.directions):.2f} deg "
               f"-> {output}")


@cli.command()
@experiment_options
@click.option('--dims', default='6,2,2', show_default=True, help='Volume size nx,ny,nz')
@handle_errors
@sentry_track('simulate')
def simulate(config_path, dims, **overrides):
    """Write a synthetic volume with the models in slabs along x"""
    config = resolve_config(config_path, **overrides)
    try:
        size = tuple(int(v) for v in dims.split(','))
    except ValueError:
        raise click.BadParameter(f"expected nx,ny,nz, got '{dims}'", param_hint='--dims')
    header = Path(config.output or 'results') / 'volume.hdr'
    simulate_volume(config, size, header)
    click.echo(f"Volume {size} written to {header}")


@cli.command()
@experiment_options
@click.option('--statistics', default=','.join(STATISTICS), show_default=True,
              help='Statistics to calibrate')
@click.pass_context
@handle_errors
@sentry_track('calibrate')
def calibrate(ctx, config_path, statistics, **overrides):
    """Monte Carlo null calibration for every configured noise level"""
    config = resolve_config(config_path, **overrides)
    names = [s.strip() for s in statistics.split(',') if s.strip()]
    unknown = [s for s in names if s not in STATISTICS]
    if unknown:
        raise click.BadParameter(f"unknown statistics {unknown}", param_hint='--statistics')

    scheme_used = resolve_scheme(config)
    db = get_db(ctx)
    calibrations = []
    for noise in config.noise_levels:
        tables = calibrate_all(noise, scheme_used, config.settings, config.replicates, config.seed, names,
                               config.workers, config.backend, config.min_tail_count)
        for table in tables:
            save_calibration(table, db=db)
            click.echo(f"{table.statistic:<8} noise {noise:<8.4f} null {table.null_model}  "
                       f"mean {table.mean: .4f}  std {table.std:.4f}")
        calibrations.extend(tables)

    output_dir = Path(config.output or 'results')
    output_dir.mkdir(parents=True, exist_ok=True)
    write_calibrations(calibrations, output_dir / 'calibration.txt')
    log_calibration_completed(config.config_hash(), calibrations)
    click.echo(f"{len(calibrations)} calibrations stored; table written to {output_dir / 'calibration.txt'}")


@cli.command()
@click.pass_context
def calibrations(ctx):
    """List stored calibrations"""
    records = list_calibrations(db=get_db(ctx))
    if not records:
        click.echo("No calibrations found.")
        return
    click.echo("-" * 72)
    for r in records:
        click.echo(f"ID: {r['id']} | {r['statistic']} under {r['null_model']} at noise {r['noise_sigma']:g} "
                   f"| {r['reps']} reps, seed {r['seed']} | {r['null_spec'][:12]}")
    click.echo("-" * 72)


@cli.command()
@experiment_options
@click.pass_context
@handle_errors
@sentry_track('rejections')
def rejections(ctx, config_path, **overrides):
    """Rejection counts of the five tests per model and noise level"""
    config = resolve_config(config_path, **overrides)
    rows = run_rejection_study(config, db=get_db(ctx))
    click.echo(format_rejections(rows), nl=False)
    log_rejection_study_completed(config.config_hash(), rows)


cli.add_command(rejections, name='table3')


@cli.command()
@click.option('--kind', type=click.Choice(['forking', 'crossing']), default='forking', show_default=True)
@click.option('--config', 'config_path', type=click.Path(), help='key = value configuration file')
@click.option('--N', 'N', type=int, help='Grid size (multiple of 8)')
@click.option('--output', type=click.Path(), help='CSV file to write')
@handle_errors
@sentry_track('trace')
def trace(kind, config_path, N, output):
    """Noiseless summaries along a fiber evolution sequence"""
    config = resolve_config(config_path, N=N)
    output = output or str(Path(config.output or 'results') / f"trace_{kind}.csv")
    rows = run_fiber_trace(kind, config.settings.N, output, config.settings.L)
    click.echo("  ".join(f"{c:>9}" for c in TRACE_COLUMNS))
    for label, s in rows:
        click.echo(f"{label:>9}  " + "  ".join(f"{getattr(s, c):>9.4f}" for c in TRACE_COLUMNS[1:]))
    click.echo(f"Trace written to {output}")


@cli.command()
@experiment_options
@click.option('--volume', type=click.Path(), required=True, help='Volume header file')
@click.pass_context
@handle_errors
@sentry_track('analyze')
def analyze(ctx, config_path, volume, **overrides):
    """Voxelwise tests and classification of a volume"""
    config = resolve_config(config_path, **overrides)
    dataset = load_volume(volume)
    result = analyze_volume(dataset, config, db=get_db(ctx))
    for label, count in result['label_counts'].items():
        click.echo(f"{label:<20} {count:>8}  (code {LABEL_CODES[label]})")
    log_volume_analyzed(config.config_hash(), int(dataset.mask.sum()), result['label_counts'])


if __name__ == '__main__':
    cli()
