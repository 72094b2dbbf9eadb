#!/usr/bin/env python3
"""
Command-line interface for nrlg diffusion restoration.
"""

import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import numpy as np
from tqdm import tqdm

from . import __version__
from .checksum import derive_file_seed
from .config import DenoiserKind, RunConfig, load_config
from .denoiser import AnalyticDenoiser, Denoiser, ExternalDenoiser, GaussianPrior
from .errors import (
    CapabilityError,
    ConfigError,
    ConvergenceError,
    DomainError,
    FormatError,
    NonFiniteError,
    ProtocolError,
    ShapeMismatchError,
    SingularSystemError,
    TransportError,
)
from .forward import degrade as degrade_image
from .forward import load_measurement, save_measurement, sidecar_path
from .io import TENSOR_SUFFIX, read_image, read_tensor, write_image, write_tensor
from .linops import build_operator
from .metrics import aggregate, evaluate, ssim_constants
from .reports import (
    RunMetadata,
    format_table,
    write_metadata,
    write_metrics_csv,
    write_residuals,
    write_snapshots,
)
from .samplers import RunSpec, SamplingProgress, SamplingStage, Trajectory, sample
from .verify import SUITES, run_suites, write_report


# Setup logging
logger = logging.getLogger(__name__)

EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

THREADS_ENV = "NRLG_THREADS"


def setup_logging(verbose: bool, log_file: Optional[str] = None):
    """Setup logging configuration."""
    level = logging.DEBUG if verbose else logging.INFO
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]

    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def exit_code(error: BaseException) -> int:
    """Exit code of the CLI contract for an exception."""
    if isinstance(error, (ConfigError, DomainError, CapabilityError, ShapeMismatchError)):
        return EXIT_CONFIG
    if isinstance(error, (OSError, FormatError, TransportError, ProtocolError)):
        return EXIT_IO
    if isinstance(error, (NonFiniteError, SingularSystemError, ConvergenceError)):
        return EXIT_NUMERIC
    return EXIT_FAILED


def fail(error: BaseException):
    click.echo(f"Error: {error}", err=True)
    sys.exit(exit_code(error))


def _read_array(path: Path) -> np.ndarray:
    """Tensor files load as-is; anything else is read as a PGM/PPM image."""
    if path.suffix == TENSOR_SUFFIX:
        return read_tensor(path)
    return read_image(path)


def _sampling_progress(disable_progress: bool, desc: str):
    """Progress callback rendering SamplingProgress events, and a closer for its bar."""
    pbar = None

    def callback(event: SamplingProgress):
        nonlocal pbar

        if disable_progress:
            # Non-TTY mode: only show stage changes
            if event.stage == SamplingStage.INITIALIZING:
                click.echo(f"{desc}: sampling {event.total_steps} steps")
            elif event.stage == SamplingStage.COMPLETE:
                click.echo(f"{desc}: complete")
            return

        if event.stage == SamplingStage.SAMPLING:
            if pbar is None:
                pbar = tqdm(total=event.total_steps, unit="step", desc=desc)
            pbar.n = event.step + 1
            if event.residual is not None and np.isfinite(event.residual):
                pbar.set_postfix(t=event.t, residual=f"{event.residual:.4g}")
            pbar.refresh()
        elif event.stage == SamplingStage.COMPLETE:
            if pbar:
                pbar.close()

    def close():
        if pbar:
            pbar.close()

    return callback, close


@click.group()
@click.version_option(version=__version__)
@click.pass_context
def cli(ctx):
    """
    nrlg - Noise-refined likelihood guidance for diffusion restoration

    Commands:
        degrade   Apply a degradation operator and noise to an image
        restore   Restore a measurement with a guided diffusion sampler
        eval      PSNR / SSIM of restored images against references
        verify    Run the oracle verification suites
    """
    ctx.ensure_object(dict)
    ctx.obj['verbose'] = False


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------

@cli.command()
@click.option('--input', '-i', 'input_path', required=True, type=click.Path(),
              help='Clean image (PGM/PPM) or tensor file')
@click.option('--op', 'op_text', required=True,
              help='Operator descriptor, e.g. cs:ratio=0.05,block=32,seed=7')
@click.option('--sigma', default=0.0, type=float, help='Measurement noise std (default: 0)')
@click.option('--seed', default=0, type=click.IntRange(0, 2 ** 64 - 1),
              help='Noise seed (default: 0)')
@click.option('--out', '-o', required=True, type=click.Path(),
              help='Measurement tensor path (.nrtf); a .json sidecar is written beside it')
@click.option('--log-file', '-l', type=click.Path(), help='Path to log file')
@click.option('-v', '--verbose', is_flag=True, help='Enable verbose output')
@click.pass_context
def degrade(ctx, input_path, op_text, sigma, seed, out, log_file, verbose):
    """
    Degrade an image into a measurement y = A x + sigma * g.

    Example:
        nrlg degrade -i face.pgm --op cs:ratio=0.05,block=32,seed=7 -o y.nrtf
        nrlg degrade -i face.ppm --op gaussian_blur:size=5,std=10 --sigma 0.05 -o y.nrtf
    """
    setup_logging(verbose, log_file)

    try:
        source = Path(input_path)
        x = _read_array(source)
        op = build_operator(op_text, x.shape, base_dir=Path.cwd())
        measurement = degrade_image(op, x, sigma, seed, source=str(source))
        tensor_path, side = save_measurement(measurement, out)

        metadata = RunMetadata(
            command="degrade",
            arguments={"input": str(source), "op": op_text, "sigma": sigma, "seed": seed,
                       "out": str(out)},
            seeds={"noise": seed},
            operator=measurement.descriptor.to_dict(),
            extra={"image_shape": list(measurement.image_shape),
                   "measurement_shape": list(measurement.y.shape)},
        )
        metadata.add_artifacts([tensor_path, side])
        write_metadata(tensor_path, metadata)
    except Exception as e:
        fail(e)

    click.echo(f"\n{'=' * 50}")
    click.echo("DEGRADE SUMMARY")
    click.echo(f"{'=' * 50}")
    click.echo(f"Operator: {measurement.descriptor.format()}")
    click.echo(f"Image shape: {measurement.image_shape} -> measurement {measurement.y.shape}")
    click.echo(f"Noise: sigma_y={sigma}, seed={seed}")
    click.echo(f"Measurement: {tensor_path}")
    click.echo(f"Sidecar: {side}")


# ---------------------------------------------------------------------------
# restore
# ---------------------------------------------------------------------------

@dataclass
class RestoreOutcome:
    """Result of restoring one measurement file."""
    measurement: Path
    output: Path
    seed: int
    trajectory: Optional[Trajectory] = None
    config: Optional[RunConfig] = None
    artifacts: List[Path] = field(default_factory=list)
    error: Optional[BaseException] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def build_denoiser(cfg: RunConfig, schedule, shape: Tuple[int, ...]) -> Denoiser:
    """Analytic Gaussian-lab denoiser or a started external endpoint."""
    if cfg.denoiser == DenoiserKind.EXTERNAL.value:
        denoiser = ExternalDenoiser(cfg.external_command, schedule, shape)
        denoiser.start()
        return denoiser

    if cfg.prior_mean_file is not None:
        prior = GaussianPrior.from_files(cfg.resolve_path(cfg.prior_mean_file),
                                         cfg.resolve_path(cfg.prior_var_file))
        if prior.shape != tuple(shape):
            raise ShapeMismatchError("prior", tuple(shape), prior.shape)
    else:
        prior = GaussianPrior.isotropic(shape, cfg.prior_mean, cfg.prior_var)
    return AnalyticDenoiser(prior, schedule)


def restore_measurement(
    measurement_path: Path,
    output: Path,
    base_config: RunConfig,
    seed: int,
    snapshots: Optional[Path] = None,
    progress_callback: Optional[Callable[[SamplingProgress], None]] = None,
) -> RestoreOutcome:
    """
    Restore one measurement and write the image, residual log and snapshots.

    Errors are captured in the outcome rather than raised.
    """
    outcome = RestoreOutcome(measurement_path, output, seed)
    denoiser: Optional[Denoiser] = None
    try:
        measurement = load_measurement(measurement_path)
        if base_config.operator and base_config.operator != measurement.descriptor.format():
            logger.warning(f"Config operator {base_config.operator} ignored; "
                           f"{measurement_path.name} "
                           f"was made with {measurement.descriptor.format()}")
        cfg = base_config.with_presets(measurement.descriptor, measurement.sigma_y)
        outcome.config = cfg

        schedule = cfg.schedule()
        op = measurement.operator(base_dir=measurement_path.parent)
        denoiser = build_denoiser(cfg, schedule, measurement.image_shape)
        spec = RunSpec(
            schedule=schedule,
            plan=cfg.plan(schedule),
            denoiser=denoiser,
            kind=cfg.sampler_kind,
            operator=op,
            y=measurement.y,
            guidance=cfg.guidance(),
            seed=seed,
            rho=cfg.rho,
            snapshot_stride=cfg.snapshot_stride,
            value_range=cfg.value_range,
        )
        trajectory = sample(spec, progress_callback)
        outcome.trajectory = trajectory

        output.parent.mkdir(parents=True, exist_ok=True)
        if output.suffix == TENSOR_SUFFIX:
            written = write_tensor(output, trajectory.x0)
        else:
            lo, hi = cfg.value_range
            written = write_image(output, (trajectory.clamped() - lo) / (hi - lo))
        outcome.artifacts = [written, write_residuals(output, trajectory)]
        if snapshots is not None:
            outcome.artifacts.extend(write_snapshots(snapshots, trajectory))
    except Exception as e:
        if isinstance(e, NonFiniteError):
            logger.error(f"{measurement_path.name}: sampler aborted at step {e.step} (t={e.t})")
        outcome.error = e
    finally:
        if denoiser is not None:
            denoiser.close()
    return outcome


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'")
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads


def _output_name(measurement_path: Path) -> str:
    """PGM for single-channel measurements, PPM for colour."""
    try:
        channels = load_measurement(measurement_path).image_shape[-1]
    except Exception:
        channels = 1
    return measurement_path.stem + (".ppm" if channels == 3 else ".pgm")


def _write_restore_metadata(outcome: RestoreOutcome, arguments: Dict[str, Any],
                            file_index: Optional[int] = None) -> Path:
    cfg = outcome.config
    trajectory = outcome.trajectory
    measurement = load_measurement(outcome.measurement)
    seeds: Dict[str, Any] = {"run": outcome.seed, "streams": "SeedSequence(run).spawn(2)"}
    if file_index is not None and cfg is not None:
        seeds.update({"config": cfg.seed, "file_index": file_index})
    metadata = RunMetadata(
        command="restore",
        arguments=arguments,
        config=cfg.to_dict() if cfg else {},
        seeds=seeds,
        operator=measurement.descriptor.to_dict(),
        extra={
            "measurement": str(outcome.measurement),
            "measurement_seed": measurement.seed,
            "sigma_y": measurement.sigma_y,
            "final_residual": trajectory.final_residual if trajectory else None,
            "steps": len(trajectory.records) if trajectory else 0,
        },
    )
    inputs = [outcome.measurement, sidecar_path(outcome.measurement)]
    metadata.add_artifacts(outcome.artifacts + inputs)
    return write_metadata(outcome.output, metadata)


@cli.command()
@click.option('--measurement', '-m', required=True, type=click.Path(),
              help='Measurement tensor (.nrtf) or a directory of measurements')
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True),
              help='Run config file (key=value)')
@click.option('--out', '-o', required=True, type=click.Path(),
              help='Restored image (.pgm/.ppm, or .nrtf for the raw tensor); '
                   'a directory when --measurement is one')
@click.option('--snapshots', type=click.Path(), help='Directory for trajectory snapshots')
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), help='Override the config seed')
@click.option('--log-file', '-l', type=click.Path(), help='Path to log file')
@click.option('-v', '--verbose', is_flag=True, help='Enable verbose output')
@click.option('--no-progress', is_flag=True,
              help='Disable progress bars (auto-detected for non-TTY)')
@click.pass_context
def restore(ctx, measurement, config_path, out, snapshots, seed, log_file, verbose, no_progress):
    """
    Restore measurements with the configured sampler.

    Writes the restored image, OUT.residuals.csv and OUT.meta.json. A
    directory of measurements is restored file by file with per-file seeds,
    up to NRLG_THREADS at a time.

    Example:
        nrlg restore -m y.nrtf -c run.cfg -o restored.pgm
        NRLG_THREADS=4 nrlg restore -m measurements/ -o restored/
    """
    setup_logging(verbose, log_file)

    # Detect non-TTY
    is_tty = sys.stdout.isatty()
    disable_progress = no_progress or not is_tty

    arguments = {"measurement": measurement, "config": config_path, "out": out,
                 "snapshots": snapshots, "seed": seed}
    try:
        cfg = load_config(config_path)
        run_seed = cfg.seed if seed is None else seed
        source = Path(measurement)
        if source.is_dir():
            _restore_directory(source, Path(out), cfg, run_seed, snapshots, arguments,
                               disable_progress)
            return
    except Exception as e:
        fail(e)

    click.echo(f"Restoring: {source}")
    click.echo(f"Sampler: {cfg.sampler} ({cfg.num_sampling_steps} of T={cfg.T} steps)")

    callback, close = _sampling_progress(disable_progress, source.name)
    outcome = restore_measurement(source, Path(out), cfg, run_seed,
                                  Path(snapshots) if snapshots else None, callback)
    close()
    if not outcome.ok:
        fail(outcome.error)
    try:
        meta = _write_restore_metadata(outcome, arguments)
    except Exception as e:
        fail(e)

    resolved = outcome.config
    click.echo(f"\n{'=' * 50}")
    click.echo("RESTORE SUMMARY")
    click.echo(f"{'=' * 50}")
    click.echo(f"mu={resolved.mu}, zeta={resolved.zeta}, sigma_y={resolved.sigma_y}")
    click.echo(f"Seed: {run_seed}")
    click.echo(f"Final residual ||y - A x0||: {outcome.trajectory.final_residual:.6g}")
    click.echo(f"Output: {outcome.output}")
    click.echo(f"Metadata: {meta}")


def _restore_directory(source: Path, out_dir: Path, cfg: RunConfig, run_seed: int,
                       snapshots: Optional[str], arguments: Dict[str, Any],
                       disable_progress: bool):
    files = sorted(p for p in source.glob(f"*{TENSOR_SUFFIX}") if sidecar_path(p).exists())
    if not files:
        raise FormatError(f"no measurements with sidecars in {source}")
    threads = _thread_count()
    out_dir.mkdir(parents=True, exist_ok=True)
    click.echo(f"Restoring {len(files)} measurement(s) from {source} with {threads} thread(s)")

    def task(index: int, path: Path) -> RestoreOutcome:
        snap_dir = Path(snapshots) / path.stem if snapshots else None
        return restore_measurement(path, out_dir / _output_name(path), cfg,
                                   derive_file_seed(run_seed, index), snap_dir)

    outcomes: List[RestoreOutcome] = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(task, i, p) for i, p in enumerate(files)]
        pbar = None if disable_progress else tqdm(total=len(files), unit="file", desc="Restoring")
        for i, future in enumerate(futures):
            outcome = future.result()
            outcomes.append(outcome)
            if outcome.ok:
                _write_restore_metadata(outcome, arguments, file_index=i)
            if pbar:
                pbar.update(1)
            else:
                status = "ok" if outcome.ok else f"FAILED ({outcome.error})"
                click.echo(f"Restored: {files[i].name} ({i + 1}/{len(files)}) {status}")
        if pbar:
            pbar.close()

    failed = [o for o in outcomes if not o.ok]
    click.echo(f"\n{'=' * 50}")
    click.echo("RESTORE SUMMARY")
    click.echo(f"{'=' * 50}")
    click.echo(f"Measurements: {len(outcomes)}")
    click.echo(f"Restored: {len(outcomes) - len(failed)}")
    if failed:
        click.echo(click.style(f"Failed: {len(failed)}", fg='red'))
        for o in failed:
            click.echo(f"  ! {o.measurement.name}: {o.error}")
        sys.exit(max(exit_code(o.error) for o in failed))


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@cli.command(name='eval')
@click.option('--restored', '-r', multiple=True, required=True, type=click.Path(),
              help='Restored image (repeatable)')
@click.option('--reference', '-f', multiple=True, required=True, type=click.Path(),
              help='Reference image, paired with --restored in order (repeatable)')
@click.option('--out', '-o', type=click.Path(), help='Metrics CSV (default: stdout)')
@click.option('--peak', default=1.0, type=float, help='Peak value for PSNR (default: 1)')
@click.option('--log-file', '-l', type=click.Path(), help='Path to log file')
@click.option('-v', '--verbose', is_flag=True, help='Enable verbose output')
@click.pass_context
def eval_cmd(ctx, restored, reference, out, peak, log_file, verbose):
    """
    PSNR and SSIM of restored images against their references.

    Example:
        nrlg eval -r restored.pgm -f clean.pgm
        nrlg eval -r a.pgm -f a_ref.pgm -r b.pgm -f b_ref.pgm -o metrics.csv
    """
    setup_logging(verbose, log_file)

    try:
        if len(restored) != len(reference):
            raise ConfigError(f"{len(restored)} --restored but {len(reference)} --reference images")
        reports = []
        for r_path, f_path in zip(restored, reference):
            r_path, f_path = Path(r_path), Path(f_path)
            reports.append(evaluate(_read_array(r_path), _read_array(f_path),
                                    image_id=r_path.stem, peak=peak))
        report = aggregate(reports)
    except Exception as e:
        fail(e)

    if out is None:
        write_metrics_csv(report, sys.stdout)
        click.echo("No metadata record written; pass --out to keep one", err=True)
        return

    try:
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as f:
            write_metrics_csv(report, f)
        metadata = RunMetadata(
            command="eval",
            arguments={"restored": list(restored), "reference": list(reference), "out": out,
                       "peak": peak},
            extra={"ssim": ssim_constants(), "metrics": report.to_dict()},
        )
        metadata.add_artifacts([out_path])
        write_metadata(out_path, metadata)
    except Exception as e:
        fail(e)

    click.echo(format_table(report.rows()))
    click.echo(f"\nMetrics: {out_path}")


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@cli.command()
@click.option('--suite', '-s', 'suites', multiple=True, type=click.Choice(list(SUITES)),
              help='Suite to run (repeatable; default: all)')
@click.option('--seed', default=0, type=click.IntRange(0, 2 ** 32 - 1),
              help='Base seed (default: 0)')
@click.option('--report', '-r', type=click.Path(), help='Save JSON report to file')
@click.option('--log-file', '-l', type=click.Path(), help='Path to log file')
@click.option('-v', '--verbose', is_flag=True, help='Enable verbose output')
@click.pass_context
def verify(ctx, suites, seed, report, log_file, verbose):
    """
    Run the oracle verification suites.

    Exits 0 when every check passes, 1 otherwise.

    Example:
        nrlg verify
        nrlg verify -s fd_gradient -s gaussian_marginal -r verify.json
    """
    setup_logging(verbose, log_file)

    try:
        results = run_suites(list(suites) or None, seed=seed)
    except Exception as e:
        fail(e)

    rows = [["suite", "check", "result", "value", "threshold"]]
    for result in results:
        for check in result.checks:
            threshold = "" if check.threshold is None else f"{check.threshold:g}"
            rows.append([result.name, check.name, "PASS" if check.passed else "FAIL",
                         f"{check.value:.4g}", threshold])
    click.echo(format_table(rows))

    passed = all(r.passed for r in results)
    click.echo(f"\n{'=' * 50}")
    for result in results:
        mark = click.style("✓", fg='green') if result.passed else click.style("✗", fg='red')
        click.echo(f"  {mark} {result.name} ({result.duration:.1f}s)")
    click.echo(f"{'=' * 50}")

    if report:
        try:
            report_path = write_report(report, results)
            metadata = RunMetadata(
                command="verify",
                arguments={"suite": list(suites), "seed": seed, "report": report},
                seeds={"base": seed},
                extra={"passed": passed},
            )
            metadata.add_artifacts([report_path])
            write_metadata(report_path, metadata)
            click.echo(f"Report saved: {report_path}")
        except Exception as e:
            fail(e)
    else:
        click.echo("No metadata record written; pass --report to keep one", err=True)

    if not passed:
        sys.exit(EXIT_FAILED)


def main():
    """Entry point for CLI."""
    cli()


if __name__ == '__main__':
    main()
