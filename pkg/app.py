import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

# Add the current directory to the Python path
sys.path.append(str(Path(__file__).parent))

from components.analytics import METRIC_COLUMNS, kalman_deviation, ks_uniformity, metrics_table, \
    posterior_predictive_check, predictive_frame, summarize_metrics  # noqa: E402
from components.dashboard import render_figures  # noqa: E402
from services.database import configure_database, finish_run, get_logs_from_database, get_runs, \
    get_step_metrics, save_step_metrics, start_run  # noqa: E402
from services.denoiser import AnalyticLGDenoiser, EpochStats, TrainConfig, train_denoiser  # noqa: E402
from services.dynamics import LORENZ96, LinearGaussianSSM, ObservationModel, generate_truth_and_obs, \
    system_from_config, training_pairs  # noqa: E402
from services.guidance import GuidanceConfig  # noqa: E402
from services.oracle import kalman_filter  # noqa: E402
from services.particle_filter import FilterConfig, conditional_samples, faapf_run, forecast_samples, \
    unconditional_ensemble_run  # noqa: E402
from services.sampler import SamplerConfig  # noqa: E402
from services.schedule import NoiseSchedule  # noqa: E402
from services.storage import checkpoint_paths, dataset_files, load_checkpoint, load_snapshots, read_dataset, \
    read_table, save_checkpoint, save_snapshots, write_dataset, write_manifest, write_table  # noqa: E402
from utils.config import config_manager, load_config, resolve_workers  # noqa: E402
from utils.errors import AssimilationError, ShapeMismatchError  # noqa: E402
from utils.logging import get_logger, log_resources, log_run_event, log_system_event, \
    setup_logging  # noqa: E402

logger = get_logger("app")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def execute(ctx: click.Context, command: str, body, **kwargs):
    """Run a command body inside the run registry, mapping errors to exit codes"""
    config = ctx.obj
    out_dir = Path(config["run"]["out_dir"])
    configure_database(config["database"]["path"], config["database"]["enabled"])
    run_id = start_run(command, config_hash(config), str(out_dir))
    log_resources(command)
    log_run_event(run_id, "started", f"{command} into {out_dir}", seed=config["run"]["seed"])

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        body(config, out_dir, run_id, **kwargs)
    except AssimilationError as e:
        log_system_event(command, "error", str(e), level="ERROR", error=type(e).__name__)
        log_run_event(run_id, "failed", str(e), level="ERROR")
        finish_run(run_id, "failed")
        click.echo(f"error: {e}", err=True)
        ctx.exit(e.exit_code)
    except Exception as e:
        log_system_event(command, "crash", str(e), level="ERROR", error=type(e).__name__)
        log_run_event(run_id, "failed", f"{type(e).__name__}: {e}", level="ERROR")
        finish_run(run_id, "failed")
        raise

    finish_run(run_id, "completed")
    log_run_event(run_id, "finished", f"{command} completed")


@click.group()
@click.option('--config', 'config_path', help='Config file (JSON or TOML)', metavar='PATH',
              type=click.Path(dir_okay=False), default=None)
@click.option('--seed', help='Master random seed', metavar='INT', type=int, default=None)
@click.option('--workers', help='Worker threads, 0 for one per core', metavar='INT',
              type=click.IntRange(min=0), default=None)
@click.option('--out', 'out_dir', help='Output directory', metavar='DIR', type=click.Path(file_okay=False),
              default=None)
@click.option('--log-level', help='Logging level', type=click.Choice(
    ['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False), default=None)
@click.pass_context
def cli(ctx, config_path, seed, workers, out_dir, log_level):
    """Particle filtering with a guided diffusion proposal on twin experiments."""
    try:
        config = load_config(config_path, {
            "run.seed": seed,
            "run.workers": workers,
            "run.out_dir": out_dir,
            "logging.level": log_level.upper() if log_level else None,
        })
    except AssimilationError as e:
        click.echo(f"error: {e}", err=True)
        ctx.exit(e.exit_code)

    setup_logging(config["logging"]["level"], config["logging"]["file"] or None)
    ctx.obj = config


@cli.command('print-config')
@click.option('--save', 'save_path', help='Also write the resolved configuration to this JSON file',
              metavar='PATH', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def print_config(config, save_path):
    """Print the fully resolved configuration."""
    click.echo(json.dumps(config, indent=2, sort_keys=True))
    if save_path:
        target = config_manager.save_config(config, save_path)
        logger.info(f"Saved resolved configuration to {target}")


def _generate(config, out_dir, run_id):
    dynamics = config["dynamics"]
    seed = config["run"]["seed"]
    system = system_from_config(config)
    obs = ObservationModel.from_config(config["observation"], system.dim)
    spin_up = dynamics["spin_up_steps"] if dynamics["spin_up"] and system.kind == LORENZ96 else 0

    dataset = generate_truth_and_obs(system, obs, config["experiment"]["steps"], seed, spin_up)
    outputs = write_dataset(dataset, out_dir, extra={
        "stride": config["observation"]["stride"],
        "offset": config["observation"]["offset"],
        "noise_std": config["observation"]["noise_std"],
    })
    write_manifest(out_dir, "generate", config, {"run": seed}, [], outputs)
    log_run_event(run_id, "dataset", f"{dataset.steps} steps, d={system.dim}, m={obs.m}")


@cli.command()
@click.pass_context
def generate(ctx):
    """Simulate a truth trajectory and its observations."""
    execute(ctx, "generate", _generate)


def _train(config, out_dir, run_id, data_dir):
    dataset = read_dataset(data_dir)
    schedule = NoiseSchedule.from_config(config["schedule"])
    cfg = TrainConfig.from_config(config["train"])
    pairs = training_pairs(dataset.system, config["train"]["n_pairs"], cfg.seed,
                           spin_up_steps=dataset.spin_up_steps)

    history = []
    model = train_denoiser(pairs, schedule, cfg, on_epoch=history.append,
                           progress=config["run"]["progress"])
    losses = pd.DataFrame(history, columns=list(EpochStats._fields))
    if history and history[-1].heldout_loss >= history[-1].baseline_loss:
        log_run_event(run_id, "training", "held-out loss did not beat the trivial predictor", level="WARNING",
                      heldout=history[-1].heldout_loss, baseline=history[-1].baseline_loss)

    outputs = save_checkpoint(model, out_dir / "denoiser")
    outputs.append(write_table(losses, out_dir / "training_loss.csv"))
    write_manifest(out_dir, "train", config, {"run": config["run"]["seed"], "train": cfg.seed},
                   dataset_files(data_dir), outputs)
    log_run_event(run_id, "checkpoint", f"trained {model.widths} for {cfg.epochs} epochs",
                  params=model.param_count)


@cli.command()
@click.option('--dataset', 'data_dir', help='Dataset directory [default: --out]', metavar='DIR',
              type=click.Path(file_okay=False), default=None)
@click.pass_context
def train(ctx, data_dir):
    """Train the MLP denoiser on transitions of the dataset's system."""
    execute(ctx, "train", _train, data_dir=Path(data_dir or ctx.obj["run"]["out_dir"]))


def _trajectory_frame(truth, filter_particles, baseline, observations, obs, coordinate):
    frame = pd.DataFrame({
        'step': np.arange(truth.shape[0]),
        'truth': truth[:, coordinate],
        'filter_mean': filter_particles.mean(axis=1)[:, coordinate],
    })
    if baseline is not None:
        frame['baseline_mean'] = baseline.mean(axis=1)[:, coordinate]
    rows = np.flatnonzero(obs.observed_indices == coordinate)
    observed = np.full(truth.shape[0], np.nan)
    if rows.size:
        observed[1:] = observations[:, rows[0]]
    frame['observation'] = observed
    return frame


def _calibration_frame(den, obs, particles, observations, sampler_cfg, coordinate, seed, workers):
    """Rank of each y^k under the one-step forecast predictive of the ensemble at step k-1"""
    ranks = []
    for k in range(1, observations.shape[0] + 1):
        forecast = forecast_samples(den, particles[k - 1], sampler_cfg, seed, k, workers)
        ranks.append(posterior_predictive_check(forecast, obs, observations[k - 1], coordinate).rank)
    return pd.DataFrame({'step': np.arange(1, observations.shape[0] + 1), 'rank': ranks})


def _assimilate(config, out_dir, run_id, data_dir, denoiser, baseline, checkpoint):
    dataset = read_dataset(data_dir)
    schedule = NoiseSchedule.from_config(config["schedule"])
    seed = config["run"]["seed"]
    workers = resolve_workers(config)
    progress = config["run"]["progress"]
    inputs = dataset_files(data_dir)

    if denoiser == "analytic":
        if not isinstance(dataset.system, LinearGaussianSSM):
            raise ShapeMismatchError("The analytic denoiser needs a linear-Gaussian dataset")
        den = AnalyticLGDenoiser(dataset.system, schedule)
    else:
        den = load_checkpoint(checkpoint, schedule)
        if den.dim != dataset.system.dim:
            raise ShapeMismatchError(f"Checkpoint dimension {den.dim} does not match dataset dimension "
                                     f"{dataset.system.dim}")
        inputs.extend(checkpoint_paths(checkpoint))

    sampler_cfg = SamplerConfig.from_config(config["sampler"], seed)
    guidance_cfg = GuidanceConfig.from_config(config["guidance"])
    filter_cfg = FilterConfig.from_config(config["filter"], seed)
    x0 = dataset.truth[0]
    obs = dataset.obs

    trace = faapf_run(den, obs, sampler_cfg, guidance_cfg, filter_cfg, x0, dataset.observations,
                      workers=workers, progress=progress)
    particles = trace.particles()
    metrics = metrics_table(particles, dataset.truth, obs.observed_indices, trace.ess, trace.alpha,
                            [r.clamp for r in trace.records])
    outputs = [write_table(metrics, out_dir / "metrics.csv"),
               write_table(trace.to_frame(), out_dir / "filter_trace.csv")]
    save_step_metrics(run_id, metrics)

    spin_up = config["metrics"]["spin_up_cycles"]
    for row in summarize_metrics(metrics, spin_up).itertuples(index=False):
        log_run_event(run_id, "summary", f"FA-APF {row.group}: skill={row.skill:.4f} spread={row.spread:.4f}")

    baseline_particles = None
    if baseline == "unconditional":
        baseline_particles = unconditional_ensemble_run(den, sampler_cfg, filter_cfg.n_particles, x0,
                                                        dataset.steps, seed, workers, progress)
        baseline_metrics = metrics_table(baseline_particles, dataset.truth, obs.observed_indices)
        outputs.append(write_table(baseline_metrics, out_dir / "baseline_metrics.csv"))
        for row in summarize_metrics(baseline_metrics, spin_up).itertuples(index=False):
            log_run_event(run_id, "summary", f"unconditional {row.group}: skill={row.skill:.4f}")

    if dataset.steps > 0:
        k = config["metrics"]["ppc_step"]
        k = dataset.steps if k < 0 else min(max(k, 1), dataset.steps)
        samples = conditional_samples(den, obs, dataset.observations[k - 1], particles[k - 1][0], sampler_cfg,
                                      guidance_cfg, config["metrics"]["ppc_samples"], seed, k, workers)
        check = posterior_predictive_check(samples, obs, dataset.observations[k - 1],
                                           config["metrics"]["ppc_coordinate"])
        outputs.append(write_table(predictive_frame(check), out_dir / "ppc.csv"))
        log_run_event(run_id, "ppc", f"step {k}: predictive rank {check.rank:.3f}")

    if config["metrics"]["calibration"] and dataset.steps > 0:
        calibration = _calibration_frame(den, obs, particles, dataset.observations, sampler_cfg,
                                         config["metrics"]["ppc_coordinate"], seed, workers)
        outputs.append(write_table(calibration, out_dir / "calibration.csv"))
        ks = ks_uniformity(calibration['rank'])
        log_run_event(run_id, "calibration", f"forecast ranks over {len(calibration)} steps: "
                      f"KS {ks.statistic:.3f} (critical {ks.critical_value:.3f})", passed=ks.passed)

    trajectory = _trajectory_frame(dataset.truth, particles, baseline_particles, dataset.observations, obs,
                                   config["metrics"]["trajectory_coordinate"])
    outputs.append(write_table(trajectory, out_dir / "trajectory.csv"))

    if isinstance(dataset.system, LinearGaussianSSM):
        states = kalman_filter(dataset.system, obs, x0, dataset.observations)
        deviation = kalman_deviation(particles, np.array([s.mean for s in states]),
                                     np.array([s.std for s in states]))
        kalman = pd.DataFrame({'step': np.arange(1, dataset.steps + 1), 'scaled_mean_error': deviation})
        outputs.append(write_table(kalman, out_dir / "kalman.csv"))
        log_run_event(run_id, "kalman", f"mean |filter - Kalman| / Kalman std = {deviation.mean():.4f}")

    every = config["filter"]["snapshot_every"]
    if every > 0:
        steps = list(range(0, dataset.steps + 1, every))
        outputs.extend(save_snapshots(particles[steps], steps, out_dir / "snapshots"))

    seeds = {"run": seed, "filter": filter_cfg.seed, "sampler": sampler_cfg.seed}
    write_manifest(out_dir, "assimilate", config, seeds, inputs, outputs)


@cli.command()
@click.option('--denoiser', help='Denoiser back-end', type=click.Choice(['analytic', 'mlp']), default='mlp',
              show_default=True)
@click.option('--baseline', help='Also run the unconditional ensemble', type=click.Choice(['none', 'unconditional']),
              default='none', show_default=True)
@click.option('--checkpoint', help='Checkpoint header [default: OUT/denoiser.json]', metavar='PATH',
              type=click.Path(dir_okay=False), default=None)
@click.option('--dataset', 'data_dir', help='Dataset directory [default: --out]', metavar='DIR',
              type=click.Path(file_okay=False), default=None)
@click.pass_context
def assimilate(ctx, denoiser, baseline, checkpoint, data_dir):
    """Run the particle filter over the dataset's observations."""
    out_dir = Path(ctx.obj["run"]["out_dir"])
    execute(ctx, "assimilate", _assimilate, data_dir=Path(data_dir) if data_dir else out_dir,
            denoiser=denoiser, baseline=baseline,
            checkpoint=Path(checkpoint) if checkpoint else out_dir / "denoiser.json")


def _plot(config, out_dir, run_id, metrics_path, baseline_path, ppc_path, trajectory_path, snapshots_path,
          calibration_path):
    def optional(path, required=()):
        return read_table(path, required) if path is not None and path.exists() else None

    inputs = [metrics_path]
    metrics = read_table(metrics_path, METRIC_COLUMNS[:-1])
    baseline = optional(baseline_path, METRIC_COLUMNS[:-1])
    ppc = optional(ppc_path, ['value', 'density', 'observed', 'rank'])
    trajectory = optional(trajectory_path, ['step'])
    calibration = optional(calibration_path, ['step', 'rank'])
    inputs.extend(p for p, table in ((baseline_path, baseline), (ppc_path, ppc), (trajectory_path, trajectory),
                                     (calibration_path, calibration))
                  if table is not None)

    snapshots = None
    header, payload = checkpoint_paths(snapshots_path)
    if header.exists():
        snapshots = load_snapshots(snapshots_path)
        inputs.extend([header, payload])

    written = render_figures(out_dir, metrics, baseline, ppc, trajectory, snapshots, calibration,
                             coordinate=config["metrics"]["trajectory_coordinate"])
    write_manifest(out_dir, "plot", config, {"run": config["run"]["seed"]}, inputs, written.values())
    log_run_event(run_id, "figures", f"wrote {', '.join(sorted(written))}")


@cli.command()
@click.option('--metrics', 'metrics_path', help='Metrics CSV [default: OUT/metrics.csv]', metavar='PATH',
              type=click.Path(dir_okay=False), default=None)
@click.option('--baseline', 'baseline_path', help='Baseline metrics CSV', metavar='PATH',
              type=click.Path(dir_okay=False), default=None)
@click.option('--ppc', 'ppc_path', help='Posterior predictive CSV', metavar='PATH',
              type=click.Path(dir_okay=False), default=None)
@click.option('--trajectory', 'trajectory_path', help='Trajectory CSV', metavar='PATH',
              type=click.Path(dir_okay=False), default=None)
@click.option('--snapshots', 'snapshots_path', help='Ensemble snapshot header [default: OUT/snapshots.json]',
              metavar='PATH', type=click.Path(dir_okay=False), default=None)
@click.option('--calibration', 'calibration_path', help='Forecast rank CSV', metavar='PATH',
              type=click.Path(dir_okay=False), default=None)
@click.pass_context
def plot(ctx, metrics_path, baseline_path, ppc_path, trajectory_path, snapshots_path, calibration_path):
    """Render SVG figures from assimilation outputs."""
    out_dir = Path(ctx.obj["run"]["out_dir"])

    def resolve(value, default_name):
        return Path(value) if value else out_dir / default_name

    execute(ctx, "plot", _plot,
            metrics_path=resolve(metrics_path, "metrics.csv"),
            baseline_path=resolve(baseline_path, "baseline_metrics.csv"),
            ppc_path=resolve(ppc_path, "ppc.csv"),
            trajectory_path=resolve(trajectory_path, "trajectory.csv"),
            snapshots_path=resolve(snapshots_path, "snapshots.json"),
            calibration_path=resolve(calibration_path, "calibration.csv"))


@cli.command()
@click.option('--command', 'command_name', help='Only runs of this command', default=None)
@click.option('--run-id', 'run_id', help='Show the event log and stored metrics of one run', default=None)
@click.option('--limit', help='Number of runs or log rows', type=click.IntRange(min=1), default=20,
              show_default=True)
@click.pass_obj
def history(config, command_name, run_id, limit):
    """List registered runs, newest first."""
    configure_database(config["database"]["path"], config["database"]["enabled"])
    if run_id:
        logs = get_logs_from_database(run_id, limit)
        if not logs:
            click.echo(f"No events recorded for run {run_id}")
            return
        click.echo(pd.DataFrame(logs, columns=['timestamp', 'event', 'message', 'severity']).to_string(index=False))
        metrics = get_step_metrics(run_id)
        if not metrics.empty:
            click.echo("")
            click.echo(metrics.to_string(index=False))
        return

    runs = get_runs(command_name, limit)
    if not runs:
        click.echo("No runs registered")
        return
    click.echo(pd.DataFrame(runs).to_string(index=False))


if __name__ == "__main__":
    cli()
