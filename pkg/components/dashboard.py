"""Static SVG figures of assimilation runs.

Figures are byte-reproducible: Agg backend, fixed SVG hash salt, text kept as
text and no date metadata.
"""

from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from utils.errors import InvalidDataError  # noqa: E402
from utils.logging import get_logger  # noqa: E402

logger = get_logger(__name__)

plt.rcParams.update({
    "svg.hashsalt": "faapf",
    "svg.fonttype": "none",
    "figure.figsize": (7.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
})

GROUP_COLORS = {'observed': 'tab:blue', 'unobserved': 'tab:orange', 'all': 'tab:green'}
PAD = 0.05


def padded_limits(*series: Sequence[float]) -> tuple:
    """Data min/max padded by 5% of the range"""
    values = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in series])
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise InvalidDataError("Nothing finite to plot")
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    if span == 0:
        span = abs(hi) if hi != 0 else 1.0
    return lo - PAD * span, hi + PAD * span


def _require_rows(frame: pd.DataFrame, what: str):
    if frame is None or frame.empty:
        raise InvalidDataError(f"{what} table is empty")


def save_figure(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Saved figure {path}")
    return path


def _metric_figure(metrics: pd.DataFrame, baseline: Optional[pd.DataFrame], column: str, ylabel: str):
    _require_rows(metrics, "Metrics")
    fig, ax = plt.subplots()
    xs, ys = [], []
    for source, frame, style in (("FA-APF", metrics, "-"), ("unconditional", baseline, "--")):
        if frame is None or frame.empty:
            continue
        for group, rows in frame.groupby('group', sort=False):
            rows = rows.sort_values('step')
            ax.plot(rows['step'], rows[column], style, color=GROUP_COLORS.get(group, 'black'),
                    label=f"{source} ({group})")
            xs.append(rows['step'])
            ys.append(rows[column])
    ax.set_xlim(*padded_limits(*xs))
    ax.set_ylim(*padded_limits(*ys))
    ax.set_xlabel("assimilation step")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def skill_figure(metrics: pd.DataFrame, baseline: Optional[pd.DataFrame] = None):
    return _metric_figure(metrics, baseline, 'skill', "skill (RMSE of ensemble mean)")


def spread_figure(metrics: pd.DataFrame, baseline: Optional[pd.DataFrame] = None):
    return _metric_figure(metrics, baseline, 'spread', "spread (RMS ensemble std)")


def ess_figure(metrics: pd.DataFrame):
    _require_rows(metrics, "Metrics")
    per_step = metrics.drop_duplicates('step').sort_values('step')
    fig, ax = plt.subplots()
    ax.plot(per_step['step'], per_step['ess'], color='tab:blue', label="ESS")
    ax.set_xlim(*padded_limits(per_step['step']))
    ax.set_ylim(*padded_limits(per_step['ess']))
    ax.set_xlabel("assimilation step")
    ax.set_ylabel("effective sample size")

    twin = fig.axes[0].twinx()
    twin.plot(per_step['step'], per_step['alpha'], color='tab:red', label="alpha")
    twin.set_ylim(*padded_limits(per_step['alpha']))
    twin.set_ylabel("inflation alpha")
    twin.grid(False)
    fig.tight_layout()
    return fig


def ppc_figure(ppc: pd.DataFrame):
    _require_rows(ppc, "Posterior predictive")
    observed = float(ppc['observed'].iloc[0])
    fig, ax = plt.subplots()
    ax.plot(ppc['value'], ppc['density'], color='tab:blue', label="predictive density")
    ax.axvline(observed, color='black', linestyle='--', label=f"observation (rank {ppc['rank'].iloc[0]:.3f})")
    ax.set_xlim(*padded_limits(ppc['value'], [observed]))
    ax.set_ylim(*padded_limits(ppc['density']))
    ax.set_xlabel("observed value")
    ax.set_ylabel("density")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def trajectory_figure(trajectory: pd.DataFrame):
    _require_rows(trajectory, "Trajectory")
    fig, ax = plt.subplots()
    styles = {'truth': ('black', '-'), 'filter_mean': ('tab:blue', '-'), 'baseline_mean': ('tab:red', '--')}
    plotted = []
    for column, (color, style) in styles.items():
        if column in trajectory and trajectory[column].notna().any():
            ax.plot(trajectory['step'], trajectory[column], style, color=color, label=column.replace('_', ' '))
            plotted.append(trajectory[column])
    if 'observation' in trajectory and trajectory['observation'].notna().any():
        ax.plot(trajectory['step'], trajectory['observation'], 'o', color='tab:gray', markersize=3,
                label="observation")
        plotted.append(trajectory['observation'])
    ax.set_xlim(*padded_limits(trajectory['step']))
    ax.set_ylim(*padded_limits(*plotted))
    ax.set_xlabel("assimilation step")
    ax.set_ylabel("state coordinate")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def ensemble_figure(snapshots: np.ndarray, steps: Sequence[int], coordinate: int = 0):
    """Members and mean of stored ensembles at one state coordinate"""
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 3 or snapshots.shape[0] == 0:
        raise InvalidDataError(f"Snapshots must be a non-empty (S, N, d) array, got shape {snapshots.shape}")
    if not 0 <= coordinate < snapshots.shape[2]:
        raise InvalidDataError(f"Coordinate {coordinate} outside [0, {snapshots.shape[2]})")
    steps = np.asarray(steps, dtype=np.float64)
    values = snapshots[:, :, coordinate]

    fig, ax = plt.subplots()
    ax.plot(np.repeat(steps, values.shape[1]), values.ravel(), '.', color='tab:blue', alpha=0.2,
            markersize=3, label="members")
    ax.plot(steps, values.mean(axis=1), '-', color='black', label="ensemble mean")
    ax.set_xlim(*padded_limits(steps))
    ax.set_ylim(*padded_limits(values))
    ax.set_xlabel("assimilation step")
    ax.set_ylabel(f"x[{coordinate}]")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def calibration_figure(calibration: pd.DataFrame, bins: int = 10):
    """Histogram of forecast predictive ranks against the uniform density"""
    _require_rows(calibration, "Calibration")
    ranks = calibration['rank'].to_numpy(dtype=np.float64)
    fig, ax = plt.subplots()
    heights, _, _ = ax.hist(ranks, bins=bins, range=(0.0, 1.0), density=True, color='tab:blue', alpha=0.6,
                            label="predictive ranks")
    ax.axhline(1.0, color='black', linestyle='--', label="uniform")
    ax.set_xlim(*padded_limits([0.0, 1.0]))
    ax.set_ylim(*padded_limits(heights, [0.0, 1.0]))
    ax.set_xlabel("rank of the observation")
    ax.set_ylabel("density")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def render_figures(out_dir: Path, metrics: Optional[pd.DataFrame] = None,
                   baseline: Optional[pd.DataFrame] = None, ppc: Optional[pd.DataFrame] = None,
                   trajectory: Optional[pd.DataFrame] = None,
                   snapshots: Optional[Tuple[np.ndarray, Sequence[int]]] = None,
                   calibration: Optional[pd.DataFrame] = None, coordinate: int = 0) -> Dict[str, Path]:
    """Write every figure whose input table was supplied"""
    out_dir = Path(out_dir)
    written = {}
    if metrics is not None:
        written['skill'] = save_figure(skill_figure(metrics, baseline), out_dir / "skill.svg")
        written['spread'] = save_figure(spread_figure(metrics, baseline), out_dir / "spread.svg")
        if metrics['ess'].notna().any():
            written['ess'] = save_figure(ess_figure(metrics), out_dir / "ess.svg")
    if ppc is not None:
        written['ppc'] = save_figure(ppc_figure(ppc), out_dir / "ppc.svg")
    if trajectory is not None:
        written['trajectory'] = save_figure(trajectory_figure(trajectory), out_dir / "trajectory.svg")
    if snapshots is not None:
        written['ensemble'] = save_figure(ensemble_figure(*snapshots, coordinate=coordinate),
                                          out_dir / "ensemble.svg")
    if calibration is not None:
        written['calibration'] = save_figure(calibration_figure(calibration), out_dir / "calibration.svg")
    return written
