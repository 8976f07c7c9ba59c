"""
CSV tables and line plots for sweeps and ablations.
"""
import logging
from pathlib import Path
from typing import Iterable, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

import src.params as params  # noqa: E402
from src.metrics import MetricsReport  # noqa: E402

logger = logging.getLogger(__name__)


def reports_to_frame(run_id: str, reports: Iterable[MetricsReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row(run_id) for r in reports], columns=params.metrics_columns)


def write_table(df: pd.DataFrame, folders: Sequence[Path], file_name: str) -> List[Path]:
    """Writes the table into every folder; INF values are written as 'inf'."""
    written = []
    for folder in folders:
        Path(folder).mkdir(parents=True, exist_ok=True)
        path = Path(folder).joinpath(file_name)
        df.to_csv(path, index=False, float_format="%.6f", na_rep="nan")
        written.append(path)
    logger.info(f"Wrote {file_name} ({len(df)} rows)")
    return written


def summarise_sweep(per_image: pd.DataFrame) -> pd.DataFrame:
    """
    Per-SNR means of the numeric metrics.

    Parameters
    ----------
    per_image : pd.DataFrame
        One metrics row per (image, SNR).

    Returns
    -------
    pd.DataFrame
        snr_db, n_images, mean depth, mean psnr_db, mean task_psnr_db,
        mean ssim and mean payload_bytes, ordered by SNR.
    """
    df = per_image.copy()
    for col in ["psnr_db", "task_psnr_db"]:
        df[col] = pd.to_numeric(df[col].replace("inf", float("inf")))
    grouped = df.groupby("snr_db", sort=True)
    summary = grouped[["depth", "psnr_db", "task_psnr_db", "ssim", "payload_bytes"]].mean()
    summary.insert(0, "n_images", grouped.size())
    return summary.reset_index()


def plot_metric_vs_snr(
    df: pd.DataFrame,
    metric: str,
    y_title: str,
    fig_name: str,
    folders: Sequence[Path],
    group: str = None,
) -> None:
    """
    Line plot of a metric against SNR, one line per value of `group` when given.

    Outputs
    -------
    Saves the figure as fig_name in every folder.
    """
    fig, ax = plt.subplots(figsize=(8, 6))
    if group is None:
        ax.plot(df["snr_db"], df[metric], marker="o")
    else:
        for name, part in df.groupby(group):
            ax.plot(part["snr_db"], part[metric], marker="o", label=f"{group} {name}")
        ax.legend()
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel(y_title)
    ax.grid(True, alpha=0.3)
    for folder in folders:
        Path(folder).mkdir(parents=True, exist_ok=True)
        fig.savefig(Path(folder).joinpath(fig_name))

    plt.close()
    return None
