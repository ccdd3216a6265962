"""Static vector-graphics charts for the analysis artifacts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "tripletopt"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import DistanceStudy, InfeasibilityStudy  # noqa: E402

_SAVE_KW = dict(metadata={"Date": None}, format="svg")


def distance_chart(path: Path | str, study: DistanceStudy,
                   merits: np.ndarray | None = None) -> None:
    """Histogram of pairwise distances, with per-solution spread when the
    per-solution matrix is square (within-set study)."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    axes[0].hist(study.distances, bins=40, color="tab:orange", alpha=0.8)
    axes[0].set_xlabel("pairwise Euclidean distance")
    axes[0].set_ylabel("pair count")
    axes[0].set_title(f"{study.label or 'distances'} "
                      f"(n={study.stats['count']})")

    per = study.per_solution
    m = per.shape[0]
    for i in range(m):
        row = np.delete(per[i], i) if per.shape[0] == per.shape[1] else per[i]
        axes[1].plot(np.full(row.size, i), row, "+", color="0.6",
                     markersize=3)
    axes[1].set_xlabel("solution index (sorted by merit)")
    axes[1].set_ylabel("distance to others")
    if merits is not None and len(merits) == m:
        twin = axes[1].twinx()
        twin.plot(np.arange(m), merits, "o", mfc="none", color="tab:pink",
                  markersize=4)
        twin.set_ylabel("merit")
        twin.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def infeasibility_chart(path: Path | str,
                        study: InfeasibilityStudy) -> None:
    """Lowest-distance distributions per rank plus normality p-values."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    k = study.minima.shape[1]
    axes[0].boxplot([study.minima[:, i] for i in range(k)])
    axes[0].set_xticklabels([str(i + 1) for i in range(k)])
    axes[0].set_xlabel("k-th lowest pairwise distance")
    axes[0].set_ylabel("distance")
    axes[0].set_title(f"{study.minima.shape[0]} repetitions, "
                      f"{study.eligible_count} interior points")

    ok = ~study.sw_failed
    reps = np.arange(study.minima.shape[0])
    axes[1].plot(reps[ok], study.p_values[ok], ".", color="tab:blue")
    axes[1].axhline(study.alpha, color="tab:red", linestyle="--",
                    label=f"alpha={study.alpha}")
    axes[1].set_xlabel("repetition")
    axes[1].set_ylabel("normality p-value")
    frac = study.fraction_normal
    axes[1].set_title(f"fraction normal: {frac:.2f}")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def spot_chart(path: Path | str, hits: np.ndarray, rays_per_height: int,
               spot_rms: float) -> None:
    """Image-plane spot diagram, one panel per object height."""
    nh = hits.shape[0] // rays_per_height
    fig, axes = plt.subplots(1, nh, figsize=(3.2 * nh, 3.4))
    if nh == 1:
        axes = [axes]
    for h in range(nh):
        block = hits[h * rays_per_height:(h + 1) * rays_per_height]
        cx, cy = block[:, 0].mean(), block[:, 1].mean()
        axes[h].plot(block[:, 0] - cx, block[:, 1] - cy, ".",
                     color="tab:blue", markersize=3)
        axes[h].set_title(f"height group {h}")
        axes[h].set_aspect("equal")
        axes[h].set_xlabel("dx [mm]")
        if h == 0:
            axes[h].set_ylabel("dy [mm]")
    fig.suptitle(f"spot RMS = {spot_rms:.6g} mm")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
