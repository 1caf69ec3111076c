"""PNG figures written next to trajectory CSV files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_trajectories(result, path: str | Path, title: str | None = None) -> Path:
    """Real part of each target's expectation against time."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for j, target in enumerate(result.targets):
        ax.plot(result.times, result.values[:, j].real, marker="o", ms=3, label=f"spin {target + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\langle\sigma_z(t)\rangle$")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small", ncol=2 if len(result.targets) > 6 else 1)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_cost_scan(steps, counts, path: str | Path, slope: float | None = None) -> Path:
    """Log-log influence-evaluation counts with an optional reference slope."""
    path = Path(path)
    steps = np.asarray(steps, dtype=float)
    counts = np.asarray(counts, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    ax.loglog(steps, counts, "o-", label="evaluations")
    if slope is not None and len(steps):
        ref = counts[-1] * (steps / steps[-1]) ** slope
        ax.loglog(steps, ref, "--", color="grey", label=f"slope {slope:g}")
    ax.set_xlabel("L")
    ax.set_ylabel("influence functional evaluations")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
