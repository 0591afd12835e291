"""Figures for metrics, embeddings, band energy and sweeps.

Every plot writes a CSV with the plotted numbers next to the image, so checks
can read numbers instead of pixels.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .freq import BLOCK, band_energy  # noqa: E402
from .metrics import roc_curve  # noqa: E402


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def plot_roc(scores, labels, out: str | os.PathLike, max_fpr: float = 0.1, title: str = "ROC") -> Path:
    """ROC curve with the low-FPR region shaded. Writes ``out.png`` and ``out.csv``."""
    out = Path(out)
    fpr, tpr, thr = roc_curve(scores, labels)
    _write_rows(out.with_suffix(".csv"), ["fpr", "tpr", "threshold"], zip(fpr, tpr, thr))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=1.5)
    mask = fpr <= max_fpr
    x = np.append(fpr[mask], max_fpr)
    y = np.append(tpr[mask], np.interp(max_fpr, fpr, tpr))
    ax.fill_between(x, 0, y, alpha=0.3, step=None, label=f"FPR <= {max_fpr:g}")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set(xlabel="false positive rate", ylabel="true positive rate", title=title, xlim=(0, 1), ylim=(0, 1))
    ax.legend(loc="lower right")
    return _save(fig, out)


def plot_distance_histogram(labels, distances, out: str | os.PathLike, bins: int = 40) -> Path:
    """Distance-to-center histograms by class; CSV holds the bin counts."""
    out = Path(out)
    labels = np.asarray(labels)
    distances = np.asarray(distances, dtype=float)
    edges = np.histogram_bin_edges(distances, bins=bins)
    nat, _ = np.histogram(distances[labels == 0], edges)
    man, _ = np.histogram(distances[labels == 1], edges)
    _write_rows(out.with_suffix(".csv"), ["bin_lo", "bin_hi", "natural", "manipulated"],
                zip(edges[:-1], edges[1:], nat, man))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(distances[labels == 0], edges, alpha=0.6, label="natural")
    ax.hist(distances[labels == 1], edges, alpha=0.6, label="manipulated")
    ax.set(xlabel="distance to center", ylabel="count")
    ax.legend()
    return _save(fig, out)


def mean_band_energy(images: Sequence[np.ndarray], plane: int = 0) -> np.ndarray:
    return np.mean([band_energy(im, plane) for im in images], axis=0)


def plot_band_energy(natural: Sequence[np.ndarray], manipulated: Sequence[np.ndarray],
                     out: str | os.PathLike, plane: int = 0) -> tuple[Path, np.ndarray]:
    """Heatmaps of mean squared DCT coefficient per (u, v) band, plus their difference.

    Returns the image path and the ``manipulated - natural`` (8, 8) difference.
    """
    out = Path(out)
    e_nat = mean_band_energy(natural, plane)
    e_man = mean_band_energy(manipulated, plane)
    diff = e_man - e_nat
    rows = [(u, v, e_nat[u, v], e_man[u, v], diff[u, v]) for u in range(BLOCK) for v in range(BLOCK)]
    _write_rows(out.with_suffix(".csv"), ["u", "v", "natural", "manipulated", "difference"], rows)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    for ax, data, name in zip(axes, (np.log10(e_nat + 1e-12), np.log10(e_man + 1e-12), diff),
                              ("natural (log10)", "manipulated (log10)", "difference")):
        im = ax.imshow(data, cmap="viridis")
        ax.set(title=name, xlabel="v", ylabel="u")
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, out), diff


def plot_sweep(xs: Sequence[float], aucs: Sequence[float], out: str | os.PathLike, xlabel: str,
               paucs: Sequence[float] | None = None, log_x: bool = False) -> Path:
    """AUC (and optionally pAUC) against one swept hyperparameter."""
    out = Path(out)
    paucs = list(paucs) if paucs is not None else [float("nan")] * len(xs)
    _write_rows(out.with_suffix(".csv"), [xlabel, "auc", "pauc_0.1"], zip(xs, aucs, paucs))
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(xs, aucs, "o-", label="AUC")
    if not np.all(np.isnan(paucs)):
        ax.plot(xs, paucs, "s--", label="pAUC@0.1")
    if log_x:
        ax.set_xscale("symlog", linthresh=1e-3)
    ax.set(xlabel=xlabel, ylabel="score")
    ax.legend()
    return _save(fig, out)


def _save(fig, out: Path) -> Path:
    path = out.with_suffix(".png")
    fig.tight_layout()
    # fixed metadata keeps re-runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
