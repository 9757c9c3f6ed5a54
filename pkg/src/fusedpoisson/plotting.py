"""Optional figures (matplotlib, Agg backend). Only imported when figures are requested."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import StationRegistry  # noqa: E402
from .model import ParamState  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def hourly_effects(params: ParamState, path, station_ids=None) -> Path:
    """Heat map of the combined hourly effect per station."""
    phi = params.phi().phi_hod
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.18 * phi.shape[0] + 1)))
    im = ax.imshow(phi, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel("hour")
    ax.set_ylabel("station")
    if station_ids is not None and len(station_ids) <= 40:
        ax.set_yticks(range(len(station_ids)), station_ids, fontsize=6)
    fig.colorbar(im, ax=ax, label="log-rate effect")
    fig.tight_layout()
    return _save(fig, path)


def station_map(registry: StationRegistry, values, path, edges=None, label: str = "") -> Path:
    """Stations at their coordinates, coloured by a per-station value, with graph edges."""
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 5))
    if edges is not None:
        for a, b in edges:
            ax.plot(registry.longitude[[a, b]], registry.latitude[[a, b]], color="0.8", lw=0.6, zorder=1)
    sc = ax.scatter(registry.longitude, registry.latitude, c=values, cmap="coolwarm", s=18, zorder=2)
    fig.colorbar(sc, ax=ax, label=label)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    fig.tight_layout()
    return _save(fig, path)


def cv_curve(rows, path) -> Path:
    """Fold-averaged MSPR per grid point, one line per radius."""
    fig, ax = plt.subplots(figsize=(7, 4))
    radii = sorted({r.r for r in rows}, key=repr)
    for r in radii:
        avg = [row for row in rows if row.fold == "avg" and repr(row.r) == repr(r)]
        ax.plot(range(len(avg)), [row.mspr for row in avg], marker="o", ms=3, label=f"r={r:g}")
    ax.set_xlabel("grid point")
    ax.set_ylabel("CV (mean MSPR)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def residual_trace(history, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    it = [h["iter"] for h in history]
    ax.semilogy(it, [h["r_primal"] for h in history], label="primal")
    ax.semilogy(it, [h["r_dual"] for h in history], label="dual")
    ax.semilogy(it, [h["eps_primal"] for h in history], "--", lw=0.8, label="eps primal")
    ax.semilogy(it, [h["eps_dual"] for h in history], "--", lw=0.8, label="eps dual")
    ax.set_xlabel("iteration")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
