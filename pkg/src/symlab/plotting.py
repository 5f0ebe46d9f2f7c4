"""Raster plots of sweep, spectrum, projection and planning results."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}  # keep PNG bytes free of version strings


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def _sweeps(reports):
    return reports if isinstance(reports, (list, tuple)) else [reports]


def plot_complexity_vs_beta(reports, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rep in _sweeps(reports):
        ax.plot(rep.column("beta"), rep.column("median_complexity"), "o-", label=rep.object_id)
    ax.set_xscale("log")
    ax.set_xlabel("beta")
    ax.set_ylabel("median complexity (nats)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_exploitation_vs_beta(reports, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rep in _sweeps(reports):
        ax.plot(rep.column("beta"), rep.column("symmetry_pct"), "o-", label=rep.object_id)
        for b, r in zip(rep.column("beta"), rep.rows):
            if r.collapsed:
                ax.annotate("collapsed", (b, r.symmetry_pct), fontsize=7, ha="right")
    ax.set_xscale("log")
    ax.set_ylim(-2, 102)
    ax.set_xlabel("beta")
    ax.set_ylabel("symmetry exploitation (%)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_eigenvalues(spectra: dict[str, list[float]], path, top: int = 8) -> Path:
    """Explained-variance ratios per model; ``spectra`` maps a label to its ratios."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    n = len(spectra)
    width = 0.8 / max(n, 1)
    x = np.arange(top)
    for k, (label, ratios) in enumerate(spectra.items()):
        r = np.zeros(top)
        vals = np.asarray(ratios[:top])
        r[: len(vals)] = vals
        ax.bar(x + k * width, r, width, label=label)
    ax.set_xticks(x + 0.4 - width / 2, [str(i + 1) for i in x])
    ax.set_xlabel("principal component")
    ax.set_ylabel("explained variance ratio")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_projection(points, labels, path, label_name: str = "elevation") -> Path:
    points = np.asarray(points)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    sc = ax.scatter(points[:, 0], points[:, 1], c=labels, s=6, cmap="viridis")
    fig.colorbar(sc, ax=ax, label=label_name)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    fig.tight_layout()
    return _save(fig, path)


def plot_grasp_sphere(goal_position, selected_positions, path, current_position=None) -> Path:
    """Goal viewpoint (highlighted) and selected viewpoints on the viewing sphere."""
    sel = np.atleast_2d(np.asarray(selected_positions, dtype=np.float64))
    goal = np.asarray(goal_position, dtype=np.float64)
    r = float(np.linalg.norm(goal))
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="3d")
    u, v = np.mgrid[0 : 2 * np.pi : 24j, 0 : np.pi : 12j]
    ax.plot_wireframe(r * np.cos(u) * np.sin(v), r * np.sin(u) * np.sin(v), r * np.cos(v), color="0.85", lw=0.4)
    ax.scatter(*sel.T, c="tab:blue", s=20, label="selected")
    ax.scatter(*goal, c="tab:red", s=80, marker="*", label="goal")
    if current_position is not None:
        ax.scatter(*np.asarray(current_position), c="k", s=30, marker="^", label="current")
    ax.legend(fontsize=7)
    ax.set_box_aspect((1, 1, 1))
    fig.tight_layout()
    return _save(fig, path)
