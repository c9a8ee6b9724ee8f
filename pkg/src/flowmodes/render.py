"""Flow visualisation: colour-wheel rasters, trajectory plots and report figures.

All writers pin the metadata matplotlib would otherwise stamp (dates, random
SVG ids) so that identical inputs give byte-identical files.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap, hsv_to_rgb  # noqa: E402

from .flowcore import as_flow, as_mask, check_compatible, magnitudes  # noqa: E402

FRAME_RAMP = LinearSegmentedColormap.from_list("frame_ramp", ["#1f3fff", "#ff1f1f"])
_SVG_SALT = "flowmodes"


def flow_to_hsv(field, k):
    x = as_flow(field)
    if not 0 <= k < x.shape[0]:
        raise IndexError(f"frame {k} outside [0, {x.shape[0]})")
    peak = float(magnitudes(x).max())
    frame = x[k]
    hue = np.mod(np.arctan2(frame[..., 1], frame[..., 0]), 2 * np.pi) / (2 * np.pi)
    sat = magnitudes(frame[None])[0] / peak if peak > 0 else np.zeros(frame.shape[:2])
    return np.stack([hue, np.clip(sat, 0.0, 1.0), np.ones_like(hue)], axis=-1)


def render_color(field, k):
    """RGB image (H, W, 3) in [0, 1]: hue is direction, saturation is magnitude / field max."""
    return hsv_to_rgb(flow_to_hsv(field, k))


def save_png(image, path):
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    plt.imsave(os.fspath(path), rgb, format="png", metadata={"Software": None})


def trajectory_polylines(field, m, stride=1):
    """One ``(F, 2)`` array of ``(col, row)`` positions per sampled mask pixel.

    Pixels are taken on the grid ``i % stride == 0 and j % stride == 0``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    x = as_flow(field)
    m = as_mask(m)
    check_compatible(x, m)
    lines = []
    for i, j in zip(*np.nonzero(m > 0)):
        if i % stride or j % stride:
            continue
        lines.append(np.stack([j + x[:, i, j, 0], i + x[:, i, j, 1]], axis=1))
    return lines


def trajectory_figure(field, m, stride=4, title=None):
    lines = trajectory_polylines(field, m, stride)
    F = as_flow(field).shape[0]
    H, W = np.shape(m)
    fig, ax = plt.subplots(figsize=(4, 4))
    segs, cols = [], []
    for line in lines:
        for k in range(F - 1):
            segs.append(line[k : k + 2])
            cols.append(k / max(F - 2, 1))
    if segs:
        ax.add_collection(LineCollection(segs, colors=FRAME_RAMP(np.array(cols)), linewidths=1.2))
    starts = np.array([line[0] for line in lines]) if lines else np.zeros((0, 2))
    ax.scatter(starts[:, 0], starts[:, 1], s=3, color=FRAME_RAMP(0.0), zorder=3)
    ax.set_xlim(-0.5, W - 0.5)
    ax.set_ylim(H - 0.5, -0.5)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    return fig


def save_svg(fig, path):
    with plt.rc_context({"svg.hashsalt": _SVG_SALT}):
        fig.savefig(os.fspath(path), format="svg", metadata={"Date": None})
    plt.close(fig)


def save_png_figure(fig, path):
    fig.savefig(os.fspath(path), format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def render_trajectories(modes, m, stride=4, out_dir=None, prefix="traj"):
    """One trajectory figure per mode; written as SVG when ``out_dir`` is given.

    Returns the written paths, or the figures when ``out_dir`` is None.
    """
    modes = list(modes)
    if not modes:
        raise ValueError("no modes to render")
    figs = [trajectory_figure(x, m, stride, title=f"mode {i}") for i, x in enumerate(modes)]
    if out_dir is None:
        return figs
    paths = []
    for i, fig in enumerate(figs):
        path = os.path.join(os.fspath(out_dir), f"{prefix}_{i:02d}.svg")
        save_svg(fig, path)
        paths.append(path)
    return paths


def report_figure(report):
    """Per-mode energy bars for a :class:`MetricsReport`."""
    per = report.per_mode
    idx = np.arange(len(per))
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
    panels = [("E_d_cross", "diversity (cross)"), ("E_c", "camera"), ("E_o", "object")]
    for ax, (key, name) in zip(axes, panels):
        ax.bar(idx, [p[key] for p in per], color="#4a6fa5")
        ax.set_title(name, fontsize=9)
        ax.set_xticks(idx)
        ax.set_xlabel("mode", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    return fig
