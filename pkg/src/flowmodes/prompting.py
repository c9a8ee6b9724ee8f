"""Drag-arrow prompting: pick the mode that best matches an arrow, or
summarise a mode as a handful of arrows by clustering its offsets.

Arrow endpoints are 1-based ``(row, col)`` pixel coordinates. The arrow
vector in flow convention is ``(dx, dy) = (col_b - col_a, row_b - row_a)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .flowcore import as_flow, as_mask, check_compatible


@dataclass(frozen=True)
class DragArrow:
    start: tuple
    end: tuple

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "end", tuple(float(v) for v in self.end))
        if len(self.start) != 2 or len(self.end) != 2:
            raise ValueError("arrow endpoints must be (row, col) pairs")

    @property
    def vector(self):
        """Offset ``(dx, dy)`` from start to end."""
        return np.array([self.end[1] - self.start[1], self.end[0] - self.start[0]])

    def check_bounds(self, height, width):
        for r, c in (self.start, self.end):
            if not (1 <= r <= height and 1 <= c <= width):
                raise ValueError(f"arrow endpoint {(r, c)} outside [1,{height}]x[1,{width}]")

    def to_dict(self):
        return {"start": list(self.start), "end": list(self.end)}

    @classmethod
    def parse(cls, text):
        """Parse ``"r1,c1:r2,c2"``."""
        try:
            a, b = text.split(":")
            start = tuple(float(v) for v in a.split(","))
            end = tuple(float(v) for v in b.split(","))
        except ValueError as exc:
            raise ValueError(f"cannot parse arrow {text!r}, expected 'r1,c1:r2,c2'") from exc
        return cls(start, end)


@dataclass(frozen=True)
class Retrieval:
    mode: int
    frame: int
    distance: float


def retrieve_mode(modes, arrow: DragArrow) -> Retrieval:
    """Mode and frame whose offset at the arrow's start is closest to the arrow vector.

    Ties go to the lower mode index, then the lower frame.
    """
    modes = list(modes)
    if not modes:
        raise ValueError("cannot retrieve from an empty mode set")
    flows = [as_flow(x) for x in modes]
    F, H, W, _ = flows[0].shape
    arrow.check_bounds(H, W)
    r, c = arrow.start
    if r != int(r) or c != int(c):
        raise ValueError("arrow start must be an integer pixel")
    r, c = int(r) - 1, int(c) - 1
    target = arrow.vector
    dist = np.stack([np.linalg.norm(x[:, r, c, :] - target, axis=-1) for x in flows])
    # argmin over the row-major flattening gives the lowest mode, then frame.
    flat = int(np.argmin(dist))
    i, k = divmod(flat, dist.shape[1])
    return Retrieval(i, k, float(dist[i, k]))


def kmeans_pp_init(points, n, rng):
    """k-means++ seeding: first centre uniform, then proportional to squared distance."""
    centers = [points[rng.integers(len(points))]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, n):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(points), p=d2 / total)
        else:
            idx = rng.integers(len(points))
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(points, n, seed=0, max_iter=100, tol=1e-6):
    """Lloyd refinement from a k-means++ start.

    Stops after ``max_iter`` iterations or when the largest centre shift is
    below ``tol`` times the data scale. Returns ``(labels, centers, objective)``
    where ``objective`` lists the within-cluster sum of squares after each
    assignment step.
    """
    pts = np.asarray(points, dtype=np.float64)
    if n < 1 or n > len(pts):
        raise ValueError(f"need 1 <= n <= {len(pts)} points, got n={n}")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(pts, n, rng)
    scale = max(float(np.max(np.abs(pts))), 1e-12)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centers[None]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(pts)), labels].sum()))
        new = centers.copy()
        nearest = d2[np.arange(len(pts)), labels]
        for j in range(n):
            members = pts[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # an emptied centre moves to the worst-served point
                far = int(np.argmax(nearest))
                new[j] = pts[far]
                nearest[far] = 0.0
        shift = float(np.max(np.abs(new - centers)))
        centers = new
        if shift <= tol * scale:
            break
    d2 = np.sum((pts[:, None, :] - centers[None]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(len(pts)), labels].sum()))
    return labels, centers, history


def arrow_features(x, m, k):
    """Per-pixel ``(row, col, dx, dy)`` inside the mask, positions 1-based.

    Positions are rescaled for clustering so their RMS spread matches the
    offsets' RMS magnitude; the returned ``pos`` and ``off`` are unscaled.
    """
    x = as_flow(x)
    m = as_mask(m)
    check_compatible(x, m)
    if not 0 <= k < x.shape[0]:
        raise ValueError(f"frame {k} outside [0, {x.shape[0]})")
    rows, cols = np.nonzero(m > 0)
    pos = np.stack([rows + 1.0, cols + 1.0], axis=1)
    off = x[k, rows, cols, :]
    spread = np.sqrt(np.mean(np.sum((pos - pos.mean(axis=0)) ** 2, axis=1)))
    rms = np.sqrt(np.mean(np.sum(off**2, axis=1)))
    factor = rms / spread if spread > 0 and rms > 0 else 1.0
    return pos, off, np.hstack([pos * factor, off])


def mode_to_arrows(x, m, k, n, seed=0):
    """``n`` drag arrows summarising frame ``k`` of a mode, ordered by cluster index."""
    x = as_flow(x)
    pos, off, feats = arrow_features(x, m, k)
    if len(pos) < n:
        raise ValueError(f"mask has {len(pos)} pixels, fewer than n={n}")
    labels, _, _ = kmeans(feats, n, seed)
    H, W = x.shape[1:3]
    arrows = []
    for j in range(n):
        sel = labels == j
        if not np.any(sel):
            continue
        p = pos[sel].mean(axis=0)
        dx, dy = off[sel].mean(axis=0)
        end = (min(max(p[0] + dy, 1.0), H), min(max(p[1] + dx, 1.0), W))
        arrows.append(DragArrow((p[0], p[1]), end))
    return arrows


def export_arrows(arrows, path):
    text = json.dumps([a.to_dict() for a in arrows])
    with open(os.fspath(path), "w") as fh:
        fh.write(text + "\n")


def import_arrows(path):
    with open(os.fspath(path)) as fh:
        data = json.load(fh)
    return [DragArrow(tuple(d["start"]), tuple(d["end"])) for d in data]
