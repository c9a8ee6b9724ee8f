"""Synthetic motion banks and the exact Gaussian-mixture denoiser.

A scene is a grid, an object mask and a bank of analytic mean flows. The
motion prior is the isotropic mixture ``sum_i w_i N(mu_i, s^2 I)``; after
noising to level ``t`` it stays a mixture with variance
``v = alpha_bar * s^2 + 1 - alpha_bar``, so its score and the optimal noise
prediction are available in closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .flowcore import as_mask, disk_mask, rect_mask

SCHEMA_VERSION = 1


class BankError(ValueError):
    """Mask geometry and a requested motion family are incompatible."""


@dataclass(frozen=True)
class ModeSpec:
    label: str
    family: str
    weight: float
    params: dict = field(default_factory=dict)


@dataclass
class SceneSpec:
    height: int
    width: int
    frames: int
    mask_spec: dict
    modes: list
    jitter: float = 0.25
    mask: np.ndarray = field(init=False, repr=False)
    means: list = field(init=False, repr=False)

    def __post_init__(self):
        labels = [md.label for md in self.modes]
        if not self.modes:
            raise ValueError("motion bank is empty")
        if len(set(labels)) != len(labels):
            raise ValueError("mode labels must be unique")
        if any(md.weight <= 0 for md in self.modes):
            raise ValueError("mode weights must be positive")
        if abs(sum(md.weight for md in self.modes) - 1.0) > 1e-9:
            raise ValueError("mode weights must sum to 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        self.mask = make_mask(self.height, self.width, self.mask_spec)
        self.means = [mean_flow(md.family, md.params, self.mask, self.frames, self.mask_spec)
                      for md in self.modes]

    @property
    def labels(self):
        return [md.label for md in self.modes]

    @property
    def weights(self):
        return np.array([md.weight for md in self.modes])

    @property
    def shape(self):
        return (self.frames, self.height, self.width, 2)

    def prior(self):
        return MixturePrior(self.weights, np.stack(self.means), self.jitter)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "height": self.height,
            "width": self.width,
            "frames": self.frames,
            "jitter": self.jitter,
            "mask": self.mask_spec,
            "modes": [
                {"label": md.label, "family": md.family, "weight": md.weight, "params": md.params}
                for md in self.modes
            ],
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema version {version}")
        modes = [ModeSpec(md["label"], md["family"], float(md["weight"]), dict(md.get("params", {})))
                 for md in d["modes"]]
        return cls(int(d["height"]), int(d["width"]), int(d["frames"]), dict(d["mask"]), modes,
                   float(d.get("jitter", 0.25)))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_mask(height, width, spec):
    kind = spec.get("shape", "disk")
    if kind == "disk":
        center = spec.get("center", [height // 2, width // 2])
        m = disk_mask(height, width, center, spec.get("radius", min(height, width) // 4))
    elif kind == "rect":
        m = rect_mask(height, width, spec["top"], spec["left"], spec["bottom"], spec["right"])
    elif kind == "blobs":
        m = np.zeros((height, width))
        for blob in spec["blobs"]:
            m = np.maximum(m, make_mask(height, width, blob))
    else:
        raise ValueError(f"unknown mask shape {kind!r}")
    return as_mask(m)


def mask_center(mask, spec):
    if spec.get("shape", "disk") == "disk":
        cy, cx = spec.get("center", [mask.shape[0] // 2, mask.shape[1] // 2])
        return float(cy), float(cx)
    rows, cols = np.nonzero(mask)
    return float(rows.mean()), float(cols.mean())


def _direction(params):
    theta = math.radians(params.get("angle_deg", 0.0))
    return np.array([math.cos(theta), math.sin(theta)])


def _rotation_about(mask, frames, pivot, omega):
    H, W = mask.shape
    rows, cols = np.mgrid[0:H, 0:W]
    px = cols - pivot[1]
    py = rows - pivot[0]
    out = np.zeros((frames, H, W, 2))
    for k in range(frames):
        c, s = math.cos(k * omega), math.sin(k * omega)
        out[k, ..., 0] = (c * px - s * py - px) * mask
        out[k, ..., 1] = (s * px + c * py - py) * mask
    return out


def mean_flow(family, params, mask, frames, mask_spec=None):
    """Analytic mean flow of one motion family; see the README for parameters."""
    H, W = mask.shape
    ks = np.arange(frames, dtype=np.float64)
    if family == "translation":
        v = _direction(params) * params.get("speed", 1.0)
        return ks[:, None, None, None] * v * mask[None, :, :, None]
    if family == "camera_pan":
        v = _direction(params) * params.get("speed", 1.0)
        return np.broadcast_to(ks[:, None, None, None] * v, (frames, H, W, 2)).copy()
    if family == "oscillation":
        amp = params.get("amplitude", 1.0)
        period = params.get("period", frames)
        profile = amp * np.sin(2 * math.pi * ks / period)
        return profile[:, None, None, None] * _direction(params) * mask[None, :, :, None]
    if family == "rotation":
        center = mask_center(mask, mask_spec or {})
        return _rotation_about(mask, frames, center, math.radians(params.get("omega_deg", 5.0)))
    if family == "hinge":
        rows, cols = np.nonzero(mask)
        edge = params.get("edge", "left")
        cy, cx = mask_center(mask, mask_spec or {})
        if "pivot" in params:
            pivot = tuple(params["pivot"])
        elif edge == "left":
            pivot = (cy, float(cols.min()))
        elif edge == "right":
            pivot = (cy, float(cols.max()))
        elif edge == "top":
            pivot = (float(rows.min()), cx)
        elif edge == "bottom":
            pivot = (float(rows.max()), cx)
        else:
            raise BankError(f"unknown hinge edge {edge!r}")
        if not (rows.min() <= pivot[0] <= rows.max() and cols.min() <= pivot[1] <= cols.max()):
            raise BankError(f"hinge pivot {pivot} outside the mask bounding box")
        return _rotation_about(mask, frames, pivot, math.radians(params.get("omega_deg", 5.0)))
    raise BankError(f"unknown motion family {family!r}")


def build_motion_bank(height=32, width=32, frames=8, mask=None, modes=None, jitter=0.25):
    """Scene with the desk-scale defaults: 32x32 grid, 8 frames, centred disk of radius 8."""
    if mask is None:
        mask = {"shape": "disk", "center": [height // 2, width // 2], "radius": 8}
    if modes is None:
        modes = four_translations()
    modes = [md if isinstance(md, ModeSpec) else ModeSpec(**md) for md in modes]
    return SceneSpec(height, width, frames, mask, modes, jitter)


def four_translations(speed=1.0):
    return [ModeSpec(f"translate_{a}", "translation", 0.25, {"angle_deg": a, "speed": speed})
            for a in (0, 90, 180, 270)]


class MixturePrior:
    """Isotropic Gaussian mixture over flattened flows."""

    def __init__(self, weights, means, s):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.s = float(s)
        if self.means.shape[0] != self.weights.size:
            raise ValueError("one mean per weight required")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("weights must be positive and sum to 1")
        self.shape = self.means.shape[1:]
        self._flat = self.means.reshape(len(self.weights), -1)
        self._log_w = np.log(self.weights)

    def _noised(self, alpha_bar):
        return alpha_bar * self.s**2 + (1.0 - alpha_bar)

    def responsibilities(self, x_t, alpha_bar):
        v = self._noised(alpha_bar)
        diff = x_t.reshape(1, -1) - math.sqrt(alpha_bar) * self._flat
        logits = self._log_w - 0.5 * np.einsum("kd,kd->k", diff, diff) / v
        return softmax(logits)

    def log_density(self, x_t, alpha_bar):
        """Log of the noised marginal density at ``x_t``."""
        v = self._noised(alpha_bar)
        diff = x_t.reshape(1, -1) - math.sqrt(alpha_bar) * self._flat
        d = diff.shape[1]
        logits = self._log_w - 0.5 * np.einsum("kd,kd->k", diff, diff) / v
        return float(logsumexp(logits) - 0.5 * d * math.log(2 * math.pi * v))

    def eps(self, x_t, alpha_bar):
        v = self._noised(alpha_bar)
        gamma = self.responsibilities(x_t, alpha_bar)
        mean = (gamma @ self._flat).reshape(self.shape)
        return math.sqrt(1.0 - alpha_bar) * (x_t - math.sqrt(alpha_bar) * mean) / v

    def eps_vjp(self, x_t, alpha_bar, cotangent):
        # J = c (I - (alpha_bar / v) Cov_gamma(mu)), which is symmetric.
        v = self._noised(alpha_bar)
        gamma = self.responsibilities(x_t, alpha_bar)
        centered = self._flat - gamma @ self._flat
        u = np.asarray(cotangent, dtype=np.float64).reshape(-1)
        proj = gamma * (centered @ u)
        correction = (proj @ centered).reshape(self.shape)
        c = math.sqrt(1.0 - alpha_bar) / v
        return c * (np.reshape(u, self.shape) - (alpha_bar / v) * correction)

    def sample(self, seed):
        rng = np.random.default_rng(seed)
        i = int(rng.choice(len(self.weights), p=self.weights))
        return self.means[i] + self.s * rng.standard_normal(self.shape), i


class MixtureDenoiser:
    """Exact noise predictor for a :class:`MixturePrior` under a schedule."""

    def __init__(self, prior: MixturePrior, sched):
        self.prior = prior
        self.sched = sched

    def predict_eps(self, x_t, t):
        return self.prior.eps(np.asarray(x_t, dtype=np.float64), self.sched.alpha_bar[t])

    def posterior_variance(self, t):
        """Within-component variance of the clean sample given ``x_t``."""
        ab = self.sched.alpha_bar[t]
        return self.prior.s**2 * (1.0 - ab) / self.prior._noised(ab)

    def vjp(self, x_t, t, cotangent):
        return self.prior.eps_vjp(np.asarray(x_t, dtype=np.float64), self.sched.alpha_bar[t], cotangent)


def exact_eps(prior: MixturePrior, x_t, t, sched):
    return prior.eps(np.asarray(x_t, dtype=np.float64), sched.alpha_bar[t])


def exact_vjp(prior: MixturePrior, x_t, t, sched, cotangent):
    return prior.eps_vjp(np.asarray(x_t, dtype=np.float64), sched.alpha_bar[t], cotangent)


def sample_prior(prior: MixturePrior, seed):
    """Draw ``mu_i + s * noise`` with ``i ~ weights``; returns the flow only."""
    return prior.sample(seed)[0]
