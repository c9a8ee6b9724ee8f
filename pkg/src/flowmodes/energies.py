"""Guidance energies on flow fields and their exact gradients.

Four terms are combined into one scalar that the guided sampler descends:

* camera: mean offset magnitude over background pixels,
* object: soft inverse of the inside/outside mean-magnitude gap,
* diversity: soft-inverse repulsion from previously accepted modes,
* smoothness: offset distance between consecutive frames inside the mask.

Gradients are hand-derived. Where a norm or absolute value is not
differentiable (zero vectors below ``e_angle``, an exact tie in ``|.|``) the
subgradient 0 is used.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .flowcore import DistanceWeights, as_mask, check_compatible, magnitudes, masked_mean

SOFTPLUS_LINEAR_FROM = 30.0


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_d: float = 3.0
    lambda_c: float = 0.2
    lambda_o: float = 0.025
    lambda_s: float = 0.1
    tau_object: float = 40.0
    tau_diversity: float = 1.0
    e_phi: float = 1e-4
    diversity_weights: DistanceWeights = field(default_factory=lambda: DistanceWeights(0.25, 0.75))
    smoothness_weights: DistanceWeights = field(default_factory=lambda: DistanceWeights(0.75, 0.25))
    e_angle: float = 1e-6

    def __post_init__(self):
        for name in ("lambda_d", "lambda_c", "lambda_o", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.e_phi <= 0 or self.e_angle <= 0:
            raise ValueError("e_phi and e_angle must be > 0")

    def without(self, *terms):
        """Copy with the named energies ('c', 'o', 'd', 's') switched off."""
        changes = {}
        for term in terms:
            if term not in "cods" or len(term) != 1:
                raise ValueError(f"unknown energy term {term!r}")
            changes[f"lambda_{term}"] = 0.0
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["diversity_weights"] = self.diversity_weights.to_list()
        d["smoothness_weights"] = self.smoothness_weights.to_list()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown guidance config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key.endswith("_weights"):
                kwargs[key] = DistanceWeights.from_list(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def softplus(z):
    z = np.asarray(z, dtype=np.float64)
    safe = np.minimum(z, SOFTPLUS_LINEAR_FROM)
    return np.where(z > SOFTPLUS_LINEAR_FROM, z, np.log1p(np.exp(safe)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def soft_inverse(a, tau, e):
    """softplus(1/(a + e) - tau); large for small ``a``, decays past ``1/tau``."""
    return softplus(1.0 / (np.asarray(a, dtype=np.float64) + e) - tau)


def soft_inverse_grad(a, tau, e):
    a = np.asarray(a, dtype=np.float64)
    inv = 1.0 / (a + e)
    z = inv - tau
    slope = np.where(z > SOFTPLUS_LINEAR_FROM, 1.0, _sigmoid(z))
    return -slope * inv * inv


def offset_distance(a, b, w: DistanceWeights, e_angle=1e-6):
    """Magnitude/angle distance between offset vectors (broadcasts over ``[..., 2]``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.hypot(a[..., 0], a[..., 1])
    nb = np.hypot(b[..., 0], b[..., 1])
    dot = a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]
    cos = dot / (np.maximum(na, e_angle) * np.maximum(nb, e_angle))
    return w.w_mag * np.abs(na - nb) + w.w_angle * (1.0 - cos)


def offset_distance_grads(a, b, w: DistanceWeights, e_angle=1e-6):
    """Gradients of ``offset_distance`` with respect to ``a`` and ``b``."""
    na = np.hypot(a[..., 0], a[..., 1])
    nb = np.hypot(b[..., 0], b[..., 1])
    ca = np.maximum(na, e_angle)
    cb = np.maximum(nb, e_angle)
    live_a = (na > e_angle)[..., None]
    live_b = (nb > e_angle)[..., None]
    ua = np.where(live_a, a / ca[..., None], 0.0)
    ub = np.where(live_b, b / cb[..., None], 0.0)
    dot = np.sum(a * b, axis=-1)
    cos = dot / (ca * cb)
    sgn = np.sign(na - nb)[..., None]

    # d cos/da = b/(ca cb) - cos * (d ca/da)/ca, and d ca/da = ua above the clamp.
    dcos_da = b / (ca * cb)[..., None] - cos[..., None] * ua / ca[..., None]
    dcos_db = a / (ca * cb)[..., None] - cos[..., None] * ub / cb[..., None]
    grad_a = w.w_mag * sgn * ua - w.w_angle * dcos_da
    grad_b = -w.w_mag * sgn * ub - w.w_angle * dcos_db
    return grad_a, grad_b


def _unit(x, e_angle):
    n = magnitudes(x)
    return np.where((n > e_angle)[..., None], x / np.maximum(n, e_angle)[..., None], 0.0)


def _prepare(x, m):
    x = np.asarray(x, dtype=np.float64)
    m = as_mask(m)
    check_compatible(x, m)
    return x, m


def camera_energy(x, m):
    x, m = _prepare(x, m)
    return float(masked_mean(magnitudes(x), 1.0 - m))


def _camera_grad(x, weights, e_angle):
    scale = 1.0 / (x.shape[0] * weights.sum())
    return _unit(x, e_angle) * (weights * scale)[None, :, :, None]


def object_energy(x, m, cfg: GuidanceConfig):
    x, m = _prepare(x, m)
    mag = magnitudes(x)
    gap = abs(masked_mean(mag, 1.0 - m) - masked_mean(mag, m))
    return float(soft_inverse(gap, cfg.tau_object, cfg.e_phi))


def _object_grad(x, m, cfg):
    mag = magnitudes(x)
    diff = masked_mean(mag, 1.0 - m) - masked_mean(mag, m)
    slope = soft_inverse_grad(abs(diff), cfg.tau_object, cfg.e_phi) * np.sign(diff)
    outside = _camera_grad(x, 1.0 - m, cfg.e_angle)
    inside = _camera_grad(x, m, cfg.e_angle)
    return slope * (outside - inside)


def _check_modes(x, modes):
    modes = [np.asarray(xt, dtype=np.float64) for xt in modes]
    for xt in modes:
        if xt.shape != x.shape:
            raise ValueError(f"mode shape {xt.shape} does not match flow {x.shape}")
    return modes


def diversity_energy(x, m, modes, cfg: GuidanceConfig):
    x, m = _prepare(x, m)
    total = 0.0
    for xt in _check_modes(x, modes):
        d = offset_distance(x, xt, cfg.diversity_weights, cfg.e_angle)
        total += masked_mean(soft_inverse(d, cfg.tau_diversity, cfg.e_phi), m)
    return float(total)


def _diversity_grad(x, m, modes, cfg):
    grad = np.zeros_like(x)
    scale = m / (x.shape[0] * m.sum())
    for xt in modes:
        d = offset_distance(x, xt, cfg.diversity_weights, cfg.e_angle)
        ga, _ = offset_distance_grads(x, xt, cfg.diversity_weights, cfg.e_angle)
        slope = soft_inverse_grad(d, cfg.tau_diversity, cfg.e_phi)
        grad += (slope * scale)[..., None] * ga
    return grad


def smoothness_energy(x, m, cfg: GuidanceConfig):
    x, m = _prepare(x, m)
    if x.shape[0] < 2:
        raise ValueError("smoothness energy needs at least 2 frames")
    d = offset_distance(x[:-1], x[1:], cfg.smoothness_weights, cfg.e_angle)
    return float(masked_mean(d, m))


def _smoothness_grad(x, m, cfg):
    grad = np.zeros_like(x)
    ga, gb = offset_distance_grads(x[:-1], x[1:], cfg.smoothness_weights, cfg.e_angle)
    scale = (m / ((x.shape[0] - 1) * m.sum()))[None, :, :, None]
    grad[:-1] += ga * scale
    grad[1:] += gb * scale
    return grad


def energy_terms(x, m, modes, cfg: GuidanceConfig):
    """Unweighted component energies as a dict keyed 'c', 'o', 'd', 's'."""
    return {
        "c": camera_energy(x, m),
        "o": object_energy(x, m, cfg),
        "d": diversity_energy(x, m, modes, cfg),
        "s": smoothness_energy(x, m, cfg),
    }


def weights_of(cfg: GuidanceConfig):
    return {"c": cfg.lambda_c, "o": cfg.lambda_o, "d": cfg.lambda_d, "s": cfg.lambda_s}


def combined_energy(x, m, modes, cfg: GuidanceConfig):
    terms = energy_terms(x, m, modes, cfg)
    lam = weights_of(cfg)
    return float(sum(lam[k] * terms[k] for k in "dcos"))


def energy_term_gradients(x, m, modes, cfg: GuidanceConfig):
    """Per-term gradients, each already multiplied by its lambda weight.

    Terms with a zero weight are skipped (absent from the result).
    """
    x, m = _prepare(x, m)
    modes = _check_modes(x, modes)
    out = {}
    if cfg.lambda_c:
        out["c"] = cfg.lambda_c * _camera_grad(x, 1.0 - m, cfg.e_angle)
    if cfg.lambda_o:
        out["o"] = cfg.lambda_o * _object_grad(x, m, cfg)
    if cfg.lambda_d and modes:
        out["d"] = cfg.lambda_d * _diversity_grad(x, m, modes, cfg)
    if x.shape[0] < 2:
        raise ValueError("smoothness energy needs at least 2 frames")
    if cfg.lambda_s:
        out["s"] = cfg.lambda_s * _smoothness_grad(x, m, cfg)
    return out


def combined_energy_gradient(x, m, modes, cfg: GuidanceConfig):
    grad = np.zeros(np.shape(x))
    for g in energy_term_gradients(x, m, modes, cfg).values():
        grad += g
    return grad
