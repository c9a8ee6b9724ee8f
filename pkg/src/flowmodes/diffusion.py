"""Noise schedule, denoiser protocol and the (guided) ancestral sampler."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .energies import GuidanceConfig, combined_energy, energy_term_gradients, energy_terms

ALPHA_BAR_FLOOR = 1e-8


class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[t]`` for ``t = 0..T``.

    Reverse-step coefficients follow the DDPM ancestral parameterisation with
    the posterior ("small sigma") variance::

        alpha_t = alpha_bar[t] / alpha_bar[t-1]
        a_t     = 1 / sqrt(alpha_t)
        b_t     = (1 - alpha_t) / (sqrt(alpha_t) * sqrt(1 - alpha_bar[t]))
        sigma_t = sqrt((1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * (1 - alpha_t))

    A denoiser that knows the per-coordinate variance of the clean sample
    given ``x_t`` (``posterior_variance(t)``) widens ``sigma_t`` by
    ``x0_coef[t]**2`` times that variance; see :func:`step_sigma`.
    """

    def __init__(self, alpha_bar):
        ab = np.asarray(alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar needs at least two entries")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(ab < 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing within [0, 1]")
        self.alpha_bar = ab
        self.T = ab.size - 1
        prev, cur = ab[:-1], ab[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(prev > 0, cur / np.where(prev > 0, prev, 1.0), 0.0)
            a = 1.0 / np.sqrt(np.maximum(alpha, ALPHA_BAR_FLOOR))
            b = (1.0 - alpha) * a / np.sqrt(1.0 - cur)
            var = (1.0 - prev) / (1.0 - cur) * (1.0 - alpha)
        # index 0 is unused; step t uses index t
        self.a = np.concatenate([[np.nan], a])
        self.b = np.concatenate([[np.nan], b])
        self.sigma = np.concatenate([[np.nan], np.sqrt(np.maximum(var, 0.0))])
        with np.errstate(divide="ignore", invalid="ignore"):
            x0_coef = np.sqrt(prev) * (1.0 - alpha) / (1.0 - cur)
        self.x0_coef = np.concatenate([[np.nan], x0_coef])

    @classmethod
    def cosine(cls, T=25, squeeze=0.995):
        t = np.arange(T + 1) / T
        ab = np.cos(t * math.pi / 2 * squeeze) ** 2
        ab[0] = 1.0
        return cls(ab)

    def __repr__(self):
        return f"NoiseSchedule(T={self.T})"


class Denoiser(Protocol):
    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray: ...

    # Optional: ``posterior_variance(t) -> float``, see NoiseSchedule.

    def vjp(self, x_t: np.ndarray, t: int, cotangent: np.ndarray) -> np.ndarray: ...


class GuidanceError(FloatingPointError):
    """Guidance produced a non-finite gradient."""

    def __init__(self, term, t):
        super().__init__(f"non-finite guidance gradient from energy term {term!r} at t={t}")
        self.term = term
        self.t = t


@dataclass(frozen=True)
class GuidedSamplerConfig:
    guided_steps: int = 20
    guidance_scale: float = 1.0
    through_denoiser: bool = True
    seed: int = 0
    # Gradient norm cap is clip_factor * sqrt(dimension); None disables it.
    clip_factor: float | None = 10.0
    # Form the step mean from the shifted point as well (a_t * x_t').
    shift_mean: bool = False

    def __post_init__(self):
        if self.guided_steps < 0:
            raise ValueError("guided_steps must be >= 0")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")

    def unguided(self):
        return replace(self, guided_steps=0)

    def with_seed(self, seed):
        return replace(self, seed=seed)


def _check_t(t, sched, lo=0):
    if not lo <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def add_noise(x0, t, eps, sched: NoiseSchedule):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {eps.shape}")
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t, eps_hat, sched: NoiseSchedule):
    ab = max(sched.alpha_bar[t], ALPHA_BAR_FLOOR)
    return (x_t - math.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / math.sqrt(ab)


def step_sigma(sched: NoiseSchedule, t, denoiser=None):
    """Reverse-step noise scale, widened by the denoiser's posterior variance if known.

    With the exact posterior variance of a Gaussian prior the reverse
    transition is exact; the plain posterior sigma alone under-disperses
    badly with 25 coarse steps.
    """
    pv = getattr(denoiser, "posterior_variance", None)
    extra = 0.0 if pv is None else sched.x0_coef[t] ** 2 * pv(t)
    return math.sqrt(sched.sigma[t] ** 2 + extra)


def reverse_step(x_t, t, eps_hat, sched: NoiseSchedule, z, sigma=None):
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != np.shape(eps_hat) or x_t.shape != np.shape(z):
        raise ValueError("shape mismatch in reverse step")
    _check_t(t, sched, lo=1)
    sigma = sched.sigma[t] if sigma is None else sigma
    return sched.a[t] * x_t - sched.b[t] * eps_hat + sigma * z


def is_guided(t, gcfg: GuidedSamplerConfig, sched: NoiseSchedule):
    """Guidance covers the first ``guided_steps`` reverse steps, i.e. the largest t."""
    return t > sched.T - gcfg.guided_steps


def guidance_gradient(x_t, t, denoiser, m, modes, cfg, gcfg, sched, eps_hat=None):
    """Gradient of the combined energy of the predicted clean sample w.r.t. ``x_t``.

    Returns ``(gradient, info)``; ``info`` holds the per-term energies of the
    predicted sample and the gradient norm before clipping.
    """
    if eps_hat is None:
        eps_hat = denoiser.predict_eps(x_t, t)
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    term_grads = energy_term_gradients(x0_hat, m, modes, cfg)
    g_e = np.zeros_like(x_t)
    for term, g in term_grads.items():
        if not np.all(np.isfinite(g)):
            raise GuidanceError(term, t)
        g_e += g
    ab = max(sched.alpha_bar[t], ALPHA_BAR_FLOOR)
    if gcfg.through_denoiser:
        back = g_e - math.sqrt(1.0 - sched.alpha_bar[t]) * denoiser.vjp(x_t, t, g_e)
    else:
        back = g_e
    grad = back / math.sqrt(ab)
    if not np.all(np.isfinite(grad)):
        raise GuidanceError("denoiser", t)
    norm = float(np.linalg.norm(grad))
    if gcfg.clip_factor is not None:
        cap = gcfg.clip_factor * math.sqrt(grad.size)
        if norm > cap:
            grad = grad * (cap / norm)
    info = {"energies": energy_terms(x0_hat, m, modes, cfg), "grad_norm": norm}
    return grad, info


def guided_step(x_t, t, denoiser, m, modes, cfg, gcfg, sched, z, telemetry=None):
    """One reverse step with the denoiser evaluated at the guidance-shifted point.

    The step mean is ``a_t * x_t - b_t * eps(x_t')`` with
    ``x_t' = x_t - scale * grad``; outside the guided window this is exactly
    :func:`reverse_step`.
    """
    eps_hat = denoiser.predict_eps(x_t, t)
    record = {"t": int(t), "guided": bool(is_guided(t, gcfg, sched))}
    if record["guided"] and gcfg.guidance_scale > 0:
        grad, info = guidance_gradient(x_t, t, denoiser, m, modes, cfg, gcfg, sched, eps_hat)
        x_shift = x_t - gcfg.guidance_scale * grad
        eps_hat = denoiser.predict_eps(x_shift, t)
        record.update(info)
        record["gamma"] = gcfg.guidance_scale
        if gcfg.shift_mean:
            x_t = x_shift
    if telemetry is not None:
        telemetry.append(record)
    return reverse_step(x_t, t, eps_hat, sched, z, step_sigma(sched, t, denoiser))


@dataclass
class SampleResult:
    x0: np.ndarray
    energy: float
    telemetry: list = field(default_factory=list)


def sample(denoiser, m, modes, cfg: GuidanceConfig, gcfg: GuidedSamplerConfig, sched: NoiseSchedule,
           shape, x_T=None) -> SampleResult:
    """Run the reverse chain from ``x_T`` (drawn from the seed if not given).

    The returned energy is the combined energy of the final sample against
    ``modes`` under ``cfg``.
    """
    rng = np.random.default_rng(gcfg.seed)
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    if x.shape != tuple(shape):
        raise ValueError(f"x_T shape {x.shape} does not match {tuple(shape)}")
    telemetry = []
    for t in range(sched.T, 0, -1):
        z = rng.standard_normal(shape)
        x = guided_step(x, t, denoiser, m, modes, cfg, gcfg, sched, z, telemetry)
    return SampleResult(x, combined_energy(x, m, modes, cfg), telemetry)


def write_telemetry(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
