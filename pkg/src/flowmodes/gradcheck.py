"""Central finite-difference check of the combined-energy gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energies import GuidanceConfig, combined_energy, combined_energy_gradient


@dataclass
class GradcheckResult:
    trials: int
    passed: int
    worst: float
    tol: float
    errors: list

    @property
    def ok(self):
        return self.passed == self.trials

    def summary(self):
        return f"{self.passed}/{self.trials} within {self.tol:g} (worst relative error {self.worst:.3e})"


def random_instance(rng, shape=(3, 8, 8), max_modes=2):
    """Random flow, a mask with both regions nonempty, and 0..max_modes other flows."""
    F, H, W = shape
    x = rng.standard_normal((F, H, W, 2))
    while True:
        m = (rng.random((H, W)) < 0.4).astype(np.float64)
        if 0 < m.sum() < m.size:
            break
    modes = [rng.standard_normal(x.shape) for _ in range(rng.integers(0, max_modes + 1))]
    return x, m, modes


def fd_gradient(x, m, modes, cfg, h=1e-5):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = combined_energy(x, m, modes, cfg)
        flat[i] = keep - h
        down = combined_energy(x, m, modes, cfg)
        flat[i] = keep
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """Largest absolute disagreement relative to the largest gradient entry."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def run_gradcheck(trials=100, seed=0, cfg: GuidanceConfig = GuidanceConfig(), tol=1e-4, h=1e-5,
                  shape=(3, 8, 8)):
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        x, m, modes = random_instance(rng, shape)
        analytic = combined_energy_gradient(x, m, modes, cfg)
        numeric = fd_gradient(x.copy(), m, modes, cfg, h)
        errors.append(relative_error(analytic, numeric))
    passed = sum(e <= tol for e in errors)
    return GradcheckResult(trials, passed, max(errors) if errors else 0.0, tol, errors)
