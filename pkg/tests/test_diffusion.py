import math

import numpy as np
import pytest

from flowmodes.diffusion import (
    GuidanceError,
    GuidedSamplerConfig,
    NoiseSchedule,
    add_noise,
    guidance_gradient,
    guided_step,
    is_guided,
    predict_x0,
    reverse_step,
    sample,
    step_sigma,
    write_telemetry,
)
from flowmodes.energies import GuidanceConfig, camera_energy, combined_energy
from flowmodes.flowcore import disk_mask
from flowmodes.priors import MixtureDenoiser, MixturePrior, ModeSpec, build_motion_bank

SCHED = NoiseSchedule.cosine()
QUARTER = NoiseSchedule([1.0, 0.25, 0.0])


def small_problem(seed=0, K=2, shape=(2, 6, 6, 2), s=0.3):
    rng = np.random.default_rng(seed)
    prior = MixturePrior(np.full(K, 1.0 / K), rng.standard_normal((K,) + shape), s)
    mask = disk_mask(shape[1], shape[2], (shape[1] // 2, shape[2] // 2), 2)
    return prior, MixtureDenoiser(prior, SCHED), mask, rng


class PlainDenoiser:
    """Exact mixture denoiser without the posterior-variance hint."""

    def __init__(self, inner):
        self.inner = inner

    def predict_eps(self, x_t, t):
        return self.inner.predict_eps(x_t, t)

    def vjp(self, x_t, t, u):
        return self.inner.vjp(x_t, t, u)


def test_schedule_shape():
    ab = SCHED.alpha_bar
    assert SCHED.T == 25 and ab[0] == 1.0 and np.all(np.diff(ab) < 0)
    assert ab[-1] == pytest.approx(math.cos(math.pi / 2 * 0.995) ** 2)
    assert np.all(SCHED.sigma[1:] >= 0)
    # a_t, b_t reproduce the ancestral mean sqrt(ab[t-1]) * x0_hat + ... for exact eps
    t = 10
    alpha = ab[t] / ab[t - 1]
    assert SCHED.a[t] == pytest.approx(1 / math.sqrt(alpha))
    assert SCHED.b[t] == pytest.approx((1 - alpha) / math.sqrt(alpha) / math.sqrt(1 - ab[t]))


def test_add_noise_examples():
    x0, eps = np.full((1, 2, 2, 2), 4.0), np.full((1, 2, 2, 2), 2.0)
    np.testing.assert_array_equal(add_noise(x0, 0, eps, QUARTER), x0)
    np.testing.assert_array_equal(add_noise(x0, 2, eps, QUARTER), eps)
    np.testing.assert_allclose(add_noise(x0, 1, eps, QUARTER), 2 + math.sqrt(3), rtol=1e-15)
    assert add_noise(x0, 1, eps, QUARTER)[0, 0, 0, 0] == pytest.approx(3.7321, abs=1e-4)
    with pytest.raises(ValueError):
        add_noise(x0, 1, eps[..., :1], QUARTER)


def test_predict_x0_examples():
    x_t, eps = np.full((1, 2, 2, 2), 2 + math.sqrt(3)), np.full((1, 2, 2, 2), 2.0)
    np.testing.assert_allclose(predict_x0(x_t, 1, eps, QUARTER), 4.0, rtol=1e-14)
    np.testing.assert_array_equal(predict_x0(x_t, 0, eps, QUARTER), x_t)


def test_noise_then_predict_is_identity_for_every_t():
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 2, 4, 4, 2))
    for t in range(SCHED.T + 1):
        np.testing.assert_allclose(predict_x0(add_noise(x0, t, eps, SCHED), t, eps, SCHED), x0,
                                   atol=1e-9 * max(1.0, 1 / math.sqrt(SCHED.alpha_bar[t])))


def test_delta_prior_collapses_deterministically():
    mu = np.random.default_rng(1).standard_normal((2, 4, 4, 2))
    prior = MixturePrior([1.0], mu[None], 0.0)
    den = MixtureDenoiser(prior, SCHED)
    x = np.random.default_rng(2).standard_normal(mu.shape)
    for t in range(SCHED.T, 0, -1):
        x = reverse_step(x, t, den.predict_eps(x, t), SCHED, np.zeros_like(x), sigma=0.0)
    np.testing.assert_allclose(x, mu, atol=1e-9)


def test_zero_scale_guided_step_matches_unguided():
    prior, den, m, rng = small_problem()
    x, z = rng.standard_normal((2,) + prior.shape)
    t = 20
    plain = reverse_step(x, t, den.predict_eps(x, t), SCHED, z, step_sigma(SCHED, t, den))
    for gcfg in (GuidedSamplerConfig(guidance_scale=0.0), GuidedSamplerConfig(guided_steps=0)):
        out = guided_step(x, t, den, m, [], GuidanceConfig(), gcfg, SCHED, z)
        assert out.tobytes() == plain.tobytes()
    off = GuidanceConfig(lambda_d=0, lambda_c=0, lambda_o=0, lambda_s=0)
    out = guided_step(x, t, den, m, [], off, GuidedSamplerConfig(), SCHED, z)
    assert out.tobytes() == plain.tobytes()
    # without a posterior-variance hint the step uses the schedule's sigma
    bare = PlainDenoiser(den)
    out = guided_step(x, t, bare, m, [], GuidanceConfig(), GuidedSamplerConfig(guidance_scale=0.0), SCHED, z)
    assert out.tobytes() == reverse_step(x, t, den.predict_eps(x, t), SCHED, z).tobytes()


def test_guidance_window():
    gcfg = GuidedSamplerConfig(guided_steps=20)
    assert [t for t in range(1, 26) if not is_guided(t, gcfg, SCHED)] == [1, 2, 3, 4, 5]
    prior, den, m, _ = small_problem()
    res = sample(den, m, [], GuidanceConfig(tau_object=4.0), gcfg, SCHED, prior.shape)
    guided = [r for r in res.telemetry if r["guided"]]
    assert [r["t"] for r in guided] == list(range(25, 5, -1))
    for r in guided:
        assert math.isfinite(r["grad_norm"])
        assert all(math.isfinite(v) for v in r["energies"].values())
        assert r["gamma"] == 1.0


def test_one_step_descent_with_line_search():
    cfg = GuidanceConfig(tau_object=4.0)
    for seed in range(10):
        prior, den, m, rng = small_problem(seed)
        t = int(rng.integers(5, 20))
        x_t = rng.standard_normal(prior.shape)
        others = [prior.means[0] + 0.5 * rng.standard_normal(prior.shape)]
        for detached in (False, True):
            gcfg = GuidedSamplerConfig(through_denoiser=not detached, clip_factor=None)
            g, _ = guidance_gradient(x_t, t, den, m, others, cfg, gcfg, SCHED)

            def energy(x):
                return combined_energy(predict_x0(x, t, den.predict_eps(x, t), SCHED), m, others, cfg)

            e0, gamma = energy(x_t), 1.0
            while energy(x_t - gamma * g) > e0 and gamma > 1e-12:
                gamma /= 2
            if not detached:
                assert energy(x_t - gamma * g) <= e0


def test_guidance_gradient_matches_finite_differences():
    cfg = GuidanceConfig(tau_object=4.0)
    prior, den, m, rng = small_problem(3)
    t = 12
    x_t = rng.standard_normal(prior.shape)
    others = [prior.means[1]]
    g, _ = guidance_gradient(x_t, t, den, m, others, cfg, GuidedSamplerConfig(clip_factor=None), SCHED)

    def energy(x):
        return combined_energy(predict_x0(x, t, den.predict_eps(x, t), SCHED), m, others, cfg)

    h = 1e-5
    for _ in range(10):
        v = rng.standard_normal(x_t.shape)
        fd = (energy(x_t + h * v) - energy(x_t - h * v)) / (2 * h)
        assert float(np.sum(g * v)) == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_gradient_clipping_caps_norm():
    prior, den, m, rng = small_problem()
    x_t = rng.standard_normal(prior.shape)
    gcfg = GuidedSamplerConfig(clip_factor=1e-3)
    g, info = guidance_gradient(x_t, 20, den, m, [x_t], GuidanceConfig(), gcfg, SCHED)
    assert np.linalg.norm(g) == pytest.approx(1e-3 * math.sqrt(g.size))
    assert info["grad_norm"] > np.linalg.norm(g)


def test_non_finite_gradient_is_reported():
    prior, den, m, rng = small_problem()
    x_t = rng.standard_normal(prior.shape)
    x_t[0, 0, 0, 0] = np.nan
    with pytest.raises(GuidanceError, match="at t=20"):
        guidance_gradient(x_t, 20, den, m, [], GuidanceConfig(), GuidedSamplerConfig(), SCHED)


def test_sample_is_seeded(tmp_path):
    prior, den, m, _ = small_problem()
    gcfg = GuidedSamplerConfig(seed=11)
    a = sample(den, m, [prior.means[0]], GuidanceConfig(tau_object=4.0), gcfg, SCHED, prior.shape)
    b = sample(den, m, [prior.means[0]], GuidanceConfig(tau_object=4.0), gcfg, SCHED, prior.shape)
    assert a.x0.tobytes() == b.x0.tobytes() and a.energy == b.energy
    write_telemetry(a.telemetry, tmp_path / "a.jsonl")
    write_telemetry(b.telemetry, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == SCHED.T


@pytest.mark.slow
def test_camera_guidance_avoids_pan():
    # Low jitter so that background noise alone stays under the 10% threshold.
    modes = [ModeSpec("pan", "camera_pan", 0.5, {"angle_deg": 0, "speed": 0.5}),
             ModeSpec("slide", "translation", 0.5, {"angle_deg": 90, "speed": 0.5})]
    scene = build_motion_bank(modes=modes, jitter=0.05)
    den = MixtureDenoiser(scene.prior(), SCHED)
    pan = camera_energy(scene.means[0], scene.mask)
    cfg = GuidanceConfig(lambda_d=0, lambda_o=0, lambda_s=0)
    hits = 0
    for seed in range(20):
        res = sample(den, scene.mask, [], cfg, GuidedSamplerConfig(seed=seed, shift_mean=True), SCHED,
                     scene.shape)
        hits += camera_energy(res.x0, scene.mask) < 0.1 * pan
    print(f"background below 10% of pan in {hits}/20 seeds")
    assert hits >= 18
