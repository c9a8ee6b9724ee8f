import itertools
import math

import numpy as np
import pytest

from flowmodes.diffusion import GuidedSamplerConfig, NoiseSchedule, sample
from flowmodes.discovery import (
    ModeSet,
    StoppingRule,
    assign_labels,
    baseline_fps,
    baseline_random,
    compute_metrics,
    derive_seed,
    discover_modes,
    fps_select,
    samples_to_coverage,
)
from flowmodes.energies import GuidanceConfig, combined_energy, soft_inverse
from flowmodes.priors import MixtureDenoiser, ModeSpec, build_motion_bank, four_translations

SCHED = NoiseSchedule.cosine()
CFG = GuidanceConfig(tau_object=4.0)
SMALL_MASK = {"shape": "disk", "center": [4, 4], "radius": 2}


def small_scene():
    modes = [ModeSpec("right", "translation", 0.5, {"angle_deg": 0, "speed": 0.5}),
             ModeSpec("down", "translation", 0.5, {"angle_deg": 90, "speed": 0.5})]
    return build_motion_bank(8, 8, 3, SMALL_MASK, modes)


@pytest.fixture(scope="module")
def small():
    scene = small_scene()
    return scene, MixtureDenoiser(scene.prior(), SCHED)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(7, 0) == derive_seed(7, 0)
    assert len({derive_seed(7, i) for i in range(100)}) == 100
    assert derive_seed(7, 0) != derive_seed(8, 0)


@pytest.mark.parametrize("pool,n,expected", [([0, 1, 10], 2, [0, 2]), ([0, 4, 5, 9], 3, [0, 3, 1]),
                                             ([3, 1, 2], 3, [0, 1, 2])])
def test_fps_examples(pool, n, expected):
    assert fps_select(np.array(pool, float)[:, None], n) == expected


def test_fps_matches_brute_force_greedy():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((30, 5))
    chosen = [0]
    while len(chosen) < 8:
        best = max((i for i in range(30) if i not in chosen),
                   key=lambda i: (min(np.linalg.norm(pts[i] - pts[j]) for j in chosen), -i))
        chosen.append(best)
    assert fps_select(pts, 8) == chosen


def test_rho_infinite_keeps_max_modes(small):
    scene, den = small
    rule = StoppingRule(rho=math.inf, max_modes=6)
    ms = discover_modes(den, scene.mask, CFG, GuidedSamplerConfig(), SCHED, scene.shape, rule, seed=3)
    assert len(ms) == 6 and ms.n_samples == 6 and ms.stop_reason == "max_modes"


def test_rho_zero_discards_two_and_stops(small):
    scene, den = small
    ms = discover_modes(den, scene.mask, CFG, GuidedSamplerConfig(), SCHED, scene.shape,
                        StoppingRule(rho=0.0), seed=3)
    assert len(ms) == 0 and ms.n_samples == 2 and ms.stop_reason == "consecutive_discards"
    assert ms.max_consecutive_discards() == 2


def test_acceptance_soundness_is_recheckable(small):
    scene, den = small
    rule = StoppingRule(rho=20.0, max_modes=4)
    ms = discover_modes(den, scene.mask, CFG, GuidedSamplerConfig(shift_mean=True), SCHED, scene.shape,
                        rule, seed=5)
    for i, x in enumerate(ms.modes):
        assert ms.energies[i] <= rule.rho
        assert combined_energy(x, scene.mask, ms.modes[:i], CFG) == pytest.approx(ms.energies[i])
    assert ms.max_consecutive_discards() <= 2
    again = discover_modes(den, scene.mask, CFG, GuidedSamplerConfig(shift_mean=True), SCHED, scene.shape,
                           rule, seed=5)
    assert [x.tobytes() for x in again.modes] == [x.tobytes() for x in ms.modes]


def test_random_baseline_equals_unguided_samples(small):
    scene, den = small
    ms = baseline_random(den, scene.mask, 3, 9, SCHED, scene.shape)
    for i, x in enumerate(ms.modes):
        ref = sample(den, scene.mask, [], GuidanceConfig(), GuidedSamplerConfig(guided_steps=0,
                     seed=derive_seed(9, i)), SCHED, scene.shape)
        assert x.tobytes() == ref.x0.tobytes()
    again = baseline_random(den, scene.mask, 3, 9, SCHED, scene.shape)
    assert [x.tobytes() for x in again.modes] == [x.tobytes() for x in ms.modes]


def test_fps_baseline(small):
    scene, den = small
    ms = baseline_fps(den, scene.mask, 4, 4, 2, SCHED, scene.shape)
    assert len(ms) == 4 and ms.seeds[0] == derive_seed(2, 0)
    with pytest.raises(ValueError):
        baseline_fps(den, scene.mask, 5, 4, 2, SCHED, scene.shape)


def stirling2(n, k):
    return sum((-1) ** j * math.comb(k, j) * (k - j) ** n for j in range(k + 1)) // math.factorial(k)


def test_coverage_probability_closed_form_matches_enumeration():
    full = sum(len(set(seq)) == 4 for seq in itertools.product(range(4), repeat=6))
    assert full == math.factorial(4) * stirling2(6, 4) == 1560
    assert 1 - full / 4**6 == pytest.approx(0.619140625)


def test_coupon_collector_expectation():
    assert 4 * sum(1 / k for k in range(1, 5)) == pytest.approx(25 / 3)


@pytest.mark.slow
def test_random_baseline_coverage_rate():
    scene = build_motion_bank(modes=four_translations(0.5))
    den = MixtureDenoiser(scene.prior(), SCHED)
    n = 40
    misses = 0
    for seed in range(n):
        ms = baseline_random(den, scene.mask, 6, seed, SCHED, scene.shape)
        misses += compute_metrics(ms, scene.mask, CFG, scene).coverage < 1
    p = 1 - 1560 / 4**6
    print(f"coverage < 1 in {misses}/{n} runs, closed form {p:.3f}")
    assert abs(misses / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_metrics_single_zero_mode(small):
    scene, _ = small
    rep = compute_metrics([np.zeros(scene.shape)], scene.mask, CFG)
    assert rep.E_c == 0.0
    assert rep.E_o == pytest.approx(0.01 * float(soft_inverse(0, 4.0, 1e-4)))
    assert rep.E_f == pytest.approx(0.5 * (rep.E_o + rep.E_c))
    assert rep.E == pytest.approx(0.5 * (rep.E_d + rep.E_f))
    with pytest.raises(ValueError):
        compute_metrics([], scene.mask, CFG)


def test_metrics_identical_modes(small):
    scene, _ = small
    x = scene.means[0] + 0.1
    rep = compute_metrics([x, x], scene.mask, CFG)
    phi0 = float(soft_inverse(0, 1.0, 1e-4))
    assert rep.E_d == pytest.approx(2 * phi0)
    assert rep.E_d_cross == pytest.approx(phi0)


def test_duplicate_never_lowers_diversity(small):
    scene, _ = small
    rng = np.random.default_rng(0)
    modes = [scene.means[i % 2] + 0.3 * rng.standard_normal(scene.shape) for i in range(3)]
    base = compute_metrics(modes, scene.mask, CFG).E_d
    for x in modes:
        assert compute_metrics(modes + [x], scene.mask, CFG).E_d >= base


def test_labels_and_coverage(small):
    scene, _ = small
    near_right = scene.means[0] + 0.25 * np.random.default_rng(1).standard_normal(scene.shape)
    halfway = 0.5 * (scene.means[0] + scene.means[1])
    labels = assign_labels([near_right, halfway, scene.means[1]], scene)
    assert labels == ["right", None, "down"]
    offset_labels = assign_labels([scene.means[0], scene.means[1]], scene, rule="offset")
    assert offset_labels == ["right", "down"]
    with pytest.raises(ValueError):
        assign_labels([halfway], scene, rule="cosine")
    ms = ModeSet()
    ms.accept(near_right, 0.0, 1)
    ms.discard(9.0, 2)
    ms.accept(scene.means[1], 0.0, 3)
    rep = compute_metrics(ms, scene.mask, CFG, scene)
    assert rep.coverage == 1.0 and rep.samples_to_full_coverage == 3


def test_samples_to_coverage():
    assert samples_to_coverage(["a", None, "a", "b"], [0, 1, 2, 5], ["a", "b"]) == 6
    assert samples_to_coverage(["a", "a"], [0, 1], ["a", "b"]) is None


def test_mode_set_round_trip(tmp_path, small):
    scene, den = small
    ms = discover_modes(den, scene.mask, CFG, GuidedSamplerConfig(), SCHED, scene.shape,
                        StoppingRule(rho=math.inf, max_modes=2), seed=1)
    ms.discard(7.5, 99)
    path = ms.save(tmp_path)
    back = ModeSet.load(path)
    assert back.energies == ms.energies and back.seeds == ms.seeds and back.discards == ms.discards
    for a, b in zip(back.modes, ms.modes):
        np.testing.assert_array_equal(a, b.astype(np.float32))
