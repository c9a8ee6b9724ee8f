import numpy as np

from flowmodes.energies import GuidanceConfig
from flowmodes.gradcheck import fd_gradient, random_instance, relative_error, run_gradcheck


def test_random_instances_have_both_regions():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, m, modes = random_instance(rng)
        assert x.shape == (3, 8, 8, 2) and 0 < m.sum() < m.size and len(modes) <= 2


def test_fd_gradient_of_quadratic_like_camera_term():
    # E_c of a flow with no near-zero vectors is smooth; FD must agree with the hand gradient.
    rng = np.random.default_rng(1)
    x = rng.uniform(1, 2, (2, 3, 3, 2))
    m = np.zeros((3, 3))
    m[1, 1] = 1
    cfg = GuidanceConfig(lambda_d=0, lambda_c=1, lambda_o=0, lambda_s=0)
    g = fd_gradient(x.copy(), m, [], cfg)
    n_bg = 8 * 2
    ref = x / np.linalg.norm(x, axis=-1, keepdims=True) / n_bg * (1 - m)[None, :, :, None]
    assert relative_error(g, ref) < 1e-8


def test_small_run_passes():
    res = run_gradcheck(trials=5, seed=3)
    assert res.ok and res.summary().startswith("5/5 within 0.0001")
