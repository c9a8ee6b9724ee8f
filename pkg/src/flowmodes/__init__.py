"""Guided diffusion sampling of diverse, object-focused motion modes.

Flow fields are ``(F, H, W, 2)`` float arrays of cumulative pixel offsets;
masks are ``(H, W)`` arrays of zeros and ones.
"""

from .diffusion import (
    GuidanceError,
    GuidedSamplerConfig,
    NoiseSchedule,
    add_noise,
    guided_step,
    predict_x0,
    reverse_step,
    sample,
)
from .discovery import (
    ModeSet,
    StoppingRule,
    baseline_fps,
    baseline_random,
    compute_metrics,
    discover_modes,
    fps_select,
)
from .energies import (
    GuidanceConfig,
    camera_energy,
    combined_energy,
    combined_energy_gradient,
    diversity_energy,
    object_energy,
    offset_distance,
    smoothness_energy,
    soft_inverse,
)
from .flowcore import DistanceWeights, ShapeError
from .flowio import FlowFormatError, read_flow, write_flow
from .priors import (
    MixtureDenoiser,
    MixturePrior,
    ModeSpec,
    SceneSpec,
    build_motion_bank,
    exact_eps,
    exact_vjp,
    sample_prior,
)
from .prompting import DragArrow, export_arrows, import_arrows, mode_to_arrows, retrieve_mode

__version__ = "0.1.0"
