"""headsplat: animatable head avatars as mesh-rigged 3D Gaussians."""

__version__ = "0.1.0"

from .head_model import (
    AnimationInput,
    HeadModel,
    MeshState,
    generate_toy_model,
    landmark_positions,
    load_assets,
    pose_mesh,
    save_assets,
)
from .binding import (
    TriangleFrames,
    deform_backward,
    deform_gaussian,
    invert_deform,
    triangle_frame,
    triangle_frames,
)
from .gaussians import (
    BoundCloud,
    DensifyConfig,
    densify_and_prune,
    init_cloud,
    load_checkpoint,
    save_checkpoint,
)
from .regularize import RegConfig, position_penalty, reg_loss, scaling_penalty
from .guidance import (
    GuidanceRequest,
    GuidanceResponse,
    SdsConfig,
    photometric_gradient,
    remote_gradient,
    sds_combine,
    view_prompt,
)
from .config import FitConfig, desk_profile, load_fit_config, paper_profile
from .pipeline import FitView, animate, bench, fit

__all__ = [
    "AnimationInput", "HeadModel", "MeshState", "generate_toy_model",
    "landmark_positions", "load_assets", "pose_mesh", "save_assets",
    "TriangleFrames", "deform_backward", "deform_gaussian", "invert_deform",
    "triangle_frame", "triangle_frames",
    "BoundCloud", "DensifyConfig", "densify_and_prune", "init_cloud",
    "load_checkpoint", "save_checkpoint",
    "RegConfig", "position_penalty", "reg_loss", "scaling_penalty",
    "GuidanceRequest", "GuidanceResponse", "SdsConfig", "photometric_gradient",
    "remote_gradient", "sds_combine", "view_prompt",
    "FitConfig", "desk_profile", "load_fit_config", "paper_profile",
    "FitView", "animate", "bench", "fit",
]
