from .camera import NEAR_PLANE, CameraRanges, CameraSample, sample_camera
from .project import ProjectCache, ScreenGaussians, project, project_backward
from .raster import (
    RasterCache,
    RenderOutput,
    StaleIntermediatesError,
    rasterize,
    rasterize_backward,
)
from .landmark_map import GROUP_COLORS, render_landmark_map
from .imageio import (
    b64_f32,
    f32_from_b64,
    png_bytes,
    read_png,
    read_raw_f32,
    write_png,
    write_raw_f32,
)

__all__ = [
    "NEAR_PLANE", "CameraRanges", "CameraSample", "sample_camera",
    "ProjectCache", "ScreenGaussians", "project", "project_backward",
    "RasterCache", "RenderOutput", "StaleIntermediatesError",
    "rasterize", "rasterize_backward",
    "GROUP_COLORS", "render_landmark_map",
    "b64_f32", "f32_from_b64", "png_bytes", "read_png", "read_raw_f32",
    "write_png", "write_raw_f32",
]
