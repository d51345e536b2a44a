"""Facial-landmark condition images: colored anti-aliased contour polylines.

Each landmark group draws as a closed 2-pixel polyline in a fixed palette
color on black, giving the guidance model a pose-aligned control signal.
Rendering is deterministic; groups compose by per-channel max so the
result is independent of draw order.
"""

import numpy as np

from .camera import NEAR_PLANE, CameraSample
from ..head_model import HeadModel, MeshState, landmark_positions

LINE_WIDTH = 2.0

# fixed palette; the conditioning consumer relies on these exact colors
GROUP_COLORS = {
    "upper_lips": (1.0, 0.25, 0.25),
    "lower_lips": (1.0, 0.65, 0.15),
    "eye_boundary_left": (0.25, 1.0, 0.35),
    "eye_boundary_right": (0.25, 0.85, 1.0),
    "eyeball_left": (0.4, 0.4, 1.0),
    "eyeball_right": (1.0, 0.4, 1.0),
    "face_boundary": (1.0, 1.0, 0.35),
}
DEFAULT_GROUP_COLOR = (0.8, 0.8, 0.8)


def _project_points(points, camera: CameraSample):
    R, t = camera.world_to_camera()
    fx, fy, cx, cy = camera.intrinsics()
    p = points @ R.T + t
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = np.stack([fx * p[:, 0] / z + cx, fy * p[:, 1] / z + cy], axis=1)
    return xy, z > NEAR_PLANE


def _draw_segment(coverage, p0, p1, width, height):
    x0 = int(max(0, np.floor(min(p0[0], p1[0]) - LINE_WIDTH)))
    x1 = int(min(width, np.ceil(max(p0[0], p1[0]) + LINE_WIDTH) + 1))
    y0 = int(max(0, np.floor(min(p0[1], p1[1]) - LINE_WIDTH)))
    y1 = int(min(height, np.ceil(max(p0[1], p1[1]) + LINE_WIDTH) + 1))
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    d = np.stack([gx - p0[0], gy - p0[1]], axis=-1)
    seg = p1 - p0
    seg_len2 = seg @ seg
    if seg_len2 > 0:
        tt = np.clip((d @ seg) / seg_len2, 0.0, 1.0)
        d = d - tt[..., None] * seg
    dist = np.linalg.norm(d, axis=-1)
    cov = np.clip(LINE_WIDTH / 2.0 + 0.5 - dist, 0.0, 1.0)
    region = coverage[y0:y1, x0:x1]
    np.maximum(region, cov, out=region)


def render_landmark_map(
    model: HeadModel, state: MeshState, camera: CameraSample, image_size=None
) -> np.ndarray:
    """Condition image (H, W, 3) float in [0, 1]."""
    width, height = image_size if image_size else (camera.width, camera.height)
    image = np.zeros((height, width, 3))
    for name, pts3d in landmark_positions(model, state).items():
        xy, in_front = _project_points(pts3d, camera)
        n = len(xy)
        if n == 0:
            continue
        coverage = np.zeros((height, width))
        closed = n >= 3
        for i in range(n if closed else n - 1):
            j = (i + 1) % n
            if in_front[i] and in_front[j]:
                _draw_segment(coverage, xy[i], xy[j], width, height)
        if n == 1 and in_front[0]:
            _draw_segment(coverage, xy[0], xy[0], width, height)
        color = np.asarray(GROUP_COLORS.get(name, DEFAULT_GROUP_COLOR))
        np.maximum(image, coverage[:, :, None] * color, out=image)
    return image
