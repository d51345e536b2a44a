"""Projection of world Gaussians to screen space, with analytic backward.

The 2D covariance is the camera-frame covariance pushed through the local
affine approximation of the perspective map (first-order Jacobian), plus a
0.3-pixel isotropic floor for anti-aliasing. Points behind the near plane
are culled, not errored.
"""

from dataclasses import dataclass

import numpy as np

from .camera import NEAR_PLANE, CameraSample

COV2D_FLOOR = 0.3
FRUSTUM_LIMIT = 1.3  # J evaluated at frustum-clamped view rays, as usual


@dataclass
class ScreenGaussians:
    """Visible Gaussians in screen space; index_map points into the input set."""

    means2d: np.ndarray   # (M, 2) pixel coords
    cov2d: np.ndarray     # (M, 3) xx, xy, yy
    depths: np.ndarray    # (M,)
    colors: np.ndarray    # (M, 3)
    opacities: np.ndarray  # (M,)
    index_map: np.ndarray  # (M,) into the original point array

    def __len__(self):
        return len(self.depths)


@dataclass
class ProjectCache:
    camera: CameraSample
    p_view: np.ndarray
    rot_world: np.ndarray
    scale_world: np.ndarray
    clamped_x: np.ndarray
    clamped_y: np.ndarray
    index_map: np.ndarray
    n_points: int


def project(means3d, scales, rotmats, colors, opacities, camera: CameraSample):
    """World Gaussians -> ScreenGaussians (+ cache for the backward pass)."""
    R_wc, t_wc = camera.world_to_camera()
    fx, fy, cx, cy = camera.intrinsics()
    p_view_all = means3d @ R_wc.T + t_wc
    vis = p_view_all[:, 2] > NEAR_PLANE
    idx = np.where(vis)[0]
    p = p_view_all[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    means2d = np.stack([fx * x / z + cx, fy * y / z + cy], axis=1)

    lim_x, lim_y = (FRUSTUM_LIMIT * t for t in camera.tan_half_fov())
    u = x / z
    v = y / z
    cl_x = np.abs(u) > lim_x
    cl_y = np.abs(v) > lim_y
    tx = np.clip(u, -lim_x, lim_x)
    ty = np.clip(v, -lim_y, lim_y)

    # J rows scaled by intrinsics; M = J @ R_wc
    zero = np.zeros_like(z)
    J = np.stack(
        [
            np.stack([fx / z, zero, -fx * tx / z], axis=1),
            np.stack([zero, fy / z, -fy * ty / z], axis=1),
        ],
        axis=1,
    )  # (M, 2, 3)
    Mm = J @ R_wc  # (M, 2, 3)
    S = scales[idx]
    Rw = rotmats[idx]
    cov3d = np.einsum("pab,pb,pcb->pac", Rw, S * S, Rw)
    full = np.einsum("pab,pbc,pdc->pad", Mm, cov3d, Mm)
    cov2d = np.stack(
        [full[:, 0, 0] + COV2D_FLOOR, full[:, 0, 1], full[:, 1, 1] + COV2D_FLOOR], axis=1
    )

    screen = ScreenGaussians(
        means2d=means2d,
        cov2d=cov2d,
        depths=z.copy(),
        colors=colors[idx],
        opacities=opacities[idx],
        index_map=idx,
    )
    cache = ProjectCache(
        camera=camera,
        p_view=p,
        rot_world=Rw,
        scale_world=S,
        clamped_x=cl_x,
        clamped_y=cl_y,
        index_map=idx,
        n_points=len(means3d),
    )
    return screen, cache


def project_backward(cache: ProjectCache, d_means2d, d_cov2d, d_colors, d_opacities):
    """Adjoint of project: gradients w.r.t. world mean/scale/rotation and the
    pass-through color/opacity, scattered back to the full point set."""
    cam = cache.camera
    R_wc, _ = cam.world_to_camera()
    fx, fy, _, _ = cam.intrinsics()
    p = cache.p_view
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    lim_x, lim_y = (FRUSTUM_LIMIT * t for t in cam.tan_half_fov())
    tx = np.clip(x / z, -lim_x, lim_x)
    ty = np.clip(y / z, -lim_y, lim_y)

    zero = np.zeros_like(z)
    J = np.stack(
        [
            np.stack([fx / z, zero, -fx * tx / z], axis=1),
            np.stack([zero, fy / z, -fy * ty / z], axis=1),
        ],
        axis=1,
    )
    Mm = J @ R_wc
    S = cache.scale_world
    Rw = cache.rot_world
    D = S * S
    cov3d = np.einsum("pab,pb,pcb->pac", Rw, D, Rw)

    # symmetric gradient matrix of the 2x2 covariance (xy counted once)
    dC = np.empty((len(p), 2, 2))
    dC[:, 0, 0] = d_cov2d[:, 0]
    dC[:, 0, 1] = dC[:, 1, 0] = 0.5 * d_cov2d[:, 1]
    dC[:, 1, 1] = d_cov2d[:, 2]

    G3 = np.einsum("pba,pbc,pcd->pad", Mm, dC, Mm)  # d/d cov3d, symmetric
    d_Rw = 2.0 * np.einsum("pab,pbc,pc->pac", G3, Rw, D)
    d_S = 2.0 * S * np.einsum("pba,pbc,pca->pa", Rw, G3, Rw)

    dM = 2.0 * np.einsum("pab,pbc,pcd->pad", dC, Mm, cov3d)
    dJ = np.einsum("pac,bc->pab", dM, R_wc)

    # view-space gradient through J's entries and the projected mean
    free_x = ~cache.clamped_x
    free_y = ~cache.clamped_y
    d_x = d_means2d[:, 0] * fx / z
    d_y = d_means2d[:, 1] * fy / z
    d_z = -(d_means2d[:, 0] * fx * x + d_means2d[:, 1] * fy * y) / (z * z)

    d_z += -dJ[:, 0, 0] * fx / (z * z)
    d_z += -dJ[:, 1, 1] * fy / (z * z)
    # J02 = -fx*tx/z, tx = clip(x/z): d/dx = -fx/z^2 (free), d/dz = fx*tx/z^2 + fx*x/z^3 (free)
    d_x += np.where(free_x, -dJ[:, 0, 2] * fx / (z * z), 0.0)
    d_z += dJ[:, 0, 2] * np.where(free_x, fx * tx / (z * z) + fx * x / z**3, fx * tx / (z * z))
    d_y += np.where(free_y, -dJ[:, 1, 2] * fy / (z * z), 0.0)
    d_z += dJ[:, 1, 2] * np.where(free_y, fy * ty / (z * z) + fy * y / z**3, fy * ty / (z * z))

    d_pview = np.stack([d_x, d_y, d_z], axis=1)
    d_mean3d_vis = d_pview @ R_wc

    n = cache.n_points
    idx = cache.index_map
    d_means3d = np.zeros((n, 3))
    d_scales = np.zeros((n, 3))
    d_rot = np.zeros((n, 3, 3))
    d_col = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_means3d[idx] = d_mean3d_vis
    d_scales[idx] = d_S
    d_rot[idx] = d_Rw
    d_col[idx] = d_colors
    d_op[idx] = d_opacities
    return d_means3d, d_scales, d_rot, d_col, d_op
