"""Per-triangle local frames and the rigid rigging transform.

Each Gaussian lives in the local frame of one mesh triangle. The frame is
(center t, rotation R~ with columns [e_hat, n_hat, e_hat x n_hat], area a,
size tau), and the world Gaussian is

    mu' = sqrt(a) R~ mu + t,   s' = sqrt(a) s,   R' = R~ R.

All operations are pure and vectorized over triangles/points; the inverse
map and the full analytic backward (including gradients w.r.t. the three
triangle vertices) live here too.
"""

from dataclasses import dataclass

import numpy as np

from .rotations import quat_to_rotmat, quat_to_rotmat_backward

DEGENERATE_AREA = 1e-12


class DegenerateTriangleError(ValueError):
    pass


@dataclass
class TriangleFrames:
    """Struct-of-arrays frames for F triangles."""

    centers: np.ndarray  # (F, 3)
    rotations: np.ndarray  # (F, 3, 3), orthonormal, det +1
    areas: np.ndarray  # (F,)
    sizes: np.ndarray  # (F,) tau

    def __len__(self):
        return len(self.areas)


def triangle_frames(vertices, faces, tau_mode="center_to_vertex", prev=None) -> TriangleFrames:
    """Frames for all faces of a mesh.

    tau_mode: "center_to_vertex" (default) or "max_pairwise" (max distance
    over all pairs among center and vertices).
    prev: frames from the previous pose; degenerate triangles keep their
    previous frame instead of erroring. Without prev, degenerate triangles
    are a hard error (load/init time).
    """
    v = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]  # (F, 3, 3)
    v0, v1, v2 = v[:, 0], v[:, 1], v[:, 2]
    e1 = v1 - v0
    n = np.cross(e1, v2 - v0)
    nn = np.linalg.norm(n, axis=1)
    areas = 0.5 * nn
    bad = areas <= DEGENERATE_AREA
    if np.any(bad):
        if prev is None:
            raise DegenerateTriangleError(
                f"degenerate triangle(s) {np.where(bad)[0][:8].tolist()} (area <= {DEGENERATE_AREA})"
            )
        good = ~bad
        out = TriangleFrames(
            prev.centers.copy(), prev.rotations.copy(), prev.areas.copy(), prev.sizes.copy()
        )
        sub = triangle_frames(vertices, np.asarray(faces)[good], tau_mode=tau_mode)
        out.centers[good] = sub.centers
        out.rotations[good] = sub.rotations
        out.areas[good] = sub.areas
        out.sizes[good] = sub.sizes
        return out

    e_hat = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    n_hat = n / nn[:, None]
    rot = np.stack([e_hat, n_hat, np.cross(e_hat, n_hat)], axis=2)
    centers = (v0 + v1 + v2) / 3.0
    d = np.linalg.norm(v - centers[:, None, :], axis=2)  # (F, 3)
    tau = d.max(axis=1)
    if tau_mode == "max_pairwise":
        for i, j in ((0, 1), (1, 2), (0, 2)):
            tau = np.maximum(tau, np.linalg.norm(v[:, i] - v[:, j], axis=1))
    elif tau_mode != "center_to_vertex":
        raise ValueError(f"unknown tau_mode {tau_mode!r}")
    return TriangleFrames(centers=centers, rotations=rot, areas=areas, sizes=tau)


def triangle_frame(v0, v1, v2, tau_mode="center_to_vertex"):
    """Single-triangle convenience wrapper; returns (t, R~, a, tau)."""
    f = triangle_frames(np.stack([v0, v1, v2]), np.array([[0, 1, 2]]), tau_mode=tau_mode)
    return f.centers[0], f.rotations[0], f.areas[0], f.sizes[0]


def _gather(frames: TriangleFrames, binding):
    b = np.asarray(binding)
    return (
        frames.centers[b],
        frames.rotations[b],
        frames.areas[b],
    )


def deform_gaussian(mu, s, quat, frames: TriangleFrames, binding):
    """Local -> world: returns (mu' (P,3), s' (P,3), R' (P,3,3))."""
    t, Rt, a = _gather(frames, binding)
    sq = np.sqrt(a)[:, None]
    mu_w = sq * np.einsum("pab,pb->pa", Rt, mu) + t
    s_w = sq * s
    R_w = Rt @ quat_to_rotmat(quat)
    return mu_w, s_w, R_w


def invert_deform(mu_w, s_w, R_w, frames: TriangleFrames, binding):
    """World -> local, the exact inverse of deform_gaussian."""
    t, Rt, a = _gather(frames, binding)
    if np.any(a <= 0):
        raise ValueError("cannot invert deformation for non-positive triangle area")
    sq = np.sqrt(a)[:, None]
    mu = np.einsum("pba,pb->pa", Rt, mu_w - t) / sq
    s = s_w / sq
    R = np.einsum("pba,pbc->pac", Rt, R_w)
    return mu, s, R


def cross_backward(a, b, d_c):
    """Adjoint of c = a x b (rowwise)."""
    return np.cross(b, d_c), np.cross(d_c, a)


def _normalize_backward(raw, d_unit):
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    u = raw / n
    return (d_unit - u * np.sum(d_unit * u, axis=-1, keepdims=True)) / n


def deform_backward(
    d_mu_w, d_s_w, d_R_w, mu, s, quat, frames: TriangleFrames, binding, vertices, faces
):
    """Analytic adjoint of deform_gaussian through the frame construction.

    Inputs are upstream gradients w.r.t. the world Gaussian; returns
    (d_mu, d_s, d_quat, d_vertices) where d_vertices has the mesh vertex
    shape. tau carries no gradient (it only sets clamp thresholds).
    """
    binding = np.asarray(binding)
    t, Rt, a = _gather(frames, binding)
    sq = np.sqrt(a)
    R_loc = quat_to_rotmat(quat)

    d_mu = sq[:, None] * np.einsum("pba,pb->pa", Rt, d_mu_w)
    d_s = sq[:, None] * d_s_w
    d_R_loc = np.einsum("pba,pbc->pac", Rt, d_R_w)
    d_quat = quat_to_rotmat_backward(quat, d_R_loc)

    Rt_mu = np.einsum("pab,pb->pa", Rt, mu)
    d_a = (np.sum(d_mu_w * Rt_mu, axis=1) + np.sum(d_s_w * s, axis=1)) / (2.0 * sq)
    d_t_pt = d_mu_w
    d_Rt_pt = sq[:, None, None] * d_mu_w[:, :, None] * mu[:, None, :] + np.einsum(
        "pab,pcb->pac", d_R_w, R_loc
    )

    # scatter per-point frame gradients onto faces
    F = len(frames)
    d_t = np.zeros((F, 3))
    d_Rt = np.zeros((F, 3, 3))
    d_area = np.zeros(F)
    np.add.at(d_t, binding, d_t_pt)
    np.add.at(d_Rt, binding, d_Rt_pt)
    np.add.at(d_area, binding, d_a)

    d_vertices = np.zeros_like(np.asarray(vertices, dtype=np.float64))
    frame_backward_accumulate(d_t, d_Rt, d_area, vertices, faces, d_vertices)
    return d_mu, d_s, d_quat, d_vertices


def frame_backward_accumulate(d_t, d_Rt, d_area, vertices, faces, d_vertices):
    """Adjoint of triangle_frames for (t, R~, a); accumulates into d_vertices."""
    faces = np.asarray(faces)
    v = np.asarray(vertices, dtype=np.float64)[faces]
    v0, v1, v2 = v[:, 0], v[:, 1], v[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n, axis=1, keepdims=True)
    e_hat = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    n_hat = n / nn

    d_ehat = d_Rt[:, :, 0].copy()
    d_nhat = d_Rt[:, :, 1].copy()
    d_b = d_Rt[:, :, 2]
    # b = e_hat x n_hat
    da, db = cross_backward(e_hat, n_hat, d_b)
    d_ehat += da
    d_nhat += db

    d_e1 = _normalize_backward(e1, d_ehat)
    d_n = _normalize_backward(n, d_nhat)
    # a = ||n|| / 2
    d_n += 0.5 * d_area[:, None] * (n / nn)
    da, db = cross_backward(e1, e2, d_n)
    d_e1 += da
    d_e2 = db

    d_v0 = d_t / 3.0 - d_e1 - d_e2
    d_v1 = d_t / 3.0 + d_e1
    d_v2 = d_t / 3.0 + d_e2
    np.add.at(d_vertices, faces[:, 0], d_v0)
    np.add.at(d_vertices, faces[:, 1], d_v1)
    np.add.at(d_vertices, faces[:, 2], d_v2)
