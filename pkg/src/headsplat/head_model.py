"""Linear-blend-skinning head model: assets, posing, landmarks.

The model follows the usual statistical-head layout: a template mesh,
linear shape/expression displacement bases, per-vertex skinning weights
over a small joint hierarchy, and a joint regressor. A procedural
icosphere "toy head" stands in for licensed assets in tests; real assets
load through the same manifest + raw-blob format.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotations import axis_angle_to_rotmat

LANDMARK_GROUP_NAMES = (
    "upper_lips",
    "lower_lips",
    "eye_boundary_left",
    "eye_boundary_right",
    "eyeball_left",
    "eyeball_right",
    "face_boundary",
)

FLAME_DIMS = {"n_vertices": 5023, "n_shape": 300, "n_expr": 100, "n_joints": 4}

LBS_ROW_SUM_TOL = 1e-4


class AssetError(ValueError):
    """Malformed or inconsistent model asset."""


@dataclass(frozen=True)
class HeadModel:
    """Immutable skinned head model. Safe to share across threads."""

    template_vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int32
    shape_basis: np.ndarray  # (N, 3, n_shape)
    expr_basis: np.ndarray  # (N, 3, n_expr)
    lbs_weights: np.ndarray  # (N, J)
    joint_regressor: np.ndarray  # (J, N)
    joint_parents: np.ndarray  # (J,) int, -1 for roots
    landmark_groups: dict = field(default_factory=dict)
    variant: str = "toy"

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expr(self):
        return self.expr_basis.shape[2]

    @property
    def n_joints(self):
        return self.lbs_weights.shape[1]

    def content_hash(self) -> bytes:
        """32-byte digest over all numeric content, stable across save/load."""
        h = hashlib.sha256()
        for arr, dt in (
            (self.template_vertices, "<f4"),
            (self.shape_basis, "<f4"),
            (self.expr_basis, "<f4"),
            (self.lbs_weights, "<f4"),
            (self.joint_regressor, "<f4"),
            (self.faces, "<u4"),
            (self.joint_parents, "<i4"),
        ):
            h.update(np.ascontiguousarray(arr).astype(dt).tobytes())
        for name in sorted(self.landmark_groups):
            h.update(name.encode())
            h.update(np.asarray(self.landmark_groups[name]).astype("<u4").tobytes())
        return h.digest()

    def validate(self):
        N, J, F = self.n_vertices, self.n_joints, self.n_faces
        if self.faces.min() < 0 or self.faces.max() >= N:
            raise AssetError("faces reference out-of-range vertex indices")
        if np.any(self.lbs_weights < -1e-9):
            bad = int(np.argwhere(np.min(self.lbs_weights, axis=1) < -1e-9)[0, 0])
            raise AssetError(f"lbs_weights row {bad} has negative entries")
        sums = self.lbs_weights.sum(axis=1)
        off = np.abs(sums - 1.0) > LBS_ROW_SUM_TOL
        if np.any(off):
            bad = int(np.argmax(off))
            raise AssetError(
                f"lbs_weights row {bad} sums to {sums[bad]:.6f}, expected 1"
            )
        if self.joint_parents.shape != (J,):
            raise AssetError("joint_parents length must equal joint count")
        for j, p in enumerate(self.joint_parents):
            if p >= j or (p < 0 and p != -1):
                raise AssetError(f"joint_parents[{j}]={p} must be -1 or a lower index")
        if self.variant == "flame":
            got = {
                "n_vertices": N,
                "n_shape": self.n_shape,
                "n_expr": self.n_expr,
                "n_joints": J,
            }
            if got != FLAME_DIMS:
                raise AssetError(f"flame-variant dimensions {got} != {FLAME_DIMS}")
        for name, idx in self.landmark_groups.items():
            if len(idx) == 0 or np.max(idx) >= N:
                raise AssetError(f"landmark group {name!r} empty or out of range")
        return self


@dataclass(frozen=True)
class AnimationInput:
    """Shape, pose (axis-angle per joint, flat) and expression coefficients."""

    shape: np.ndarray
    pose: np.ndarray
    expression: np.ndarray

    @classmethod
    def identity(cls, model: HeadModel) -> "AnimationInput":
        return cls(
            shape=np.zeros(model.n_shape),
            pose=np.zeros(3 * model.n_joints),
            expression=np.zeros(model.n_expr),
        )

    def with_shape(self, shape) -> "AnimationInput":
        return AnimationInput(np.asarray(shape, dtype=np.float64), self.pose, self.expression)


@dataclass(frozen=True)
class MeshState:
    """Posed mesh: deterministic function of (model, AnimationInput)."""

    posed_vertices: np.ndarray  # (N, 3)
    joint_positions: np.ndarray  # (J, 3)
    anim: AnimationInput


def _check_anim(model: HeadModel, anim: AnimationInput):
    if len(anim.shape) != model.n_shape:
        raise ValueError(f"shape has {len(anim.shape)} coeffs, model expects {model.n_shape}")
    if len(anim.pose) != 3 * model.n_joints:
        raise ValueError(f"pose has {len(anim.pose)} values, model expects {3 * model.n_joints}")
    if len(anim.expression) != model.n_expr:
        raise ValueError(
            f"expression has {len(anim.expression)} coeffs, model expects {model.n_expr}"
        )


def _forward_kinematics(rots, joints, parents):
    """Per-joint global rotation and translation from local rotations.

    Returns (global_rot (J,3,3), global_t (J,3)); the global transform maps
    rest-space points via x -> R x + (t - R j).
    """
    J = len(parents)
    g_rot = np.empty((J, 3, 3))
    g_t = np.empty((J, 3))
    for j in range(J):
        p = parents[j]
        if p < 0:
            g_rot[j] = rots[j]
            g_t[j] = joints[j]
        else:
            g_rot[j] = g_rot[p] @ rots[j]
            g_t[j] = g_t[p] + g_rot[p] @ (joints[j] - joints[p])
    return g_rot, g_t


def pose_mesh(model: HeadModel, anim: AnimationInput) -> MeshState:
    """Pose the model: blendshapes, joint regression, then LBS.

    The skinning blend is applied in displacement form,
    v' = v + sum_j w_ij ((R_j v + o_j) - v), which is the usual weighted
    blend of joint rigid transforms but stays exactly on the template at
    the identity pose even with float-rounded weights.

    Pure and deterministic: identical inputs give bit-identical output.
    """
    _check_anim(model, anim)
    beta = np.asarray(anim.shape, dtype=np.float64)
    psi = np.asarray(anim.expression, dtype=np.float64)
    v_shaped = (
        model.template_vertices
        + model.shape_basis @ beta
        + model.expr_basis @ psi
    )
    joints = model.joint_regressor @ v_shaped
    rots = axis_angle_to_rotmat(np.asarray(anim.pose, dtype=np.float64).reshape(-1, 3))
    g_rot, g_t = _forward_kinematics(rots, joints, model.joint_parents)
    # x -> R_j x + o_j with o_j = t_j - R_j j_j
    offs = g_t - np.einsum("jab,jb->ja", g_rot, joints)
    moved = (
        np.einsum("jab,nb->nja", g_rot, v_shaped) + offs[None, :, :] - v_shaped[:, None, :]
    )
    posed = v_shaped + np.einsum("nj,nja->na", model.lbs_weights, moved)
    return MeshState(posed_vertices=posed, joint_positions=g_t, anim=anim)


def pose_mesh_backward(model: HeadModel, anim: AnimationInput, d_vertices: np.ndarray) -> np.ndarray:
    """Gradient of posed vertices w.r.t. the shape coefficients.

    For a fixed pose the posed mesh is affine in the shape coefficients
    (rotations depend on pose only; joint locations enter translations
    linearly), so this is an exact adjoint, not an approximation.
    """
    _check_anim(model, anim)
    beta = np.asarray(anim.shape, dtype=np.float64)
    psi = np.asarray(anim.expression, dtype=np.float64)
    v_shaped = (
        model.template_vertices + model.shape_basis @ beta + model.expr_basis @ psi
    )
    joints = model.joint_regressor @ v_shaped
    parents = model.joint_parents
    rots = axis_angle_to_rotmat(np.asarray(anim.pose, dtype=np.float64).reshape(-1, 3))
    g_rot, _ = _forward_kinematics(rots, joints, parents)

    W = model.lbs_weights
    # displacement-form blend: dv_shaped gets (1 - sum_j w_ij) d + sum_j w_ij R_j^T d
    d_vshaped = np.einsum("nj,jab,na->nb", W, g_rot, d_vertices)
    d_vshaped += (1.0 - W.sum(axis=1))[:, None] * d_vertices
    # offset term is (t_j - R_j j_j): d t_j = g_j, d j_j -= R_j^T g_j
    g = np.einsum("nj,na->ja", W, d_vertices)
    d_t = g.copy()
    d_joints = -np.einsum("jab,ja->jb", g_rot, g)
    # t recursion adjoint, children before parents
    for j in range(len(parents) - 1, -1, -1):
        p = parents[j]
        if p < 0:
            d_joints[j] += d_t[j]
        else:
            d_t[p] += d_t[j]
            step = g_rot[p].T @ d_t[j]
            d_joints[j] += step
            d_joints[p] -= step
    d_vshaped += model.joint_regressor.T @ d_joints
    return np.einsum("nkb,nk->b", model.shape_basis, d_vshaped)


def landmark_positions(model: HeadModel, state: MeshState) -> dict:
    """Posed 3D polyline per landmark group, vertex order preserved."""
    if not model.landmark_groups:
        raise ValueError("model has no landmark groups")
    return {
        name: state.posed_vertices[idx]
        for name, idx in model.landmark_groups.items()
    }


# ---------------------------------------------------------------------------
# procedural toy head


def _icosphere(subdivisions: int):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        midpoint = {}
        verts_list = list(verts)

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                v = verts_list[a] + verts_list[b]
                verts_list.append(v / np.linalg.norm(v))
                midpoint[key] = len(verts_list) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces.astype(np.int32)


def _ring_group(units, anchor, lo_deg, hi_deg, min_count=3):
    """Vertices whose direction lies within [lo, hi] degrees of anchor,
    ordered by azimuth around the anchor axis (closed ring order)."""
    anchor = anchor / np.linalg.norm(anchor)
    cosang = units @ anchor
    sel = np.where((cosang >= np.cos(np.radians(hi_deg))) & (cosang <= np.cos(np.radians(lo_deg))))[0]
    if len(sel) < min_count:
        sel = np.argsort(-cosang)[:min_count]
    ref = np.cross(anchor, [0.0, 1.0, 0.0])
    if np.linalg.norm(ref) < 1e-6:
        ref = np.cross(anchor, [1.0, 0.0, 0.0])
    ref /= np.linalg.norm(ref)
    ref2 = np.cross(anchor, ref)
    rel = units[sel] - np.outer(cosang[sel], anchor)
    ang = np.arctan2(rel @ ref2, rel @ ref)
    return sel[np.argsort(ang, kind="stable")].astype(np.int32)


def generate_toy_model(seed: int, subdivisions: int = 3, n_shape: int = 8, n_expr: int = 4) -> HeadModel:
    """License-free stand-in head: subdivided icosahedron with 2 joints.

    Deterministic in seed; all float content is rounded to f32 so that a
    save/load round trip through the asset format is exact.
    """
    if subdivisions < 1:
        raise ValueError("subdivisions must be >= 1")
    units, faces = _icosphere(subdivisions)
    # slightly egg-shaped head, facing +z, up +y, ~0.5 m tall
    verts = units * np.array([0.42, 0.52, 0.45])

    rng = np.random.default_rng(seed)

    def smooth_field(n_basis, amplitude, front_bias):
        basis = np.zeros((len(verts), 3, n_basis))
        frontness = 0.5 + 0.5 * units[:, 2]
        for b in range(n_basis):
            for _ in range(3):
                k = rng.uniform(2.0, 6.0, size=3)
                phase = rng.uniform(0.0, 2 * np.pi, size=3)
                amp = rng.normal(0.0, 1.0, size=3)
                wave = np.sin((verts @ k)[:, None] + phase[None, :])  # (N, 3)
                basis[:, :, b] += wave * amp[None, :]
            if front_bias:
                basis[:, :, b] *= frontness[:, None]
        # orthogonalize like a PCA basis, then scale columns so a unit
        # coefficient moves vertices by ~amplitude on average
        flat = basis.reshape(-1, n_basis)
        q, _ = np.linalg.qr(flat)
        rms = np.sqrt(np.mean(np.sum(q.reshape(len(verts), 3, n_basis) ** 2, axis=1), axis=0))
        return (q / rms).reshape(len(verts), 3, n_basis) * amplitude

    shape_basis = smooth_field(n_shape, 0.035, front_bias=False)
    expr_basis = smooth_field(n_expr, 0.02, front_bias=True)

    # joints: neck at the base; jaw hinge between the ears (behind and above
    # the mouth, so opening the jaw swings the chin downward)
    neck_sel = np.argsort(verts[:, 1])[:24]
    ear_l = np.array([-0.97, -0.15, 0.05])
    ear_r = np.array([0.97, -0.15, 0.05])
    jaw_sel = np.concatenate([
        np.argsort(-(units @ (ear_l / np.linalg.norm(ear_l))))[:12],
        np.argsort(-(units @ (ear_r / np.linalg.norm(ear_r))))[:12],
    ])
    joint_regressor = np.zeros((2, len(verts)))
    joint_regressor[0, neck_sel] = 1.0 / len(neck_sel)
    joint_regressor[1, jaw_sel] = 1.0 / len(jaw_sel)
    joint_parents = np.array([-1, 0], dtype=np.int32)

    # jaw weight saturates to exactly 1 inside the chin patch and to 0
    # beyond 40 degrees, leaving the eye regions rigid w.r.t. the jaw
    chin_dir = np.array([0.0, -0.65, 0.70])
    chin_dir /= np.linalg.norm(chin_dir)
    cosang = units @ chin_dir
    c0, c1 = np.cos(np.radians(40.0)), np.cos(np.radians(20.0))
    w = np.clip((cosang - c0) / (c1 - c0), 0.0, 1.0)
    w_jaw = w * w * (3.0 - 2.0 * w)
    lbs_weights = np.stack([1.0 - w_jaw, w_jaw], axis=1)

    groups = {
        "face_boundary": _ring_group(units, np.array([0.0, 0.05, 1.0]), 48.0, 60.0),
        "eyeball_left": _ring_group(units, np.array([-0.34, 0.28, 0.90]), 0.0, 9.0),
        "eyeball_right": _ring_group(units, np.array([0.34, 0.28, 0.90]), 0.0, 9.0),
        "eye_boundary_left": _ring_group(units, np.array([-0.34, 0.28, 0.90]), 9.0, 17.0),
        "eye_boundary_right": _ring_group(units, np.array([0.34, 0.28, 0.90]), 9.0, 17.0),
    }
    mouth_dir = np.array([0.0, -0.30, 0.95])
    mouth_dir /= np.linalg.norm(mouth_dir)
    mouth_sel = np.where(units @ mouth_dir >= np.cos(np.radians(16.0)))[0]
    if len(mouth_sel) < 6:
        mouth_sel = np.argsort(-(units @ mouth_dir))[:6]
    mouth_y = np.median(verts[mouth_sel, 1])
    upper = mouth_sel[verts[mouth_sel, 1] > mouth_y]
    lower = mouth_sel[verts[mouth_sel, 1] <= mouth_y]
    groups["upper_lips"] = upper[np.argsort(verts[upper, 0], kind="stable")].astype(np.int32)
    groups["lower_lips"] = lower[np.argsort(-verts[lower, 0], kind="stable")].astype(np.int32)

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    model = HeadModel(
        template_vertices=f32(verts),
        faces=faces,
        shape_basis=f32(shape_basis),
        expr_basis=f32(expr_basis),
        lbs_weights=f32(lbs_weights),
        joint_regressor=f32(joint_regressor),
        joint_parents=joint_parents,
        landmark_groups=groups,
        variant="toy",
    )
    return model.validate()


# ---------------------------------------------------------------------------
# asset i/o: manifest.json + raw little-endian blobs

_BLOBS = ("template", "shape_basis", "expr_basis", "lbs_weights", "joint_regressor", "faces")


def save_assets(model: HeadModel, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    N, F, J = model.n_vertices, model.n_faces, model.n_joints
    manifest = {
        "format_version": 1,
        "variant": model.variant,
        "n_vertices": N,
        "n_faces": F,
        "n_shape": model.n_shape,
        "n_expr": model.n_expr,
        "n_joints": J,
        "joint_parents": model.joint_parents.tolist(),
        "landmark_groups": {k: np.asarray(v).tolist() for k, v in model.landmark_groups.items()},
        "blobs": {name: f"{name}.bin" for name in _BLOBS},
        "pose_corrective": None,  # reserved
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    arrays = {
        "template": model.template_vertices.astype("<f4"),
        "shape_basis": model.shape_basis.reshape(N * 3, -1).astype("<f4"),
        "expr_basis": model.expr_basis.reshape(N * 3, -1).astype("<f4"),
        "lbs_weights": model.lbs_weights.astype("<f4"),
        "joint_regressor": model.joint_regressor.astype("<f4"),
        "faces": model.faces.astype("<u4"),
    }
    for name, arr in arrays.items():
        (path / manifest["blobs"][name]).write_bytes(np.ascontiguousarray(arr).tobytes())
    return path


def load_assets(path) -> HeadModel:
    path = Path(path)
    mf_path = path / "manifest.json"
    if not mf_path.exists():
        raise AssetError(f"no manifest.json under {path}")
    manifest = json.loads(mf_path.read_text())
    N = manifest["n_vertices"]
    F = manifest["n_faces"]
    B = manifest["n_shape"]
    E = manifest["n_expr"]
    J = manifest["n_joints"]

    shapes = {
        "template": ((N, 3), "<f4"),
        "shape_basis": ((N * 3, B), "<f4"),
        "expr_basis": ((N * 3, E), "<f4"),
        "lbs_weights": ((N, J), "<f4"),
        "joint_regressor": ((J, N), "<f4"),
        "faces": ((F, 3), "<u4"),
    }
    data = {}
    for name, (shape, dtype) in shapes.items():
        blob = path / manifest["blobs"][name]
        if not blob.exists():
            raise AssetError(f"missing blob {blob.name}")
        raw = blob.read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise AssetError(
                f"blob {blob.name}: {len(raw)} bytes, expected {expected} for shape {shape}"
            )
        data[name] = np.frombuffer(raw, dtype=dtype).reshape(shape)

    model = HeadModel(
        template_vertices=data["template"].astype(np.float64),
        faces=data["faces"].astype(np.int32),
        shape_basis=data["shape_basis"].astype(np.float64).reshape(N, 3, B),
        expr_basis=data["expr_basis"].astype(np.float64).reshape(N, 3, E),
        lbs_weights=data["lbs_weights"].astype(np.float64),
        joint_regressor=data["joint_regressor"].astype(np.float64),
        joint_parents=np.asarray(manifest["joint_parents"], dtype=np.int32),
        landmark_groups={
            k: np.asarray(v, dtype=np.int32) for k, v in manifest["landmark_groups"].items()
        },
        variant=manifest.get("variant", "toy"),
    )
    return model.validate()
