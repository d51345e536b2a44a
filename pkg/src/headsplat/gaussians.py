"""The bound Gaussian cloud: initialization, densification, checkpoints.

Per-point parameters are stored pre-activation (exp for scaling, sigmoid
for opacity and color) so optimizer steps can never produce an invalid
scale or opacity. Every point carries the index of the mesh triangle it is
rigged to; densification children inherit that binding.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .binding import TriangleFrames, deform_gaussian, invert_deform
from .head_model import AnimationInput, HeadModel, pose_mesh
from . import binding as _binding

log = logging.getLogger(__name__)

# deterministic symmetric barycentric lattices ("evenly distributed")
_ORBITS = {
    1: [(1 / 3, 1 / 3, 1 / 3)],
    3: [(2 / 3, 1 / 6, 1 / 6)],
    4: [(1 / 2, 1 / 4, 1 / 4), (1 / 3, 1 / 3, 1 / 3)],
    6: [(1 / 2, 1 / 3, 1 / 6)],
    10: [(4 / 6, 1 / 6, 1 / 6), (3 / 6, 2 / 6, 1 / 6), (2 / 6, 2 / 6, 2 / 6)],
    15: [(5 / 7, 1 / 7, 1 / 7), (4 / 7, 2 / 7, 1 / 7), (3 / 7, 3 / 7, 1 / 7),
         (3 / 7, 2 / 7, 2 / 7)],
}


def _expand_orbit(coords):
    seen, out = set(), []
    a, b, c = coords
    for p in ((a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)):
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


BARYCENTRIC_LATTICES = {
    k: np.array([p for orbit in orbits for p in _expand_orbit(orbit)])
    for k, orbits in _ORBITS.items()
}
assert all(len(v) == k for k, v in BARYCENTRIC_LATTICES.items())


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class BoundCloud:
    """Structure-of-arrays Gaussian cloud rigged to mesh triangles."""

    positions: np.ndarray      # (P, 3) local mu
    log_scalings: np.ndarray   # (P, 3)
    rotations: np.ndarray      # (P, 4) raw quaternions
    color_logits: np.ndarray   # (P, 3)
    opacity_logits: np.ndarray  # (P,)
    bindings: np.ndarray       # (P,) int32 face ids
    beta: np.ndarray           # (n_shape,) learned model shape
    generations: np.ndarray = None  # (P,) int32 densify round of creation
    grad_accum: np.ndarray = None   # (P,) summed view-space grad norms
    grad_count: np.ndarray = None   # (P,) number of accumulated renders

    def __post_init__(self):
        P = len(self.positions)
        if self.generations is None:
            self.generations = np.zeros(P, dtype=np.int32)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(P)
        if self.grad_count is None:
            self.grad_count = np.zeros(P, dtype=np.int64)

    def __len__(self):
        return len(self.positions)

    @property
    def scalings(self):
        return np.exp(self.log_scalings)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def colors(self):
        return sigmoid(self.color_logits)

    def validate(self, n_faces):
        if len(self) == 0:
            raise ValueError("empty cloud")
        if self.bindings.min() < 0 or self.bindings.max() >= n_faces:
            raise ValueError("binding out of range")
        for name in ("positions", "log_scalings", "opacity_logits"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        return self

    def reset_grad_stats(self):
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self), dtype=np.int64)

    def accumulate_grad_stats(self, indices, screen_grad_norms):
        np.add.at(self.grad_accum, indices, screen_grad_norms)
        np.add.at(self.grad_count, indices, 1)


def init_cloud(
    model: HeadModel,
    anim: AnimationInput,
    k: int = 10,
    knn_k: int = None,
    scale_mode: str = "sqrt",
) -> BoundCloud:
    """Super-dense initialization: k lattice points per triangle.

    World positions are sampled on the posed (standard-pose) mesh, the
    isotropic world scale per point is the k-nearest-neighbor mean distance
    (sqrt by default, "linear" keeps the distance itself), and local
    parameters come from inverting the rigging transform with the
    standard-pose frames. Opacity activates to 0.1 and color to mid-gray.
    """
    if k not in BARYCENTRIC_LATTICES:
        raise ValueError(
            f"k={k} has no lattice table; supported: {sorted(BARYCENTRIC_LATTICES)}"
        )
    if scale_mode not in ("sqrt", "linear"):
        raise ValueError(f"unknown scale_mode {scale_mode!r}")
    knn_k = k if knn_k is None else knn_k
    state = pose_mesh(model, anim)
    frames = triangle_frames_for(state, model)

    bary = BARYCENTRIC_LATTICES[k]  # (k, 3)
    tri = state.posed_vertices[model.faces]  # (F, 3, 3)
    pts = np.einsum("kc,fcd->fkd", bary, tri).reshape(-1, 3)  # (F*k, 3)
    bindings = np.repeat(np.arange(model.n_faces, dtype=np.int32), k)

    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=min(knn_k + 1, len(pts)))
    mean_dist = dist[:, 1:].mean(axis=1)
    s_world = np.sqrt(mean_dist) if scale_mode == "sqrt" else mean_dist
    s_world = np.repeat(s_world[:, None], 3, axis=1)

    eye = np.broadcast_to(np.eye(3), (len(pts), 3, 3))
    mu, s, _ = invert_deform(pts, s_world, eye, frames, bindings)
    return BoundCloud(
        positions=mu,
        log_scalings=np.log(s),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (len(pts), 1)),
        color_logits=np.full((len(pts), 3), logit(0.5)),
        opacity_logits=np.full(len(pts), logit(0.1)),
        bindings=bindings,
        beta=np.asarray(anim.shape, dtype=np.float64).copy(),
    ).validate(model.n_faces)


def triangle_frames_for(state, model: HeadModel, prev=None, tau_mode="center_to_vertex"):
    return _binding.triangle_frames(
        state.posed_vertices, model.faces, tau_mode=tau_mode, prev=prev
    )


@dataclass
class DensifyConfig:
    start_iter: int = 500
    end_iter: int = 5000
    interval: int = 500
    normalized_grad_threshold: float = 2.0
    opacity_prune_threshold: float = 0.005
    max_points: int = 300_000
    split_scale_factor: float = 1.6
    # world-space scale above which a selected point splits instead of cloning
    split_size_threshold: float = 0.02

    def validate(self):
        if self.start_iter >= self.end_iter:
            raise ValueError("densify start_iter must be < end_iter")
        if self.normalized_grad_threshold <= 0 or self.opacity_prune_threshold <= 0:
            raise ValueError("densify thresholds must be positive")
        return self

    def due(self, iteration):
        return (
            self.start_iter <= iteration <= self.end_iter
            and (iteration - self.start_iter) % self.interval == 0
        )


@dataclass
class DensifyStats:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    skipped: bool = False
    keep_mask: np.ndarray = None  # over the pre-call points
    n_added: int = 0


def densify_and_prune(
    cloud: BoundCloud, frames: TriangleFrames, cfg: DensifyConfig, iteration: int, rng
) -> DensifyStats:
    """Clone/split high-gradient points, prune transparent ones, in place.

    Selection uses gradient norms normalized by their population mean, so
    it is invariant to a global rescaling of the guidance signal. Children
    inherit the parent's triangle binding. Exceeding max_points skips the
    densification half with a warning; pruning still runs.
    """
    if not cfg.due(iteration):
        raise ValueError(f"iteration {iteration} is not on the densification schedule")
    P = len(cloud)
    counts = np.maximum(cloud.grad_count, 1)
    mean_grads = cloud.grad_accum / counts
    pop_mean = mean_grads.mean()
    if pop_mean > 0:
        selected = (mean_grads / pop_mean) > cfg.normalized_grad_threshold
    else:
        selected = np.zeros(P, dtype=bool)

    world_scale = np.sqrt(frames.areas[cloud.bindings])[:, None] * cloud.scalings
    big = world_scale.max(axis=1) > cfg.split_size_threshold
    split_mask = selected & big
    clone_mask = selected & ~big

    n_new = int(clone_mask.sum()) + 2 * int(split_mask.sum())
    stats = DensifyStats()
    if n_new > 0 and P + n_new - int(split_mask.sum()) > cfg.max_points:
        log.warning(
            "densification skipped at iter %d: %d + %d new points would exceed max_points=%d",
            iteration, P, n_new, cfg.max_points,
        )
        stats.skipped = True
        split_mask = np.zeros(P, dtype=bool)
        clone_mask = np.zeros(P, dtype=bool)

    keep = sigmoid(cloud.opacity_logits) >= cfg.opacity_prune_threshold
    keep &= ~split_mask  # split parents are replaced by their children
    stats.pruned = int((~keep).sum() - split_mask.sum())
    stats.cloned = int(clone_mask.sum())
    stats.split = int(split_mask.sum())
    stats.keep_mask = keep

    pieces = {name: [getattr(cloud, name)[keep]] for name in _PER_POINT_FIELDS}
    gen = cloud.generations.max() + 1 if (stats.cloned or stats.split) else None

    if stats.cloned:
        for name in _PER_POINT_FIELDS:
            pieces[name].append(getattr(cloud, name)[clone_mask])
        pieces["generations"][-1] = np.full(stats.cloned, gen, dtype=np.int32)
    if stats.split:
        rot = _binding.quat_to_rotmat(cloud.rotations[split_mask])
        scal = cloud.scalings[split_mask]
        for _ in range(2):
            eps = rng.standard_normal((stats.split, 3))
            child_pos = cloud.positions[split_mask] + np.einsum(
                "pab,pb->pa", rot, scal * eps
            )
            pieces["positions"].append(child_pos)
            pieces["log_scalings"].append(
                cloud.log_scalings[split_mask] - np.log(cfg.split_scale_factor)
            )
            for name in ("rotations", "color_logits", "opacity_logits", "bindings"):
                pieces[name].append(getattr(cloud, name)[split_mask])
            pieces["generations"].append(np.full(stats.split, gen, dtype=np.int32))

    for name in _PER_POINT_FIELDS:
        setattr(cloud, name, np.concatenate(pieces[name]))
    stats.n_added = len(cloud) - int(keep.sum())
    cloud.reset_grad_stats()
    return stats


_PER_POINT_FIELDS = (
    "positions", "log_scalings", "rotations", "color_logits",
    "opacity_logits", "bindings", "generations",
)


# ---------------------------------------------------------------------------
# checkpoint format: AHGS header + fixed-size little-endian records

CHECKPOINT_MAGIC = b"AHGS"
CHECKPOINT_VERSION = 1
_RECORD_DTYPE = np.dtype(
    [
        ("position", "<f8", (3,)),
        ("log_scaling", "<f8", (3,)),
        ("quaternion", "<f8", (4,)),
        ("color", "<f8", (3,)),
        ("opacity", "<f8"),
        ("binding", "<u4"),
    ]
)
RECORD_SIZE = _RECORD_DTYPE.itemsize  # 108 bytes


class CheckpointError(ValueError):
    pass


def checkpoint_header_size(n_beta: int) -> int:
    return 4 + 4 + 8 + 4 + 8 * n_beta + 32


def save_checkpoint(cloud: BoundCloud, path, model_hash: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(model_hash) != 32:
        raise ValueError("model hash must be 32 bytes")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQI", CHECKPOINT_VERSION, len(cloud), len(cloud.beta)))
        f.write(cloud.beta.astype("<f8").tobytes())
        f.write(model_hash)
        rec = np.empty(len(cloud), dtype=_RECORD_DTYPE)
        rec["position"] = cloud.positions
        rec["log_scaling"] = cloud.log_scalings
        rec["quaternion"] = cloud.rotations
        rec["color"] = cloud.color_logits
        rec["opacity"] = cloud.opacity_logits
        rec["binding"] = cloud.bindings
        f.write(rec.tobytes())
    return path


def load_checkpoint(path, expected_model_hash: bytes = None):
    """Returns (cloud, model_hash). Raises CheckpointError on bad files."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count, n_beta = struct.unpack_from("<IQI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {version} "
            f"(binding-aware v{CHECKPOINT_VERSION} required)"
        )
    header = checkpoint_header_size(n_beta)
    beta = np.frombuffer(raw, dtype="<f8", count=n_beta, offset=20).copy()
    model_hash = raw[header - 32 : header]
    expected = header + count * RECORD_SIZE
    if len(raw) != expected:
        raise CheckpointError(f"{path}: {len(raw)} bytes, expected {expected} (corrupt)")
    rec = np.frombuffer(raw, dtype=_RECORD_DTYPE, count=count, offset=header)
    cloud = BoundCloud(
        positions=rec["position"].astype(np.float64),
        log_scalings=rec["log_scaling"].astype(np.float64),
        rotations=rec["quaternion"].astype(np.float64),
        color_logits=rec["color"].astype(np.float64),
        opacity_logits=rec["opacity"].astype(np.float64),
        bindings=rec["binding"].astype(np.int32),
        beta=beta,
    )
    if expected_model_hash is not None and model_hash != expected_model_hash:
        raise CheckpointError(f"{path}: checkpoint was trained against a different model asset")
    return cloud, model_hash
