import numpy as np
import pytest

from headsplat.head_model import (
    AnimationInput,
    AssetError,
    HeadModel,
    generate_toy_model,
    landmark_positions,
    load_assets,
    pose_mesh,
    pose_mesh_backward,
    save_assets,
)
from headsplat.rotations import axis_angle_to_rotmat

from oracles import rel_error

FIELDS = (
    "template_vertices", "faces", "shape_basis", "expr_basis",
    "lbs_weights", "joint_regressor", "joint_parents",
)


def test_toy_model_counts():
    m = generate_toy_model(seed=7, subdivisions=3)
    assert m.n_vertices == 642  # 10 * 4^s + 2
    assert m.n_faces == 1280
    assert m.n_joints == 2


def test_toy_model_deterministic():
    a = generate_toy_model(seed=7, subdivisions=2)
    b = generate_toy_model(seed=7, subdivisions=2)
    for f in FIELDS:
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_toy_model_seed_changes_bases():
    a = generate_toy_model(seed=7, subdivisions=2)
    b = generate_toy_model(seed=8, subdivisions=2)
    assert np.abs(a.shape_basis - b.shape_basis).max() > 0
    assert np.abs(a.expr_basis - b.expr_basis).max() > 0


def test_toy_model_subdivisions_precondition():
    with pytest.raises(ValueError):
        generate_toy_model(seed=7, subdivisions=0)


def test_asset_roundtrip_field_by_field(toy_model, tmp_path):
    save_assets(toy_model, tmp_path / "assets")
    loaded = load_assets(tmp_path / "assets")
    assert loaded.n_vertices == 642
    assert loaded.n_joints == 2
    for f in FIELDS:
        assert np.array_equal(getattr(toy_model, f), getattr(loaded, f)), f
    for name, idx in toy_model.landmark_groups.items():
        assert np.array_equal(idx, loaded.landmark_groups[name])
    assert toy_model.content_hash() == loaded.content_hash()


def test_load_rejects_wrong_blob_size(toy_model, tmp_path):
    d = save_assets(toy_model, tmp_path / "assets")
    blob = d / "shape_basis.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(AssetError, match="expected"):
        load_assets(d)


def test_load_rejects_missing_blob(toy_model, tmp_path):
    d = save_assets(toy_model, tmp_path / "assets")
    (d / "faces.bin").unlink()
    with pytest.raises(AssetError, match="missing blob"):
        load_assets(d)


def test_load_rejects_unnormalized_lbs_row(toy_model, tmp_path):
    d = save_assets(toy_model, tmp_path / "assets")
    w = toy_model.lbs_weights.copy()
    w[17] *= 0.9
    (d / "lbs_weights.bin").write_bytes(w.astype("<f4").tobytes())
    with pytest.raises(AssetError, match="row 17"):
        load_assets(d)


def test_pose_identity_is_template_exactly(toy_model):
    state = pose_mesh(toy_model, AnimationInput.identity(toy_model))
    assert np.array_equal(state.posed_vertices, toy_model.template_vertices)


def test_pose_unit_shape_adds_basis_column(toy_model):
    anim = AnimationInput.identity(toy_model)
    beta = np.zeros(toy_model.n_shape)
    beta[0] = 1.0
    state = pose_mesh(toy_model, AnimationInput(beta, anim.pose, anim.expression))
    expected = toy_model.template_vertices + toy_model.shape_basis[:, :, 0]
    assert np.abs(state.posed_vertices - expected).max() < 1e-12


def test_blendshape_linearity(toy_model, rng):
    b1 = rng.normal(size=toy_model.n_shape)
    b2 = rng.normal(size=toy_model.n_shape)
    zeros = AnimationInput.identity(toy_model)

    def disp(beta):
        s = pose_mesh(toy_model, AnimationInput(beta, zeros.pose, zeros.expression))
        return s.posed_vertices - toy_model.template_vertices

    lhs = disp(b1 + b2)
    rhs = disp(b1) + disp(b2)
    scale = max(np.abs(lhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() / scale < 1e-12


def test_jaw_rotation_is_rigid_for_full_weight_vertices(toy_model):
    full = np.where(toy_model.lbs_weights[:, 1] == 1.0)[0]
    assert len(full) > 0
    angle = 0.3
    pose = np.zeros(6)
    pose[3] = angle  # jaw joint, x axis
    state = pose_mesh(toy_model, AnimationInput(np.zeros(8), pose, np.zeros(4)))
    # brute-force rigid transform about the jaw joint
    joints = toy_model.joint_regressor @ toy_model.template_vertices
    R = axis_angle_to_rotmat(np.array([angle, 0.0, 0.0]))
    expected = (toy_model.template_vertices[full] - joints[1]) @ R.T + joints[1]
    assert np.abs(state.posed_vertices[full] - expected).max() < 1e-9


def test_pose_deterministic_bitwise(toy_model, rng):
    anim = AnimationInput(
        rng.normal(size=8) * 0.3, rng.normal(size=6) * 0.3, rng.normal(size=4)
    )
    a = pose_mesh(toy_model, anim)
    b = pose_mesh(toy_model, anim)
    assert np.array_equal(a.posed_vertices, b.posed_vertices)
    assert np.array_equal(a.joint_positions, b.joint_positions)


def test_pose_dimension_mismatch(toy_model):
    with pytest.raises(ValueError, match="pose"):
        pose_mesh(toy_model, AnimationInput(np.zeros(8), np.zeros(12), np.zeros(4)))
    with pytest.raises(ValueError, match="shape"):
        pose_mesh(toy_model, AnimationInput(np.zeros(3), np.zeros(6), np.zeros(4)))


def test_landmarks_identity_gather(toy_model):
    state = pose_mesh(toy_model, AnimationInput.identity(toy_model))
    groups = landmark_positions(toy_model, state)
    assert set(groups) == set(toy_model.landmark_groups)
    for name, idx in toy_model.landmark_groups.items():
        assert np.array_equal(groups[name], toy_model.template_vertices[idx])


def test_landmarks_jaw_open_moves_lips_not_eyes(toy_model):
    idle = pose_mesh(toy_model, AnimationInput.identity(toy_model))
    pose = np.zeros(6)
    pose[3] = 0.35
    open_jaw = pose_mesh(toy_model, AnimationInput(np.zeros(8), pose, np.zeros(4)))
    lm0 = landmark_positions(toy_model, idle)
    lm1 = landmark_positions(toy_model, open_jaw)
    assert np.linalg.norm(lm1["lower_lips"] - lm0["lower_lips"]) > 1e-3
    for eye in ("eyeball_left", "eyeball_right", "eye_boundary_left", "eye_boundary_right"):
        assert np.array_equal(lm1[eye], lm0[eye])


def test_landmarks_zero_expression_identical(toy_model):
    zero = AnimationInput.identity(toy_model)
    explicit = AnimationInput(zero.shape, zero.pose, np.zeros(toy_model.n_expr))
    a = landmark_positions(toy_model, pose_mesh(toy_model, zero))
    b = landmark_positions(toy_model, pose_mesh(toy_model, explicit))
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_beta_gradient_matches_fd(small_model, rng):
    anim = AnimationInput(
        rng.normal(size=small_model.n_shape) * 0.3,
        rng.normal(size=3 * small_model.n_joints) * 0.3,
        rng.normal(size=small_model.n_expr) * 0.3,
    )
    d_v = rng.normal(size=(small_model.n_vertices, 3))
    grad = pose_mesh_backward(small_model, anim, d_v)
    h = 1e-6
    fd = np.zeros_like(grad)
    for i in range(len(fd)):
        for sign in (1, -1):
            beta = np.asarray(anim.shape).copy()
            beta[i] += sign * h
            v = pose_mesh(
                small_model, AnimationInput(beta, anim.pose, anim.expression)
            ).posed_vertices
            fd[i] += sign * (v * d_v).sum() / (2 * h)
    assert rel_error(grad, fd) < 1e-6


def test_flame_variant_dimension_enforcement(toy_model):
    bad = HeadModel(
        template_vertices=toy_model.template_vertices,
        faces=toy_model.faces,
        shape_basis=toy_model.shape_basis,
        expr_basis=toy_model.expr_basis,
        lbs_weights=toy_model.lbs_weights,
        joint_regressor=toy_model.joint_regressor,
        joint_parents=toy_model.joint_parents,
        landmark_groups=toy_model.landmark_groups,
        variant="flame",
    )
    with pytest.raises(AssetError, match="flame-variant"):
        bad.validate()
