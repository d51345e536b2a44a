import numpy as np

from headsplat.rotations import (
    axis_angle_to_rotmat,
    quat_to_rotmat,
    quat_to_rotmat_backward,
)

from oracles import finite_difference, rel_error


def test_quat_identity():
    R = quat_to_rotmat(np.array([1.0, 0, 0, 0]))
    assert np.allclose(R, np.eye(3))


def test_quat_rotmat_orthonormal(rng):
    q = rng.normal(size=(50, 4))
    R = quat_to_rotmat(q)
    eye = np.einsum("pji,pjk->pik", R, R)
    assert np.abs(eye - np.eye(3)).max() < 1e-12
    assert np.abs(np.linalg.det(R) - 1.0).max() < 1e-12


def test_quat_backward_matches_fd(rng):
    q = rng.normal(size=(5, 4))
    d_R = rng.normal(size=(5, 3, 3))
    d_q = quat_to_rotmat_backward(q, d_R)
    (fd,) = finite_difference(lambda: (quat_to_rotmat(q) * d_R).sum(), [q], h=1e-6)
    assert rel_error(d_q, fd) < 1e-7


def test_axis_angle_small_and_exact(rng):
    assert np.allclose(axis_angle_to_rotmat(np.zeros(3)), np.eye(3))
    # quarter turn about z
    R = axis_angle_to_rotmat(np.array([0.0, 0.0, np.pi / 2]))
    assert np.allclose(R @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)
    # tiny angles stay orthonormal via the series path
    aa = rng.normal(size=(20, 3)) * 1e-10
    R = axis_angle_to_rotmat(aa)
    eye = np.einsum("pji,pjk->pik", R, R)
    assert np.abs(eye - np.eye(3)).max() < 1e-12
