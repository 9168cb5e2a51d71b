import numpy as np
import pytest

from conftest import random_quaternions
from oracles import quat_to_matrix, project as oracle_project
from supergauss.scene import (Camera, GaussianSet, InvalidParameterError, covariance, load_ply, project_gaussian,
                              project_gaussians, quaternion_to_rotation, save_group_points, save_ply)


def test_identity_quaternion():
    assert np.array_equal(quaternion_to_rotation([1, 0, 0, 0]), np.eye(3))


def test_quarter_turn_about_z():
    r = quaternion_to_rotation([np.sqrt(0.5), 0, 0, np.sqrt(0.5)])
    assert np.allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_random_rotations_orthonormal(rng):
    r = quaternion_to_rotation(random_quaternions(rng, 200))
    err = np.abs(np.swapaxes(r, 1, 2) @ r - np.eye(3)).max()
    assert err < 1e-12
    assert np.allclose(np.linalg.det(r), 1.0, atol=1e-12)


def test_rotation_matches_textbook_formula(rng):
    for q in random_quaternions(rng, 20):
        assert np.allclose(quaternion_to_rotation(q), quat_to_matrix(q), atol=1e-14)


def test_unnormalized_quaternion_is_renormalized():
    assert np.allclose(quaternion_to_rotation([2, 0, 0, 0]), np.eye(3))


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidParameterError):
        quaternion_to_rotation([0, 0, 0, 0])


def test_covariance_identity_and_axis_aligned():
    assert np.allclose(covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3))
    assert np.allclose(covariance([1, 0, 0, 0], [np.log(2), 0, 0]), np.diag([4, 1, 1]))


def test_covariance_eigenvalues(rng):
    for _ in range(50):
        q = random_quaternions(rng, 1)[0]
        ls = rng.normal(0, 0.5, 3)
        sigma = covariance(q, ls)
        assert np.allclose(sigma, sigma.T, atol=0)
        ev = np.sort(np.linalg.eigvalsh(sigma))
        assert np.allclose(ev, np.sort(np.exp(2 * ls)), rtol=1e-9, atol=1e-12)


def test_covariance_sign_invariant(rng):
    q = random_quaternions(rng, 10)
    ls = rng.normal(size=(10, 3))
    assert np.array_equal(covariance(q, ls), covariance(-q, ls))


def _axis_camera(f=1.0, w=4, h=4):
    return Camera(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1), f, f, w / 2, h / 2, w, h)


def test_projection_on_axis():
    cam = _axis_camera()
    mean, cov, depth = project_gaussian(
        GaussianSet(np.array([[0, 0, 2.0]]), [[1, 0, 0, 0]], [[0, 0, 0]], [[0, 0, 0]], [0.0])[0], cam)
    assert depth == 2.0
    assert np.allclose(mean, [2, 2])
    assert np.allclose(cov, 0.25 * np.eye(2) + 0.3 * np.eye(2))


def test_behind_camera_is_culled():
    g = GaussianSet(np.array([[0, 0, -1.0]]), [[1, 0, 0, 0]], [[0, 0, 0]], [[0, 0, 0]], [0.0])[0]
    assert project_gaussian(g, _axis_camera()) is None


def test_projection_matches_independent_formula(rng):
    cam = Camera.look_at([0.3, -4, 1], [0, 0, 0], [0, 0, 1], 0.9, 40, 30)
    for _ in range(20):
        x = rng.normal(0, 0.5, 3)
        q = random_quaternions(rng, 1)[0]
        ls = rng.normal(-1.5, 0.3, 3)
        p = project_gaussians(x[None], q[None], ls[None], cam)
        m, c, z = oracle_project(x, q, ls, cam.world_to_camera, cam.fx, cam.fy, cam.cx, cam.cy)
        assert np.allclose(p.mean2d[0], m, atol=1e-12)
        assert np.allclose(p.cov2d[0], c, atol=1e-12)
        assert abs(p.depth[0] - z) < 1e-12


def test_cov2d_matches_finite_difference_jacobian(rng):
    cam = Camera.look_at([1, -3, 0.5], [0, 0, 0], [0, 0, 1], 1.0, 32, 32)
    h = 1e-6
    for _ in range(10):
        x = rng.normal(0, 0.4, 3)
        q = random_quaternions(rng, 1)[0]
        ls = rng.normal(-1.5, 0.3, 3)

        def pix(y):
            t = cam.rotation @ y + cam.translation
            return np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])

        jac = np.stack([(pix(x + h * e) - pix(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        expected = jac @ covariance(q, ls) @ jac.T + 0.3 * np.eye(2)
        got = project_gaussians(x[None], q[None], ls[None], cam).cov2d[0]
        assert np.allclose(got, expected, rtol=1e-4, atol=1e-10)


def test_cov2d_floor_and_symmetry(rng):
    cam = Camera.look_at([0, -5, 0], [0, 0, 0], [0, 0, 1], 0.8, 64, 64)
    n = 100
    p = project_gaussians(rng.normal(0, 1, (n, 3)), random_quaternions(rng, n), rng.normal(-4, 2, (n, 3)), cam)
    assert np.array_equal(p.cov2d, np.swapaxes(p.cov2d, 1, 2))
    assert np.all(np.linalg.eigvalsh(p.cov2d) >= 0.3 - 1e-12)


def test_projection_rigid_equivariance(rng):
    cam = Camera.look_at([0.5, -4, 1], [0, 0, 0], [0, 0, 1], 0.9, 48, 48)
    n = 20
    x, q, ls = rng.normal(0, 0.5, (n, 3)), random_quaternions(rng, n), rng.normal(-2, 0.3, (n, 3))
    ref = project_gaussians(x, q, ls, cam)
    r = quat_to_matrix(random_quaternions(rng, 1)[0])
    t = rng.normal(size=3)
    # rotate every Gaussian frame: q' = qr * q
    qr = np.array([np.sqrt(1 + np.trace(r)) / 2, 0, 0, 0])
    qr[1] = (r[2, 1] - r[1, 2]) / (4 * qr[0])
    qr[2] = (r[0, 2] - r[2, 0]) / (4 * qr[0])
    qr[3] = (r[1, 0] - r[0, 1]) / (4 * qr[0])
    w0, v0 = qr[0], qr[1:]
    q2 = np.stack([w0 * q[:, 0] - q[:, 1:] @ v0,
                   *(w0 * q[:, 1:] + q[:, :1] * v0 + np.cross(v0, q[:, 1:])).T], axis=1)
    x2 = x @ r.T + t
    w2 = cam.rotation @ r.T
    cam2 = Camera(np.concatenate([w2, (cam.translation - w2 @ t)[:, None]], axis=1), cam.fx, cam.fy, cam.cx,
                  cam.cy, cam.width, cam.height)
    moved = project_gaussians(x2, q2, ls, cam2)
    assert np.abs(moved.mean2d - ref.mean2d).max() < 1e-10
    assert np.abs(moved.cov2d - ref.cov2d).max() < 1e-10
    assert np.abs(moved.depth - ref.depth).max() < 1e-10


def test_camera_rejects_improper_rotation():
    with pytest.raises(InvalidParameterError):
        Camera(np.concatenate([np.diag([1, 1, -1.0]), np.zeros((3, 1))], axis=1), 1, 1, 0, 0, 2, 2)
    with pytest.raises(InvalidParameterError):
        Camera(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1), -1, 1, 0, 0, 2, 2)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, rng, binary):
    n = 25
    scene = GaussianSet(rng.normal(size=(n, 3)), random_quaternions(rng, n), rng.normal(size=(n, 3)),
                        rng.uniform(size=(n, 3)), rng.normal(size=n), rng.normal(size=(n, 4)),
                        rng.integers(-1, 5, n), np.array([0.1, 0.2, 0.3]))
    path = tmp_path / "s.ply"
    save_ply(path, scene, binary=binary)
    back = load_ply(path)
    for name in ("positions", "rotations", "log_scales", "colors", "opacity_logits", "latents", "background"):
        assert np.array_equal(getattr(back, name), getattr(scene, name)), name
    assert np.array_equal(back.group_ids, scene.group_ids)


def test_group_point_file_is_readable_ply(tmp_path, rng):
    path = tmp_path / "g.ply"
    save_group_points(path, rng.normal(size=(10, 3)), np.arange(10) % 3)
    with open(path, "rb") as fh:
        header = fh.read(400).split(b"end_header")[0].decode()
    assert "element vertex 10" in header and "property uchar red" in header and "property int group_id" in header
    rec = np.frombuffer(open(path, "rb").read().split(b"end_header\n", 1)[1],
                        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1"),
                               ("gid", "<i4")])
    assert rec["gid"].tolist() == [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]


def test_ply_without_latents(tmp_path, rng):
    scene = GaussianSet(rng.normal(size=(4, 3)), random_quaternions(rng, 4), rng.normal(size=(4, 3)),
                        rng.uniform(size=(4, 3)), rng.normal(size=4))
    save_ply(tmp_path / "s.ply", scene)
    back = load_ply(tmp_path / "s.ply")
    assert back.latents.shape == (4, 0)
    assert np.array_equal(back.positions, scene.positions)
