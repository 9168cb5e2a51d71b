"""Explicit Gaussian scene representation and its deterministic geometric maps.

Conventions: cameras follow the computer-vision pinhole model (camera looks
down +z, image y grows downwards), pixel ``(u, v)`` has its center at
``(u + 0.5, v + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNASSIGNED = -1
NEAR_PLANE = 1e-4
COV2D_FLOOR = 0.3


class InvalidParameterError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


@dataclass
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity_logit: float
    latent: np.ndarray = field(default_factory=lambda: np.zeros(0))
    group_id: int = UNASSIGNED

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform ``W = [R | t]``."""

    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=float)
        if self.world_to_camera.shape == (4, 4):
            self.world_to_camera = self.world_to_camera[:3]
        if self.world_to_camera.shape != (3, 4):
            raise InvalidParameterError(f"world_to_camera must be 3x4, got {self.world_to_camera.shape}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        rot = self.rotation
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-8) or np.linalg.det(rot) < 0:
            raise InvalidParameterError("rotation part of world_to_camera is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fov_x: float, width: int, height: int) -> "Camera":
        """Camera at ``eye`` looking at ``target``; ``fov_x`` in radians."""
        eye = np.asarray(eye, float)
        forward = np.asarray(target, float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, float))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.concatenate([rot, (-rot @ eye)[:, None]], axis=1)
        f = focal_from_fov(fov_x, width)
        return cls(w2c, f, f, width / 2.0, height / 2.0, width, height)


def focal_from_fov(fov: float, size: int) -> float:
    return (size / 2.0) / np.tan(fov / 2.0)


@dataclass
class GaussianSet:
    """Struct-of-arrays container for N Gaussians."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    latents: np.ndarray | None = None
    group_ids: np.ndarray | None = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, float).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, float).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, float).reshape(n, 3)
        self.colors = np.asarray(self.colors, float).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, float).reshape(n)
        if self.latents is None:
            self.latents = np.zeros((n, 0))
        self.latents = np.asarray(self.latents, float).reshape(n, -1)
        if self.group_ids is None:
            self.group_ids = np.full(n, UNASSIGNED, dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64).reshape(n)
        self.background = np.asarray(self.background, float).reshape(3)
        if not np.all(np.isfinite(self.positions)):
            raise InvalidParameterError("positions must be finite")
        assigned = self.group_ids[self.group_ids != UNASSIGNED]
        if np.any(assigned < 0):
            raise InvalidParameterError("group ids must be UNASSIGNED or non-negative")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.rotations[i].copy(), self.log_scales[i].copy(),
                        self.colors[i].copy(), float(self.opacity_logits[i]), self.latents[i].copy(),
                        int(self.group_ids[i]))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.positions.min(axis=0), self.positions.max(axis=0)

    @property
    def extent(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def subset(self, idx) -> "GaussianSet":
        idx = np.asarray(idx)
        return GaussianSet(self.positions[idx], self.rotations[idx], self.log_scales[idx], self.colors[idx],
                           self.opacity_logits[idx], self.latents[idx], self.group_ids[idx],
                           self.background.copy())

    def copy(self) -> "GaussianSet":
        return self.subset(np.arange(len(self)))

    @classmethod
    def concatenate(cls, sets: list["GaussianSet"]) -> "GaussianSet":
        return cls(*(np.concatenate([getattr(s, name) for s in sets]) for name in
                     ("positions", "rotations", "log_scales", "colors", "opacity_logits", "latents", "group_ids")),
                   background=sets[0].background.copy())


def _as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / norm


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; batched over leading axes."""
    w, x, y, z = np.moveaxis(_as_quat(q), -1, 0)
    r = np.empty(w.shape + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_vjp(q, grad_r) -> np.ndarray:
    """Pull back dL/dR onto the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    # through q / |q|
    return (gn - qn * np.sum(gn * qn, axis=-1, keepdims=True)) / norm


def covariance(q, log_scale) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)); batched."""
    r = quaternion_to_rotation(q)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=float))
    return (r * s2[..., None, :]) @ np.swapaxes(r, -1, -2)


@dataclass
class Projection:
    """Screen-space footprint of a batch of Gaussians under one camera."""

    mean2d: np.ndarray   # (N, 2)
    cov2d: np.ndarray    # (N, 2, 2), floored
    depth: np.ndarray    # (N,) camera-space z
    visible: np.ndarray  # (N,) bool
    cam_points: np.ndarray
    jacobian: np.ndarray  # (N, 2, 3) projective Jacobian J
    cov3d: np.ndarray
    rot: np.ndarray


def project_gaussians(positions, rotations, log_scales, cam: Camera, near: float = NEAR_PLANE,
                      floor: float = COV2D_FLOOR) -> Projection:
    positions = np.asarray(positions, float).reshape(-1, 3)
    rw, tw = cam.rotation, cam.translation
    t = positions @ rw.T + tw
    tz = t[:, 2]
    visible = tz > near
    safe_z = np.where(visible, tz, 1.0)
    tx, ty = t[:, 0], t[:, 1]
    mean2d = np.stack([cam.fx * tx / safe_z + cam.cx, cam.fy * ty / safe_z + cam.cy], axis=1)
    n = len(positions)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / safe_z
    jac[:, 0, 2] = -cam.fx * tx / safe_z ** 2
    jac[:, 1, 1] = cam.fy / safe_z
    jac[:, 1, 2] = -cam.fy * ty / safe_z ** 2
    rot = quaternion_to_rotation(rotations) if n else np.zeros((0, 3, 3))
    s2 = np.exp(2.0 * np.asarray(log_scales, float).reshape(-1, 3))
    cov3d = (rot * s2[:, None, :]) @ np.swapaxes(rot, -1, -2)
    m = jac @ rw
    cov2d = m @ cov3d @ np.swapaxes(m, -1, -2)
    # exact symmetry; the product alone leaves rounding noise off the diagonal
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2)) + floor * np.eye(2)
    return Projection(mean2d, cov2d, tz, visible, t, jac, cov3d, rot)


def project_gaussian(g: Gaussian, cam: Camera, near: float = NEAR_PLANE, floor: float = COV2D_FLOOR):
    """Returns ``(mean2d, cov2d, depth)`` or ``None`` if the Gaussian is culled."""
    p = project_gaussians(g.position[None], g.rotation[None], g.log_scale[None], cam, near, floor)
    if not p.visible[0]:
        return None
    return p.mean2d[0], p.cov2d[0], float(p.depth[0])


def projection_vjp(proj: Projection, log_scales, rotations, cam: Camera, grad_mean2d, grad_cov2d, grad_depth):
    """Chain screen-space gradients back to (position, raw quaternion, log-scale).

    ``grad_cov2d`` is taken w.r.t. the full 2x2 matrix. Culled Gaussians get zero.
    """
    rw = cam.rotation
    t = proj.cam_points
    vis = proj.visible
    z = np.where(vis, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    fx, fy = cam.fx, cam.fy
    g = 0.5 * (grad_cov2d + np.swapaxes(grad_cov2d, -1, -2))
    m = proj.jacobian @ rw
    cov3d = proj.cov3d
    # cov2d = M Sigma M^T
    gsym = g + np.swapaxes(g, -1, -2)
    grad_m = gsym @ m @ cov3d
    grad_sigma = np.swapaxes(m, -1, -2) @ g @ m
    grad_j = grad_m @ rw.T
    grad_t = np.zeros_like(t)
    gu, gv = grad_mean2d[:, 0], grad_mean2d[:, 1]
    grad_t[:, 0] = gu * fx / z + grad_j[:, 0, 2] * (-fx / z ** 2)
    grad_t[:, 1] = gv * fy / z + grad_j[:, 1, 2] * (-fy / z ** 2)
    grad_t[:, 2] = (gu * (-fx * tx / z ** 2) + gv * (-fy * ty / z ** 2)
                    + grad_j[:, 0, 0] * (-fx / z ** 2) + grad_j[:, 1, 1] * (-fy / z ** 2)
                    + grad_j[:, 0, 2] * (2 * fx * tx / z ** 3) + grad_j[:, 1, 2] * (2 * fy * ty / z ** 3)
                    + grad_depth)
    grad_t[~vis] = 0.0
    grad_sigma[~vis] = 0.0
    grad_pos = grad_t @ rw
    # Sigma = R D R^T
    rot = proj.rot
    s2 = np.exp(2.0 * np.asarray(log_scales, float))
    rtgr = np.swapaxes(rot, -1, -2) @ grad_sigma @ rot
    grad_ls = 2.0 * s2 * np.diagonal(rtgr, axis1=-2, axis2=-1)
    gss = grad_sigma + np.swapaxes(grad_sigma, -1, -2)
    grad_rot = (gss @ rot) * s2[:, None, :]
    grad_q = rotation_vjp(rotations, grad_rot) if len(rot) else np.zeros((0, 4))
    return grad_pos, grad_q, grad_ls


# -- point file I/O --------------------------------------------------------

_PLY_FIELDS = ["x", "y", "z", "qw", "qx", "qy", "qz", "s0", "s1", "s2", "r", "g", "b", "opacity_logit"]


def save_ply(path, scene: GaussianSet, binary: bool = True) -> None:
    """Write the scene as a polygon-file point cloud with one vertex per Gaussian."""
    n = len(scene)
    nlat = scene.latents.shape[1]
    names = _PLY_FIELDS + [f"z{i}" for i in range(nlat)]
    values = np.concatenate([scene.positions, scene.rotations, scene.log_scales, scene.colors,
                             scene.opacity_logits[:, None], scene.latents], axis=1)
    dtype = [(name, "<f8") for name in names] + [("group_id", "<i4")]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              "comment background " + " ".join(repr(float(v)) for v in scene.background),
              f"element vertex {n}"]
    header += [f"property double {name}" for name in names] + ["property int group_id", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=dtype)
            for j, name in enumerate(names):
                rec[name] = values[:, j]
            rec["group_id"] = scene.group_ids
            fh.write(rec.tobytes())
        else:
            for row, gid in zip(values, scene.group_ids):
                fh.write((" ".join(repr(float(v)) for v in row) + f" {int(gid)}\n").encode("ascii"))


def load_ply(path) -> GaussianSet:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise InvalidParameterError(f"{path}: not a ply file")
        fmt, n, props, background = None, 0, [], np.zeros(3)
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element" and parts[1] == "vertex":
                n = int(parts[2])
            elif parts[0] == "property":
                props.append((parts[2], parts[1]))
            elif parts[0] == "comment" and len(parts) == 5 and parts[1] == "background":
                background = np.array([float(v) for v in parts[2:]])
        types = {"double": "f8", "float": "f4", "int": "i4", "uchar": "u1", "uint": "u4"}
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, "<" + types[t]) for name, t in props])
            rec = np.frombuffer(fh.read(dtype.itemsize * n), dtype=dtype, count=n)
            cols = {name: rec[name].astype(float) for name, _ in props}
        elif fmt == "ascii":
            data = np.loadtxt(fh, ndmin=2) if n else np.zeros((0, len(props)))
            cols = {name: data[:, j] for j, (name, _) in enumerate(props)}
        else:
            raise InvalidParameterError(f"{path}: unsupported ply format {fmt}")

    def block(names):
        return np.stack([cols[k] for k in names], axis=1) if n and names else np.zeros((n, len(names)))

    nlat = sum(1 for name, _ in props if name.startswith("z") and name[1:].isdigit())
    group_ids = cols["group_id"].astype(np.int64) if "group_id" in cols else None
    return GaussianSet(block(["x", "y", "z"]), block(["qw", "qx", "qy", "qz"]), block(["s0", "s1", "s2"]),
                       block(["r", "g", "b"]), cols["opacity_logit"] if n else np.zeros(0),
                       block([f"z{i}" for i in range(nlat)]), group_ids, background)


def save_group_points(path, positions, group_ids) -> None:
    """Binary point cloud with float xyz, per-group uchar colors and an int group_id for external viewers."""
    positions = np.asarray(positions, float)
    group_ids = np.asarray(group_ids, dtype=np.int64)
    n = len(positions)
    golden = 0.6180339887498949
    hue = np.mod(np.maximum(group_ids, 0) * golden, 1.0)
    rgb = np.stack([0.5 + 0.5 * np.cos(2 * np.pi * (hue + k / 3.0)) for k in range(3)], axis=1)
    rgb[group_ids < 0] = 0.5
    rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"),
                             ("blue", "u1"), ("group_id", "<i4")])
    rec["x"], rec["y"], rec["z"] = positions.T
    rec["red"], rec["green"], rec["blue"] = (np.rint(rgb * 255).astype(np.uint8)).T
    rec["group_id"] = group_ids
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}", "property float x",
              "property float y", "property float z", "property uchar red", "property uchar green",
              "property uchar blue", "property int group_id", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii") + rec.tobytes())
