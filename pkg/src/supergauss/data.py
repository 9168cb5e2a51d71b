"""Datasets: Blender-style camera manifests, image/mask/depth files, and the synthetic cluster scene."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .config import SyntheticSpec
from .rasterizer import render_scene
from .scene import Camera, GaussianSet, focal_from_fov

DEPTH_MAGIC = b"SGDP"
# OpenGL camera axes (x right, y up, z back) to ours (x right, y down, z forward)
_GL_FLIP = np.diag([1.0, -1.0, -1.0, 1.0])
CLUSTER_KINDS = ("linear", "planar", "isotropic")


class DatasetError(IOError):
    """Missing or malformed dataset files; the message carries the path."""


@dataclass
class View:
    name: str
    split: str
    image: np.ndarray                 # (H, W, 3) in [0, 1]
    camera: Camera
    mask: np.ndarray | None = None    # (H, W) bool
    depth: np.ndarray | None = None   # (H, W) reference depth


@dataclass
class Dataset:
    views: list[View]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        sizes = {v.image.shape for v in self.views}
        if len(sizes) > 1:
            raise DatasetError(f"images have inconsistent sizes {sorted(sizes)}")
        if not self.train or not self.eval:
            raise DatasetError("a dataset needs at least one train and one eval view")
        if self.bounds is None:
            centers = np.array([v.camera.center for v in self.views])
            r = 0.5 * float(np.mean(np.linalg.norm(centers, axis=1)))
            self.bounds = (np.full(3, -r), np.full(3, r))

    @property
    def train(self) -> list[View]:
        return [v for v in self.views if v.split == "train"]

    @property
    def eval(self) -> list[View]:
        return [v for v in self.views if v.split == "eval"]

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.views[0].image.shape[:2]
        return w, h

    @property
    def extent(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))


# -- camera conversion -----------------------------------------------------

def camera_from_c2w(c2w, fov_x: float, width: int, height: int, fov_y: float | None = None) -> Camera:
    c2w = np.asarray(c2w, float) @ _GL_FLIP
    rot = c2w[:3, :3].T
    t = -rot @ c2w[:3, 3]
    fx = focal_from_fov(fov_x, width)
    fy = fx if fov_y is None else focal_from_fov(fov_y, height)
    return Camera(np.concatenate([rot, t[:, None]], axis=1), fx, fy, width / 2.0, height / 2.0, width, height)


def c2w_from_camera(cam: Camera) -> np.ndarray:
    c2w = np.eye(4)
    c2w[:3, :3] = cam.rotation.T
    c2w[:3, 3] = cam.center
    return c2w @ _GL_FLIP


def fov_from_focal(f: float, size: int) -> float:
    return 2.0 * np.arctan((size / 2.0) / f)


# -- image, mask and depth files -------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    except (OSError, ValueError) as err:
        raise DatasetError(f"{path}: unreadable image ({err})") from None
    return arr


def write_image(path, image) -> None:
    """PNG or binary PPM by extension; values clipped to [0, 1] and quantized to 8 bits."""
    arr = np.clip(np.rint(np.asarray(image, float) * 255.0), 0, 255).astype(np.uint8)
    if str(path).lower().endswith(".ppm"):
        h, w = arr.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr[..., :3]).tobytes())
        return
    Image.fromarray(arr).save(path)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=float) / 255.0
    except (OSError, ValueError) as err:
        raise DatasetError(f"{path}: unreadable mask ({err})") from None
    return arr >= 0.5


def write_depth(path, depth) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", h, w) + depth.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != DEPTH_MAGIC:
            raise DatasetError(f"{path}: not a depth file")
        h, w = struct.unpack("<II", fh.read(8))
        data = fh.read(4 * h * w)
    if len(data) != 4 * h * w:
        raise DatasetError(f"{path}: truncated depth file")
    return np.frombuffer(data, dtype="<f4").reshape(h, w).astype(float)


def depth_preview(depth, valid=None) -> np.ndarray:
    """Grayscale rendering of a depth map, near = bright, invalid = black."""
    depth = np.asarray(depth, float)
    valid = np.ones(depth.shape, bool) if valid is None else np.asarray(valid, bool)
    out = np.zeros(depth.shape)
    if valid.any():
        lo, hi = depth[valid].min(), depth[valid].max()
        out[valid] = 1.0 - (depth[valid] - lo) / max(hi - lo, 1e-12)
    return np.repeat(out[..., None], 3, axis=2)


# -- manifests -------------------------------------------------------------

_SPLIT_FILES = {"train": "transforms_train.json", "eval": "transforms_test.json"}


def save_dataset(path, dataset: Dataset) -> None:
    os.makedirs(path, exist_ok=True)
    w, h = dataset.image_size
    for split, fname in _SPLIT_FILES.items():
        views = [v for v in dataset.views if v.split == split]
        frames = []
        for v in views:
            rel = f"{split}/{v.name}"
            os.makedirs(os.path.join(path, split), exist_ok=True)
            write_image(os.path.join(path, rel + ".png"), v.image)
            if v.mask is not None:
                os.makedirs(os.path.join(path, "masks", split), exist_ok=True)
                write_image(os.path.join(path, "masks", rel + ".png"), np.repeat(v.mask[..., None], 3, 2) * 1.0)
            if v.depth is not None:
                os.makedirs(os.path.join(path, "depth", split), exist_ok=True)
                write_depth(os.path.join(path, "depth", rel + ".bin"), v.depth)
                write_image(os.path.join(path, "depth", rel + ".png"), depth_preview(v.depth, v.mask))
            frames.append({"file_path": "./" + rel, "transform_matrix": c2w_from_camera(v.camera).tolist(),
                           "fl_x": v.camera.fx, "fl_y": v.camera.fy})
        cam0 = views[0].camera
        manifest = {"camera_angle_x": fov_from_focal(cam0.fx, w), "frames": frames,
                    "background": [float(c) for c in dataset.background],
                    "scene_bounds": [list(map(float, dataset.bounds[0])), list(map(float, dataset.bounds[1]))]}
        with open(os.path.join(path, fname), "w") as fh:
            json.dump(manifest, fh, indent=1)


def load_dataset(path, downscale: int = 1) -> Dataset:
    """Read a Blender-style directory; ``downscale`` shrinks images and intrinsics by an integer factor."""
    views, background, bounds = [], np.zeros(3), None
    aliases = {"train": ["transforms_train.json"], "eval": ["transforms_test.json", "transforms_val.json"]}
    found = False
    for split, names in aliases.items():
        manifest_path = next((os.path.join(path, n) for n in names if os.path.exists(os.path.join(path, n))), None)
        if manifest_path is None:
            continue
        found = True
        try:
            with open(manifest_path) as fh:
                manifest = json.load(fh)
            fov_x = float(manifest["camera_angle_x"])
            frames = manifest["frames"]
        except (OSError, ValueError, KeyError) as err:
            raise DatasetError(f"{manifest_path}: malformed manifest ({err})") from None
        background = np.asarray(manifest.get("background", background), float)
        if "scene_bounds" in manifest:
            bounds = tuple(np.asarray(b, float) for b in manifest["scene_bounds"])
        for frame in frames:
            rel = frame["file_path"].removeprefix("./")
            img_path = os.path.join(path, rel if os.path.splitext(rel)[1] else rel + ".png")
            if not os.path.exists(img_path):
                raise DatasetError(f"{img_path}: image not found")
            image = read_image(img_path)
            h, w = image.shape[:2]
            stem = os.path.splitext(rel)[0]
            mask_path = os.path.join(path, "masks", stem + ".png")
            depth_path = os.path.join(path, "depth", stem + ".bin")
            mask = read_mask(mask_path) if os.path.exists(mask_path) else None
            depth = read_depth(depth_path) if os.path.exists(depth_path) else None
            cam = camera_from_c2w(frame["transform_matrix"], fov_x, w, h)
            if "fl_x" in frame:
                cam = Camera(cam.world_to_camera, float(frame["fl_x"]), float(frame.get("fl_y", frame["fl_x"])),
                             cam.cx, cam.cy, w, h)
            if downscale > 1:
                image, mask, depth, cam = _downscale(image, mask, depth, cam, downscale)
            views.append(View(os.path.basename(stem), split, image, cam, mask, depth))
    if not found:
        raise DatasetError(f"{path}: no transforms_train.json / transforms_test.json manifest")
    return Dataset(views, background, bounds)


def _downscale(image, mask, depth, cam: Camera, f: int):
    h, w = image.shape[0] // f, image.shape[1] // f

    def pool(a):
        return a[:h * f, :w * f].reshape(h, f, w, f, *a.shape[2:]).mean(axis=(1, 3))

    cam = Camera(cam.world_to_camera, cam.fx / f, cam.fy / f, cam.cx / f, cam.cy / f, w, h)
    return (pool(image), None if mask is None else pool(mask.astype(float)) >= 0.5,
            None if depth is None else pool(depth), cam)


# -- synthetic scene -------------------------------------------------------

_CLUSTER_COLORS = np.array([[0.85, 0.25, 0.20], [0.20, 0.75, 0.30], [0.25, 0.35, 0.90],
                            [0.90, 0.80, 0.20], [0.70, 0.30, 0.80], [0.20, 0.80, 0.80]])


def _axis_quaternion(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def _cluster(kind: str, n: int, center, color, rng):
    if kind == "linear":         # vertical rod of elongated Gaussians
        t = np.linspace(-0.6, 0.6, n)
        pos = np.stack([rng.normal(0, 0.01, n), rng.normal(0, 0.01, n), t], axis=1)
        log_scales = np.tile(np.log([0.025, 0.025, 0.07]), (n, 1))
    elif kind == "planar":       # horizontal disc of flattened Gaussians
        r = 0.55 * np.sqrt(rng.uniform(0, 1, n))
        phi = rng.uniform(0, 2 * np.pi, n)
        pos = np.stack([r * np.cos(phi), r * np.sin(phi), rng.normal(0, 0.005, n)], axis=1)
        log_scales = np.tile(np.log([0.07, 0.07, 0.012]), (n, 1))
    else:                        # filled ball
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pos = d * 0.35 * np.cbrt(rng.uniform(0, 1, n))[:, None]
        log_scales = np.tile(np.log([0.05, 0.05, 0.05]), (n, 1))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    if kind == "isotropic":
        rot = np.array([_axis_quaternion(rng.normal(size=3), rng.uniform(0, np.pi)) for _ in range(n)])
    colors = np.clip(color + rng.normal(0, 0.03, (n, 3)), 0.02, 0.98)
    return pos + center, rot, log_scales, colors


def ring_cameras(n: int, radius: float, elevation: float, fov: float, size: int, offset: float = 0.0):
    cams = []
    for k in range(n):
        az = offset + 2 * np.pi * k / n
        eye = radius * np.array([np.cos(az) * np.cos(elevation), np.sin(az) * np.cos(elevation), np.sin(elevation)])
        cams.append(Camera.look_at(eye, np.zeros(3), [0.0, 0.0, 1.0], fov, size, size))
    return cams


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int | None = None):
    """Render a clustered ground-truth scene from a camera ring.

    Returns ``(dataset, gt_scene)``; ``gt_scene.group_ids`` holds the generator's cluster labels.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    parts = []
    for c in range(spec.clusters):
        ang = 2 * np.pi * c / spec.clusters
        center = 0.8 * np.array([np.cos(ang), np.sin(ang), 0.0]) if spec.clusters > 1 else np.zeros(3)
        parts.append(_cluster(CLUSTER_KINDS[c % 3], spec.per_cluster, center,
                              _CLUSTER_COLORS[c % len(_CLUSTER_COLORS)], rng))
    pos, rot, ls, col = (np.concatenate([p[j] for p in parts]) for j in range(4))
    n = len(pos)
    labels = np.repeat(np.arange(spec.clusters), spec.per_cluster)
    gt = GaussianSet(pos, rot, ls, col, np.full(n, 2.5), None, labels)
    fov = np.radians(spec.fov_deg)
    elev = np.radians(spec.elevation_deg)
    train_cams = ring_cameras(spec.train_views, spec.ring_radius, elev, fov, spec.image_size, 0.3)
    eval_cams = ring_cameras(spec.eval_views, spec.ring_radius, elev, fov, spec.image_size,
                             0.3 + np.pi / max(spec.train_views, 1) + 0.4)
    views = []
    for split, cams in (("train", train_cams), ("eval", eval_cams)):
        for k, cam in enumerate(cams):
            out = render_scene(gt, cam)
            views.append(View(f"r_{k}", split, out.color, cam, out.alpha > 0.5, out.depth))
    lo, hi = gt.bounds
    pad = 0.1 * (hi - lo)
    return Dataset(views, gt.background.copy(), (lo - pad, hi + pad)), gt


def initial_scene(dataset: Dataset, n: int, rng: np.random.Generator, anchor: GaussianSet | None = None,
                  noise: float = 0.02, floaters: int = 0, latent_dim: int = 16) -> GaussianSet:
    """Starting point for optimization with all appearance information discarded.

    Centers come from ``anchor`` (jittered by ``noise`` times the scene extent, a stand-in
    for structure-from-motion points) or uniformly from the dataset bounds. ``floaters``
    adds spurious Gaussians scattered through the bounds.
    """
    lo, hi = (np.asarray(b, float) for b in dataset.bounds)
    extent = dataset.extent
    if anchor is not None:
        pos = anchor.positions + rng.normal(0, noise * extent, anchor.positions.shape)
    else:
        pos = rng.uniform(lo, hi, (n, 3))
    if floaters:
        pos = np.concatenate([pos, rng.uniform(lo, hi, (floaters, 3))])
    m = len(pos)
    d, _ = cKDTree(pos).query(pos, k=min(4, m))
    spacing = np.mean(d[:, 1:], axis=1) if m > 1 else np.full(m, 0.01 * extent)
    log_scales = np.repeat(np.log(np.maximum(spacing, 1e-4 * extent))[:, None], 3, axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (m, 1))
    colors = np.full((m, 3), 0.5)
    opacity_logits = np.full(m, np.log(0.1 / 0.9))
    latents = rng.normal(0, 0.01, (m, latent_dim))
    return GaussianSet(pos, rotations, log_scales, colors, opacity_logits, latents, None, dataset.background.copy())


def cluster_purity(labels, assignment) -> float:
    """Fraction of points whose group's majority label matches their own."""
    labels, assignment = np.asarray(labels), np.asarray(assignment)
    hits = 0
    for g in np.unique(assignment):
        hits += np.bincount(labels[assignment == g]).max()
    return hits / len(labels)
