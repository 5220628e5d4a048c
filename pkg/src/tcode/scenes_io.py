"""Synthetic dynamic scenes, an analytic reference renderer, and dataset I/O.

Each built-in scene is a single hard-edged sphere whose center, radius, or
color varies smoothly in t, so density along any ray is piecewise constant.
The reference renderer integrates each stratum's optical depth exactly from
the ray-sphere chord, leaving only the (second-order) color quadrature
error. Datasets serialize as transforms.json plus PNG frames in a layout
that is a superset of the common NeRF synthetic format.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .rendering import Camera, clip_to_aabb, generate_rays

DEFAULT_RING_RADIUS = 1.6
DEFAULT_ELEVATION = 0.3
DEFAULT_ANGLE_X = 0.6911112070083618
SCENE_CENTER = np.array([0.5, 0.5, 0.5])


@dataclass
class OracleScene:
    """Closed-form dynamic scene: one sphere plus a background color."""

    name: str
    sigma0: float
    center_fn: object
    radius_fn: object
    color_fn: object
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    aabb: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))

    def center(self, t):
        return np.asarray(self.center_fn(np.asarray(t, dtype=np.float64)))

    def radius(self, t):
        return np.asarray(self.radius_fn(np.asarray(t, dtype=np.float64)))

    def density(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        c = self.center(t)
        r = self.radius(t)
        inside = ((x - c) ** 2).sum(axis=-1) < r * r
        return np.where(inside, self.sigma0, 0.0)

    def color(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.clip(self.color_fn(x, np.asarray(t, dtype=np.float64)), 0, 1)

    def analytic_occupancy(self, resolution: int, times) -> np.ndarray:
        """Cells whose center sits inside the sphere at any probed time."""
        r = resolution
        idx = (np.arange(r) + 0.5) / r
        gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
        centers = (self.aabb[0] + np.stack([gx, gy, gz], -1).reshape(-1, 3)
                   * (self.aabb[1] - self.aabb[0]))
        occ = np.zeros(centers.shape[0], dtype=bool)
        for t in np.atleast_1d(times):
            occ |= self.density(centers, float(t)) > 0
        return occ


def _pulse_sphere():
    def color(x, t):
        return 0.25 + 0.5 * x

    return OracleScene(
        name="pulse_sphere", sigma0=80.0,
        center_fn=lambda t: SCENE_CENTER + 0 * np.expand_dims(t, -1),
        radius_fn=lambda t: 0.17 + 0.06 * np.sin(2 * np.pi * t),
        color_fn=color)


def _drift_sphere():
    def center(t):
        t = np.expand_dims(t, -1)
        return np.concatenate(
            [0.35 + 0.3 * t, 0.5 + 0 * t, 0.5 + 0 * t], axis=-1)

    def color(x, t):
        return 0.25 + 0.5 * x

    return OracleScene(
        name="drift_sphere", sigma0=80.0, center_fn=center,
        radius_fn=lambda t: 0.16 + 0 * t, color_fn=color)


def _chameleon_sphere():
    warm = np.array([0.85, 0.35, 0.15])
    cold = np.array([0.15, 0.35, 0.85])

    def color(x, t):
        ramp = np.expand_dims(np.asarray(t), -1)
        base = (1 - ramp) * warm + ramp * cold
        return base + 0.25 * (x - 0.5)

    return OracleScene(
        name="chameleon_sphere", sigma0=80.0,
        center_fn=lambda t: SCENE_CENTER + 0 * np.expand_dims(t, -1),
        radius_fn=lambda t: 0.2 + 0 * t, color_fn=color)


SCENES = {
    "pulse_sphere": _pulse_sphere,
    "drift_sphere": _drift_sphere,
    "chameleon_sphere": _chameleon_sphere,
}


def build_scene(name: str) -> OracleScene:
    if name not in SCENES:
        raise ValueError(
            f"unknown scene {name!r}; available: {', '.join(sorted(SCENES))}")
    return SCENES[name]()


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """3x4 camera-to-world pose with -z aimed from eye at target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z, eye])


def ring_pose(angle: float, ring_radius: float = DEFAULT_RING_RADIUS,
              elevation: float = DEFAULT_ELEVATION) -> np.ndarray:
    eye = SCENE_CENTER + np.array([ring_radius * math.sin(angle), elevation,
                                   ring_radius * math.cos(angle)])
    return look_at(eye, SCENE_CENTER)


def make_camera(pose, width: int, height: int,
                angle_x: float = DEFAULT_ANGLE_X, near: float = 0.2,
                far: float = 4.0) -> Camera:
    fx = 0.5 * width / math.tan(0.5 * angle_x)
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, c2w=pose,
                  width=width, height=height, near=near, far=far)


def oracle_render(scene: OracleScene, camera: Camera, t: float,
                  n_samples: int = 1024, chunk: int = 512,
                  return_opacity: bool = False):
    """Ground-truth render via exact per-stratum optical depth."""
    cols, rows = np.meshgrid(np.arange(camera.width),
                             np.arange(camera.height), indexing="xy")
    pixels = np.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5], axis=1)
    out = np.empty((pixels.shape[0], 3), dtype=np.float64)
    opac = np.empty(pixels.shape[0], dtype=np.float64)
    for i in range(0, pixels.shape[0], chunk):
        rays = generate_rays(camera, pixels[i:i + chunk], t)
        out[i:i + chunk], opac[i:i + chunk] = _oracle_render_rays(
            scene, rays, t, n_samples)
    img = out.reshape(camera.height, camera.width, 3).astype(np.float32)
    if return_opacity:
        return img, opac.reshape(camera.height, camera.width)
    return img


def _oracle_render_rays(scene, rays, t, n_samples):
    near, far = clip_to_aabb(rays, scene.aabb)
    live = near < far
    span = np.where(live, far - near, 0.0)
    n_rays = len(rays)

    c = scene.center(float(t)).reshape(3)
    r = float(scene.radius(float(t)))
    oc = rays.origins - c
    b = (rays.dirs * oc).sum(axis=1)
    disc = b * b - ((oc * oc).sum(axis=1) - r * r)
    hit = live & (disc > 0)
    root = np.sqrt(np.maximum(disc, 0.0))
    chord_lo = np.where(hit, np.maximum(-b - root, near), np.inf)
    chord_hi = np.where(hit, np.minimum(-b + root, far), -np.inf)

    edges = near[:, None] + span[:, None] * (
        np.arange(n_samples + 1) / n_samples)
    seg_lo = np.maximum(edges[:, :-1], chord_lo[:, None])
    seg_hi = np.minimum(edges[:, 1:], chord_hi[:, None])
    covered = np.maximum(seg_hi - seg_lo, 0.0)
    depth = scene.sigma0 * covered

    excl = np.cumsum(depth, axis=1) - depth
    trans = np.exp(-excl)
    alpha = -np.expm1(-depth)
    w = trans * alpha

    # select before adding: miss rays carry +inf/-inf segment bounds
    safe_lo = np.where(covered > 0, seg_lo, 0.0)
    safe_hi = np.where(covered > 0, seg_hi, 0.0)
    mid = 0.5 * (safe_lo + safe_hi)
    pts = rays.origins[:, None, :] + mid[..., None] * rays.dirs[:, None, :]
    rgb = scene.color(pts.reshape(-1, 3), t).reshape(n_rays, n_samples, 3)
    img = (w[..., None] * rgb).sum(axis=1)
    opacity = w.sum(axis=1)
    return img + (1 - opacity)[:, None] * scene.background, opacity


def write_png(path: str, img: np.ndarray):
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def generate_dataset(scene: OracleScene, out_dir: str, layout: str,
                     n_cameras: int = 8, n_frames: int = 30,
                     resolution: int = 64, fps: int = 30,
                     oracle_samples: int = 1024) -> dict:
    """Render the scene to PNG frames and write a transforms.json manifest.

    multicam: n fixed ring cameras each film every frame; camera 0 is the
    eval split. mono: one camera orbits, one pose per frame; every 8th
    frame is the eval split.
    """
    if layout not in ("multicam", "mono"):
        raise ValueError(f"unknown layout {layout!r}; use multicam or mono")
    if n_cameras < 1 or n_frames < 1:
        raise ValueError("need n_cameras >= 1 and n_frames >= 1")
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    times = (np.arange(n_frames) / max(n_frames - 1, 1)).tolist()

    records = []
    if layout == "multicam":
        pairs = [(cam, fr) for cam in range(n_cameras)
                 for fr in range(n_frames)]
    else:
        n_cameras = 1
        pairs = [(0, fr) for fr in range(n_frames)]

    for cam, fr in pairs:
        if layout == "multicam":
            angle = 2 * math.pi * cam / n_cameras
            split = "eval" if cam == 0 else "train"
        else:
            angle = 2 * math.pi * fr / n_frames
            split = "eval" if fr % 8 == 0 else "train"
        pose = ring_pose(angle)
        camera = make_camera(pose, resolution, resolution)
        img = oracle_render(scene, camera, times[fr], n_samples=oracle_samples)
        rel = f"frames/c{cam:02d}_f{fr:03d}.png"
        write_png(os.path.join(out_dir, rel), img)
        mat = np.vstack([pose, [0.0, 0.0, 0.0, 1.0]])
        records.append({
            "file_path": rel,
            "transform_matrix": mat.tolist(),
            "time": times[fr],
            "camera": cam,
            "frame": fr,
            "split": split,
        })

    manifest = {
        "camera_angle_x": DEFAULT_ANGLE_X,
        "width": resolution,
        "height": resolution,
        "near": 0.2,
        "far": 4.0,
        "fps": fps,
        "scene": scene.name,
        "layout": layout,
        "n_cameras": n_cameras,
        "n_frames": n_frames,
        "frames": records,
    }
    with open(os.path.join(out_dir, "transforms.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


@dataclass
class Dataset:
    """Decoded dataset: aligned record arrays plus per-record cameras."""

    root: str
    scene_name: str
    layout: str
    width: int
    height: int
    near: float
    far: float
    fps: int
    n_cameras: int
    n_frames: int
    camera_ids: np.ndarray
    frame_ids: np.ndarray
    times: np.ndarray
    poses: np.ndarray
    splits: np.ndarray
    images: np.ndarray
    angle_x: float
    intrinsics: tuple

    def camera_for(self, idx: int) -> Camera:
        fx, fy, cx, cy = self.intrinsics
        return Camera(fx=fx, fy=fy, cx=cx, cy=cy, c2w=self.poses[idx],
                      width=self.width, height=self.height, near=self.near,
                      far=self.far)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def train_videos(self):
        """Per-camera stacked train frames plus record-index maps."""
        videos, id_maps = [], []
        train = self.indices("train")
        for cam in np.unique(self.camera_ids[train]):
            rows = train[self.camera_ids[train] == cam]
            rows = rows[np.argsort(self.frame_ids[rows])]
            videos.append(self.images[rows])
            id_maps.append(rows)
        return videos, id_maps


def load_dataset(path: str) -> Dataset:
    """Parse transforms.json (or a directory containing it) plus frames."""
    root = path
    if os.path.isdir(path):
        manifest_path = os.path.join(path, "transforms.json")
    else:
        manifest_path = path
        root = os.path.dirname(path) or "."
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed manifest JSON {manifest_path}: {e}")

    frames = manifest.get("frames")
    if not frames:
        raise ValueError(f"manifest {manifest_path} lists no frames")
    width = int(manifest.get("width", 0))
    height = int(manifest.get("height", 0))

    images, poses, times, cams, frs, splits = [], [], [], [], [], []
    for rec in frames:
        rel = rec["file_path"]
        img_path = os.path.join(root, rel)
        if not os.path.exists(img_path) and not os.path.splitext(rel)[1]:
            img_path += ".png"
        if not os.path.exists(img_path):
            raise FileNotFoundError(f"missing image file: {img_path}")
        img = read_png(img_path)
        if not width:
            height, width = img.shape[:2]
        if img.shape[:2] != (height, width):
            raise ValueError(
                f"image {img_path} is {img.shape[1]}x{img.shape[0]}, "
                f"expected {width}x{height}")
        images.append(img)
        mat = np.asarray(rec["transform_matrix"], dtype=np.float64)
        poses.append(mat[:3, :4])
        times.append(float(rec.get("time", 0.0)))
        cams.append(int(rec.get("camera", 0)))
        frs.append(int(rec.get("frame", len(frs))))
        splits.append(rec.get("split", "train"))

    times = np.asarray(times)
    lo, hi = times.min(), times.max()
    if hi > lo:
        times = (times - lo) / (hi - lo)
    else:
        times = np.zeros_like(times)

    if "fl_x" in manifest:
        fx = float(manifest["fl_x"])
        fy = float(manifest.get("fl_y", fx))
        cx = float(manifest.get("cx", width / 2.0))
        cy = float(manifest.get("cy", height / 2.0))
        angle_x = 2.0 * math.atan(0.5 * width / fx)
    else:
        angle_x = float(manifest["camera_angle_x"])
        fx = fy = 0.5 * width / math.tan(0.5 * angle_x)
        cx, cy = width / 2.0, height / 2.0

    return Dataset(
        root=root, scene_name=manifest.get("scene", ""),
        layout=manifest.get("layout", "multicam"), width=width, height=height,
        near=float(manifest.get("near", 0.2)),
        far=float(manifest.get("far", 4.0)),
        fps=int(manifest.get("fps", 30)),
        n_cameras=int(manifest.get("n_cameras", len(set(cams)))),
        n_frames=int(manifest.get("n_frames", len(set(frs)))),
        camera_ids=np.asarray(cams), frame_ids=np.asarray(frs), times=times,
        poses=np.asarray(poses), splits=np.asarray(splits),
        images=np.stack(images), angle_x=angle_x,
        intrinsics=(fx, fy, cx, cy))
