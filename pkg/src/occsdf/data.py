"""Synthetic supervision: pinhole cameras, ground-truth renders and dataset I/O.

Camera convention: +z is the viewing direction, +x right, +y down; pixel
``(u, v)`` has its centre at integer coordinates, so the default principal
point ``((W-1)/2, (H-1)/2)`` sits at the image centre.

On-disk layout of a dataset directory::

    metadata.json            version, scene id, bounds, cameras, array index
    frame_000_rgb.bin        H*W*3 float64, little-endian, row-major (v, u, c)
    frame_000_depth.bin      H*W   float64, +inf marks a miss
    frame_000_normal.bin     H*W*3 float64, zero vector where depth is inf
    ...
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .scenes import (
    AnalyticScene,
    Ray,
    closest_primitive,
    normal_query,
    ray_box_interval,
    trace_rays,
)

DATASET_VERSION = 1
ARRAY_DTYPE = "<f8"
LIGHT_DIR = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
AMBIENT = 0.6


class DatasetError(ValueError):
    """Malformed or incompatible dataset; the message names the offending field."""


class IncompatibleVersionError(DatasetError):
    pass


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (4, 4) camera-to-world

    def __post_init__(self):
        c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "c2w", c2w)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        rot = c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation must be orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "c2w": self.c2w.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeCamera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d["c2w"], dtype=np.float64))

    def project(self, points: np.ndarray):
        """World points to ``(u, v, z_cam)``."""
        w2c = np.linalg.inv(self.c2w)
        pc = points @ w2c[:3, :3].T + w2c[:3, 3]
        z = pc[..., 2]
        return self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy, z


def pixel_directions(camera: PinholeCamera, u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ camera.c2w[:3, :3].T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(camera: PinholeCamera, u: float, v: float, near: float = 0.0, far: float = 1e3) -> Ray:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    return Ray(camera.origin.copy(), pixel_directions(camera, u, v), near, far)


def shade(albedo, normal, light_dir=LIGHT_DIR, ambient: float = AMBIENT) -> np.ndarray:
    """Lambertian shading with an ambient floor: ``albedo * max(ambient, n . l)``."""
    albedo = np.asarray(albedo, dtype=np.float64)
    ndotl = np.clip(np.asarray(normal) @ np.asarray(light_dir, dtype=np.float64), 0.0, None)
    return np.clip(albedo * np.maximum(ambient, ndotl)[..., None], 0.0, 1.0)


def albedo_at(scene: AnalyticScene, points: np.ndarray) -> np.ndarray:
    idx = closest_primitive(scene, points)
    out = np.zeros(points.shape[:-1] + (3,))
    for k, (prim, mat) in enumerate(zip(scene.primitives, scene.materials)):
        sel = idx == k
        if not np.any(sel):
            continue
        alb = np.broadcast_to(np.asarray(mat.albedo), (int(sel.sum()), 3)).copy()
        if mat.albedo_alt is not None:
            local = prim.to_local(points[sel])
            alt = local @ np.asarray(mat.split_axis) < 0
            alb[alt] = mat.albedo_alt
        out[sel] = alb
    return out


@dataclass
class SupervisionFrame:
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    camera: PinholeCamera

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)


@dataclass
class Dataset:
    frames: list
    scene_id: str
    bounds: np.ndarray

    def __post_init__(self):
        if not self.frames:
            raise DatasetError("dataset needs at least one frame")
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)

    @property
    def num_pixels(self) -> int:
        return sum(f.depth.size for f in self.frames)

    def dark_fraction(self, threshold: float = 0.05) -> float:
        """Fraction of surface-hit pixels whose brightest channel is below ``threshold``."""
        hits = dark = 0
        for f in self.frames:
            v = f.valid
            hits += int(v.sum())
            dark += int((f.rgb[v].max(axis=-1) < threshold).sum())
        return dark / hits if hits else 0.0


def render_frame(scene: AnalyticScene, camera: PinholeCamera) -> SupervisionFrame:
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    dirs = pixel_directions(camera, uu, vv).reshape(-1, 3)
    origins = np.broadcast_to(camera.origin, dirs.shape)
    near, far, inside = ray_box_interval(origins, dirs, scene.bounds)
    depth = np.full(len(dirs), np.inf)
    sel = np.flatnonzero(inside)
    if sel.size:
        t = trace_rays(scene, origins[sel], dirs[sel], near[sel], far[sel])
        ok = ~np.isnan(t)
        depth[sel[ok]] = t[ok]
    valid = np.isfinite(depth)
    normal = np.zeros((len(dirs), 3))
    rgb = np.zeros((len(dirs), 3))
    if valid.any():
        pts = origins[valid] + depth[valid, None] * dirs[valid]
        n = normal_query(scene, pts)
        normal[valid] = n
        rgb[valid] = shade(albedo_at(scene, pts), n)
    h, w = camera.height, camera.width
    return SupervisionFrame(rgb.reshape(h, w, 3), depth.reshape(h, w), normal.reshape(h, w, 3), camera)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, forward, eye
    return c2w


def camera_rig(scene: AnalyticScene, views: int = 24, radius_factor: float = 2.5, width: int = 64,
               height: int = 64, fov_deg: float = 50.0, max_elevation_deg: float = 60.0) -> list:
    """Cameras on a Fibonacci spiral around the scene centre, all looking at it."""
    center = scene.center
    radius = radius_factor * scene.radius
    focal = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    zmax = np.sin(np.deg2rad(max_elevation_deg))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for i in range(views):
        z = zmax * (1 - 2 * (i + 0.5) / views)
        r = np.sqrt(1 - z * z)
        theta = golden * i
        eye = center + radius * np.array([r * np.cos(theta), r * np.sin(theta), z])
        cams.append(PinholeCamera(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height,
                                  look_at(eye, center)))
    return cams


def generate_dataset(scene: AnalyticScene, cameras: Sequence[PinholeCamera]) -> Dataset:
    return Dataset([render_frame(scene, c) for c in cameras], scene.scene_id, scene.bounds.copy())


# ---------------------------------------------------------------- disk format

_FIELDS = (("rgb", 3), ("depth", 0), ("normal", 3))


def save_dataset(dataset: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames_meta = []
    for i, frame in enumerate(dataset.frames):
        entry = {"camera": frame.camera.to_dict(), "arrays": {}}
        for name, channels in _FIELDS:
            arr = np.ascontiguousarray(getattr(frame, name), dtype=ARRAY_DTYPE)
            fname = f"frame_{i:03d}_{name}.bin"
            blob = arr.tobytes()
            (root / fname).write_bytes(blob)
            entry["arrays"][name] = {"file": fname, "shape": list(arr.shape), "dtype": ARRAY_DTYPE,
                                     "sha256": hashlib.sha256(blob).hexdigest()}
        frames_meta.append(entry)
    meta = {
        "version": DATASET_VERSION,
        "scene_id": dataset.scene_id,
        "bounds": dataset.bounds.tolist(),
        "frames": frames_meta,
    }
    (root / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "metadata.json"
    if not meta_path.exists():
        raise DatasetError(f"{meta_path}: metadata file missing")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"metadata.json: {exc.msg} at line {exc.lineno}") from None
    if meta.get("version") != DATASET_VERSION:
        raise IncompatibleVersionError(
            f"metadata.version: dataset format {meta.get('version')!r} is incompatible with {DATASET_VERSION}"
        )
    for key in ("scene_id", "bounds", "frames"):
        if key not in meta:
            raise DatasetError(f"metadata.{key}: missing")
    frames = []
    for i, entry in enumerate(meta["frames"]):
        try:
            camera = PinholeCamera.from_dict(entry["camera"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"frames[{i}].camera: {exc}") from None
        arrays = {}
        for name, channels in _FIELDS:
            loc = f"frames[{i}].{name}"
            info = entry.get("arrays", {}).get(name)
            if info is None:
                raise DatasetError(f"{loc}: missing array entry")
            fpath = root / info["file"]
            if not fpath.exists():
                raise DatasetError(f"{loc}: file {info['file']} missing")
            blob = fpath.read_bytes()
            shape = tuple(info["shape"])
            expected = (camera.height, camera.width) + ((channels,) if channels else ())
            if shape != expected:
                raise DatasetError(f"{loc}: shape {shape} does not match camera {expected}")
            dtype = np.dtype(info.get("dtype", ARRAY_DTYPE))
            if len(blob) != int(np.prod(shape)) * dtype.itemsize:
                raise DatasetError(f"{loc}: {len(blob)} bytes, expected {int(np.prod(shape)) * dtype.itemsize}")
            if "sha256" in info and hashlib.sha256(blob).hexdigest() != info["sha256"]:
                raise DatasetError(f"{loc}: checksum mismatch")
            arrays[name] = np.frombuffer(blob, dtype=dtype).reshape(shape).astype(np.float64)
        frames.append(SupervisionFrame(arrays["rgb"], arrays["depth"], arrays["normal"], camera))
    return Dataset(frames, meta["scene_id"], np.asarray(meta["bounds"]))
