"""Analytic ground-truth scenes built from primitive signed distance functions.

Scenes are unions of rigidly posed primitives. Distances are exact outside
every solid; inside overlapping solids the signed minimum is only a lower
bound on the true distance, so benchmark scenes keep their solids disjoint.

All queries are vectorised over leading dimensions: ``points`` may have any
shape ``(..., 3)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

SCENE_FORMAT_VERSION = 1
KINDS = ("sphere", "box", "cylinder", "plane")


class SceneFormatError(ValueError):
    """Raised when a scene description cannot be parsed; ``location`` names the bad field."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class Material:
    """Lambertian albedo, optionally split in two along a local-frame axis.

    Points whose local coordinate along ``split_axis`` is negative use
    ``albedo_alt``; this gives a single primitive a dark and a bright half.
    """

    albedo: tuple = (0.8, 0.8, 0.8)
    albedo_alt: Optional[tuple] = None
    split_axis: Optional[tuple] = None


@dataclass(frozen=True)
class Primitive:
    kind: str
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    size: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SceneFormatError(f"unknown primitive kind {self.kind!r}", "kind")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise SceneFormatError("rotation must be orthonormal with determinant +1", "rotation")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "size", _validate_size(self.kind, self.size))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def sdf(self, points: np.ndarray) -> np.ndarray:
        q = self.to_local(np.asarray(points, dtype=np.float64))
        return _LOCAL_SDF[self.kind](q, self.size)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Analytic unit gradient of this primitive's SDF, in world coordinates."""
        q = self.to_local(np.asarray(points, dtype=np.float64))
        g = _LOCAL_GRAD[self.kind](q, self.size)
        return g @ self.rotation.T

    def surface_area(self) -> float:
        s = self.size
        if self.kind == "sphere":
            return 4.0 * np.pi * s["radius"] ** 2
        if self.kind == "box":
            a, b, c = 2.0 * np.asarray(s["half_extents"])
            return 2.0 * (a * b + b * c + a * c)
        if self.kind == "cylinder":
            r, h = s["radius"], s["height"]
            return 2.0 * np.pi * r * h + 2.0 * np.pi * r * r
        return float("inf")


def _validate_size(kind: str, size: dict) -> dict:
    size = dict(size)
    try:
        if kind == "sphere":
            out = {"radius": float(size["radius"])}
            positive = [out["radius"]]
        elif kind == "box":
            he = tuple(float(v) for v in size["half_extents"])
            if len(he) != 3:
                raise SceneFormatError("half_extents needs 3 values", "size.half_extents")
            out = {"half_extents": he}
            positive = list(he)
        elif kind == "cylinder":
            out = {"radius": float(size["radius"]), "height": float(size["height"])}
            positive = [out["radius"], out["height"]]
        else:
            n = np.asarray(size["normal"], dtype=np.float64).reshape(3)
            norm = np.linalg.norm(n)
            if norm == 0:
                raise SceneFormatError("plane normal must be non-zero", "size.normal")
            out = {"normal": tuple(n / norm), "offset": float(size.get("offset", 0.0))}
            positive = []
    except KeyError as exc:
        raise SceneFormatError(f"missing size field {exc.args[0]!r} for {kind}", "size") from None
    if any(not np.isfinite(v) or v <= 0 for v in positive):
        raise SceneFormatError("size components must be strictly positive", "size")
    return out


def _sphere_sdf(q, s):
    return np.linalg.norm(q, axis=-1) - s["radius"]


def _sphere_grad(q, s):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    fallback = np.broadcast_to(np.array([0.0, 0.0, 1.0]), q.shape)
    return np.where(n > 0, q / np.where(n > 0, n, 1.0), fallback)


def _box_sdf(q, s):
    d = np.abs(q) - np.asarray(s["half_extents"])
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(d.max(axis=-1), 0.0)
    return outside + inside


def _box_grad(q, s):
    d = np.abs(q) - np.asarray(s["half_extents"])
    sign = np.where(q < 0, -1.0, 1.0)
    pos = np.maximum(d, 0.0)
    pos_norm = np.linalg.norm(pos, axis=-1, keepdims=True)
    outside = sign * pos / np.where(pos_norm > 0, pos_norm, 1.0)
    axis = np.argmax(d, axis=-1)
    inside = np.zeros_like(q)
    np.put_along_axis(inside, axis[..., None], np.take_along_axis(sign, axis[..., None], -1), -1)
    return np.where(pos_norm > 0, outside, inside)


def _cyl_parts(q, s):
    radial = np.linalg.norm(q[..., :2], axis=-1)
    dr = radial - s["radius"]
    dz = np.abs(q[..., 2]) - 0.5 * s["height"]
    return radial, dr, dz


def _cylinder_sdf(q, s):
    _, dr, dz = _cyl_parts(q, s)
    inside = np.minimum(np.maximum(dr, dz), 0.0)
    outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
    return inside + outside


def _cylinder_grad(q, s):
    radial, dr, dz = _cyl_parts(q, s)
    safe = np.where(radial > 0, radial, 1.0)
    rdir = np.stack([q[..., 0] / safe, q[..., 1] / safe, np.zeros_like(radial)], axis=-1)
    rdir = np.where((radial > 0)[..., None], rdir, np.array([1.0, 0.0, 0.0]))
    zdir = np.zeros_like(q)
    zdir[..., 2] = np.where(q[..., 2] < 0, -1.0, 1.0)
    pr, pz = np.maximum(dr, 0.0), np.maximum(dz, 0.0)
    pn = np.hypot(pr, pz)
    outside = (pr[..., None] * rdir + pz[..., None] * zdir) / np.where(pn > 0, pn, 1.0)[..., None]
    inside = np.where((dr >= dz)[..., None], rdir, zdir)
    return np.where((pn > 0)[..., None], outside, inside)


def _plane_sdf(q, s):
    return q @ np.asarray(s["normal"]) - s["offset"]


def _plane_grad(q, s):
    return np.broadcast_to(np.asarray(s["normal"]), q.shape).copy()


_LOCAL_SDF = {"sphere": _sphere_sdf, "box": _box_sdf, "cylinder": _cylinder_sdf, "plane": _plane_sdf}
_LOCAL_GRAD = {"sphere": _sphere_grad, "box": _box_grad, "cylinder": _cylinder_grad, "plane": _plane_grad}


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0.0 <= self.near < self.far:
            raise ValueError("ray requires 0 <= near < far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    bounds: np.ndarray  # (2, 3): min corner, max corner
    materials: tuple = ()
    scene_id: str = "scene"

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise SceneFormatError("scene needs at least one primitive", "primitives")
        bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if np.any(bounds[1] <= bounds[0]):
            raise SceneFormatError("bounds max must exceed min", "bounds")
        mats = tuple(self.materials) or tuple(Material() for _ in prims)
        if len(mats) != len(prims):
            raise SceneFormatError("one material per primitive required", "materials")
        object.__setattr__(self, "primitives", prims)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "materials", mats)

    @property
    def center(self) -> np.ndarray:
        return self.bounds.mean(axis=0)

    @property
    def radius(self) -> float:
        """Half of the largest bounds extent."""
        return 0.5 * float(np.max(self.bounds[1] - self.bounds[0]))

    def primitive_distances(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return np.stack([p.sdf(points) for p in self.primitives], axis=-1)


def sdf_query(scene: AnalyticScene, points) -> np.ndarray:
    """Signed distance of the union: the minimum over primitive SDFs."""
    return scene.primitive_distances(points).min(axis=-1)


def closest_primitive(scene: AnalyticScene, points) -> np.ndarray:
    # np.argmin returns the first index on ties
    return scene.primitive_distances(points).argmin(axis=-1)


def normal_query(scene: AnalyticScene, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    idx = closest_primitive(scene, points)
    grads = np.stack([p.gradient(points) for p in scene.primitives], axis=-2)
    g = np.take_along_axis(grads, idx[..., None, None], axis=-2)[..., 0, :]
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def occupancy_query(scene: AnalyticScene, points) -> np.ndarray:
    """1 strictly inside a solid, 0 outside or on the boundary."""
    return (sdf_query(scene, points) < 0).astype(np.int64)


def ray_first_hit(
    scene: AnalyticScene,
    ray: Ray,
    step_scale: float = 0.99,
    max_steps: int = 512,
    bisect_iters: int = 64,
    tol: float = 1e-7,
) -> Optional[float]:
    hits = trace_rays(scene, ray.origin[None], ray.direction[None], np.array([ray.near]),
                      np.array([ray.far]), step_scale, max_steps, bisect_iters, tol)
    return None if np.isnan(hits[0]) else float(hits[0])


def trace_rays(
    scene: AnalyticScene,
    origins: np.ndarray,
    directions: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    step_scale: float = 0.99,
    max_steps: int = 512,
    bisect_iters: int = 64,
    tol: float = 1e-7,
) -> np.ndarray:
    """Batched sphere tracing; returns first-hit distances with NaN for misses.

    Marching steps by ``step_scale * |sdf|`` until either ``|sdf| < tol`` or the
    sign flips, in which case the bracketing interval is bisected.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,)).copy()

    def f(t, sel):
        return sdf_query(scene, origins[sel] + t[:, None] * directions[sel])

    t = near.copy()
    result = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    f0 = f(t, active)
    start_sign = np.sign(f0)
    hit0 = np.abs(f0) < tol
    result[hit0] = t[hit0]
    active &= ~hit0
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        fv = f(t[idx], idx)
        done = np.abs(fv) < tol
        result[idx[done]] = t[idx[done]]
        active[idx[done]] = False
        crossed = ~done & (np.sign(fv) != start_sign[idx])
        ci = idx[crossed]
        active[ci] = False
        hi[ci] = t[ci]
        rest = idx[~done & ~crossed]
        step = step_scale * np.abs(fv[~done & ~crossed])
        lo[rest] = t[rest]
        t[rest] = t[rest] + step
        beyond = t[rest] > far[rest]
        if np.any(beyond):
            # the last sample before far may still bracket a crossing at far
            b = rest[beyond]
            fb = f(far[b], b)
            flip = np.sign(fb) != start_sign[b]
            hi[b[flip]] = far[b[flip]]
            active[b] = False
    bracket = np.flatnonzero(~np.isnan(hi) & np.isnan(result))
    if bracket.size:
        a, b = lo[bracket].copy(), hi[bracket].copy()
        sa = start_sign[bracket]
        for _ in range(bisect_iters):
            m = 0.5 * (a + b)
            fm = f(m, bracket)
            same = np.sign(fm) == sa
            a = np.where(same, m, a)
            b = np.where(same, b, m)
        fa, fb = f(a, bracket), f(b, bracket)
        result[bracket] = np.where(np.abs(fa) <= np.abs(fb), a, b)
    return result


def ray_box_interval(origins, directions, bounds):
    """Slab test against an axis-aligned box; returns (near, far, hit_mask)."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bounds[0] - origins) * inv
        t1 = (bounds[1] - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(tmin, 0.0)
    return near, tmax, tmax > near


# ---------------------------------------------------------------- scene files


def _rotation_from(spec: dict, loc: str) -> np.ndarray:
    if "rotation" in spec:
        rot = np.asarray(spec["rotation"], dtype=np.float64)
        if rot.shape != (3, 3):
            raise SceneFormatError("rotation must be a 3x3 matrix", f"{loc}.rotation")
        return rot
    if "euler_deg" in spec:
        return Rotation.from_euler("xyz", spec["euler_deg"], degrees=True).as_matrix()
    return np.eye(3)


def scene_from_dict(data: dict) -> AnalyticScene:
    if not isinstance(data, dict):
        raise SceneFormatError("top level must be an object")
    version = data.get("version", SCENE_FORMAT_VERSION)
    if version != SCENE_FORMAT_VERSION:
        raise SceneFormatError(f"unsupported scene version {version}", "version")
    if "primitives" not in data or not isinstance(data["primitives"], list):
        raise SceneFormatError("missing primitive list", "primitives")
    prims, mats = [], []
    for i, spec in enumerate(data["primitives"]):
        loc = f"primitives[{i}]"
        if not isinstance(spec, dict) or "kind" not in spec:
            raise SceneFormatError("primitive needs a kind", loc)
        try:
            prim = Primitive(
                kind=spec["kind"],
                rotation=_rotation_from(spec, loc),
                translation=spec.get("translation", [0.0, 0.0, 0.0]),
                size=spec.get("size", {}),
            )
        except SceneFormatError as exc:
            raise SceneFormatError(str(exc).split(": ", 1)[-1], f"{loc}.{exc.location}") from None
        except (TypeError, ValueError) as exc:
            raise SceneFormatError(str(exc), loc) from None
        prims.append(prim)
        m = spec.get("material", {})
        mats.append(Material(
            albedo=tuple(float(v) for v in m.get("albedo", (0.8, 0.8, 0.8))),
            albedo_alt=tuple(float(v) for v in m["albedo_alt"]) if "albedo_alt" in m else None,
            split_axis=tuple(float(v) for v in m["split_axis"]) if "split_axis" in m else None,
        ))
    if "bounds" not in data:
        raise SceneFormatError("missing bounds", "bounds")
    try:
        bounds = np.asarray(data["bounds"], dtype=np.float64).reshape(2, 3)
    except (TypeError, ValueError):
        raise SceneFormatError("bounds must be [[xmin,ymin,zmin],[xmax,ymax,zmax]]", "bounds") from None
    return AnalyticScene(tuple(prims), bounds, tuple(mats), str(data.get("scene_id", "scene")))


def scene_to_dict(scene: AnalyticScene) -> dict:
    prims = []
    for p, m in zip(scene.primitives, scene.materials):
        size = {k: list(v) if isinstance(v, tuple) else v for k, v in p.size.items()}
        mat: dict[str, Any] = {"albedo": list(m.albedo)}
        if m.albedo_alt is not None:
            mat["albedo_alt"] = list(m.albedo_alt)
            mat["split_axis"] = list(m.split_axis)
        prims.append({
            "kind": p.kind,
            "translation": p.translation.tolist(),
            "rotation": p.rotation.tolist(),
            "size": size,
            "material": mat,
        })
    return {
        "version": SCENE_FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "bounds": scene.bounds.tolist(),
        "primitives": prims,
    }


def load_scene(path) -> AnalyticScene:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    try:
        return scene_from_dict(data)
    except SceneFormatError as exc:
        raise SceneFormatError(str(exc).split(": ", 1)[-1], f"{path}:{exc.location}") from None


def save_scene(scene: AnalyticScene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")


# ---------------------------------------------------------------- benchmark scenes

DARK = (0.01, 0.01, 0.01)
WHITE = (0.9, 0.9, 0.9)


def build_sphere_scene(radius: float = 0.6) -> AnalyticScene:
    """Single sphere, bright on top and near-black underneath."""
    mat = Material(albedo=WHITE, albedo_alt=DARK, split_axis=(0.0, 0.0, 1.0))
    return AnalyticScene(
        (Primitive("sphere", size={"radius": radius}),),
        np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
        (mat,),
        "sphere",
    )


def build_toy_scene() -> AnalyticScene:
    """Multi-object layout: a large box behind a small cylinder and a small box.

    ``toy_rays(scene)`` returns an occluded ray grazing the cylinder on its
    way to the large box, and an unoccluded ray hitting the small box.
    """
    prims = (
        Primitive("box", translation=[0.0, 0.0, 0.0], size={"half_extents": [0.5, 0.5, 0.5]}),
        Primitive("cylinder", translation=[0.0, -1.2, 0.0], size={"radius": 0.12, "height": 0.8}),
        Primitive("box", translation=[1.3, -1.3, 0.0], size={"half_extents": [0.15, 0.15, 0.15]}),
    )
    mats = (Material((0.2, 0.35, 0.9)), Material((0.9, 0.8, 0.1)), Material(DARK))
    return AnalyticScene(prims, np.array([[-2.0, -2.5, -1.0], [2.0, 1.5, 1.0]]), mats, "toy")


def toy_rays(scene: AnalyticScene, miss_distance: float = 0.01) -> dict:
    """Named probe rays for the toy scene.

    ``occluded`` travels along +y, passes ``miss_distance`` beside the
    cylinder and then meets the front face of the large box; ``single`` hits
    the isolated small box head-on.
    """
    cyl = scene.primitives[1]
    x = cyl.translation[0] + cyl.size["radius"] + miss_distance
    occluded = Ray(np.array([x, -2.4, 0.0]), np.array([0.0, 1.0, 0.0]), 0.0, 3.4)
    small = scene.primitives[2]
    single = Ray(np.array([small.translation[0], -2.4, 0.0]), np.array([0.0, 1.0, 0.0]), 0.0, 1.4)
    return {"occluded": occluded, "single": single}


def build_probe_scene() -> AnalyticScene:
    """Mirror-symmetric pair of boxes: a near-black one and a white one."""
    prims = (
        Primitive("box", translation=[-0.45, 0.0, 0.0], size={"half_extents": [0.3, 0.3, 0.3]}),
        Primitive("box", translation=[0.45, 0.0, 0.0], size={"half_extents": [0.3, 0.3, 0.3]}),
    )
    mats = (Material(DARK), Material(WHITE))
    return AnalyticScene(prims, np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]), mats, "probe")


def build_thin_scene() -> AnalyticScene:
    """Thin-structure scene: a large block, a slender pole and a small dark cube."""
    prims = (
        Primitive("box", translation=[0.0, 0.25, 0.0], size={"half_extents": [0.55, 0.3, 0.45]}),
        Primitive("cylinder", translation=[0.0, -0.45, 0.0], size={"radius": 0.035, "height": 1.1}),
        Primitive("box", translation=[0.5, -0.5, -0.35], size={"half_extents": [0.1, 0.1, 0.1]}),
    )
    mats = (Material(WHITE), Material((0.85, 0.75, 0.2)), Material(DARK))
    return AnalyticScene(prims, np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]), mats, "thin")


BENCHMARK_SCENES = {
    "sphere": build_sphere_scene,
    "toy": build_toy_scene,
    "probe": build_probe_scene,
    "thin": build_thin_scene,
}


def sample_scene_surface(scene: AnalyticScene, n: int, rng: np.random.Generator, tol: float = 1e-6):
    """Area-weighted samples of the visible union surface inside the bounds.

    Each primitive is sampled analytically; samples buried inside another
    solid or outside the bounds are rejected. Returns ``(points, normals)``.
    """
    pts_all, nrm_all = [], []
    areas = []
    for prim in scene.primitives:
        if prim.kind == "plane":
            areas.append((2.0 * float(np.linalg.norm(scene.bounds[1] - scene.bounds[0]))) ** 2)
        else:
            areas.append(prim.surface_area())
    areas = np.asarray(areas)
    collected = 0
    rounds = 0
    while collected < n and rounds < 50:
        rounds += 1
        budget = max(n - collected, 64) * 2
        for prim, area in zip(scene.primitives, areas):
            k = int(np.ceil(budget * area / areas.sum()))
            local = _sample_primitive_local(prim, k, rng, scene)
            world = local @ prim.rotation.T + prim.translation
            keep = np.all((world >= scene.bounds[0] - tol) & (world <= scene.bounds[1] + tol), axis=-1)
            world = world[keep]
            keep = np.abs(sdf_query(scene, world)) < tol
            world = world[keep]
            pts_all.append(world)
            nrm_all.append(normal_query(scene, world))
            collected += len(world)
    pts = np.concatenate(pts_all)
    nrm = np.concatenate(nrm_all)
    sel = rng.permutation(len(pts))[:n]
    return pts[sel], nrm[sel]


def _sample_primitive_local(prim: Primitive, k: int, rng, scene) -> np.ndarray:
    s = prim.size
    if prim.kind == "sphere":
        v = rng.normal(size=(k, 3))
        return s["radius"] * v / np.linalg.norm(v, axis=-1, keepdims=True)
    if prim.kind == "box":
        he = np.asarray(s["half_extents"])
        face_area = np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]])
        probs = np.repeat(face_area, 2) / (2 * face_area.sum())
        face = rng.choice(6, size=k, p=probs)
        pts = rng.uniform(-1, 1, size=(k, 3)) * he
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(k), axis] = sign * he[axis]
        return pts
    if prim.kind == "cylinder":
        r, h = s["radius"], s["height"]
        side = 2 * np.pi * r * h
        cap = np.pi * r * r
        which = rng.choice(3, size=k, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=k)
        rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(size=k)))
        z = np.where(which == 0, rng.uniform(-h / 2, h / 2, size=k), np.where(which == 1, h / 2, -h / 2))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=-1)
    # plane: square patch wide enough to cover the bounds, in local coordinates
    n = np.asarray(s["normal"])
    half = float(np.linalg.norm(scene.bounds[1] - scene.bounds[0]))
    u = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    a, b = rng.uniform(-half, half, size=(2, k))
    return s["offset"] * n + a[:, None] * u + b[:, None] * v
