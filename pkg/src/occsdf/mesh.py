"""Zero-level-set extraction and point-sample reconstruction metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .scenes import AnalyticScene, sample_scene_surface, sdf_query

DEFAULT_THRESHOLD = 0.05
DEFAULT_SAMPLES = 100_000


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    normals: Optional[np.ndarray] = None  # per vertex

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def write_obj(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write("v %r %r %r\n" % tuple(float(x) for x in v))
            if self.normals is not None:
                for n in self.normals:
                    fh.write("vn %r %r %r\n" % tuple(float(x) for x in n))
                for t in self.triangles + 1:
                    fh.write(f"f {t[0]}//{t[0]} {t[1]}//{t[1]} {t[2]}//{t[2]}\n")
            else:
                for t in self.triangles + 1:
                    fh.write(f"f {t[0]} {t[1]} {t[2]}\n")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def read_obj(path) -> TriangleMesh:
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def cleanup(mesh: TriangleMesh, area_eps: float = 0.0) -> TriangleMesh:
    """Drop zero-area or index-repeating triangles and the vertices they orphan."""
    tri = mesh.triangles
    if len(tri) == 0:
        return TriangleMesh.empty()
    distinct = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    keep = distinct & (mesh.triangle_areas() > area_eps)
    tri = tri[keep]
    used = np.unique(tri)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    normals = None if mesh.normals is None else mesh.normals[used]
    return TriangleMesh(mesh.vertices[used], remap[tri], normals)


def _grid_points(bounds, resolution: int):
    axes = [np.linspace(bounds[0][k], bounds[1][k], resolution) for k in range(3)]
    return axes, np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def _sdf_callable(source):
    if isinstance(source, AnalyticScene):
        return lambda p: sdf_query(source, p)
    if isinstance(source, torch.nn.Module):
        def f(p, chunk=65536):
            out = []
            with torch.no_grad():
                for k in range(0, len(p), chunk):
                    x = torch.as_tensor(p[k:k + chunk], dtype=source.dtype)
                    out.append(source.sdf(x).double().numpy())
            return np.concatenate(out) if out else np.zeros(0)
        return f
    if callable(source):
        return lambda p: np.asarray(source(p), dtype=np.float64)
    raise TypeError("extract_mesh needs an AnalyticScene, a field module or a callable")


def extract_mesh(source, bounds, resolution: int = 128) -> TriangleMesh:
    """Marching cubes at iso-level 0 on a ``resolution``^3 grid spanning ``bounds``.

    ``source`` is an analytic scene, a trained field (its SDF head is used) or
    any callable mapping ``(N, 3)`` points to signed distances. Triangles are
    wound so their normals point towards increasing SDF (outwards). A grid
    with no sign change yields an empty mesh.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8 per axis")
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.shape != (2, 3) or np.any(bounds[1] <= bounds[0]):
        raise ValueError("bounds must be a (2, 3) array with max > min")
    axes, pts = _grid_points(bounds, resolution)
    values = _sdf_callable(source)(pts).reshape(resolution, resolution, resolution)
    if not np.all(np.isfinite(values)):
        raise ValueError("SDF grid contains non-finite values")
    if values.min() >= 0.0 or values.max() <= 0.0:
        return TriangleMesh.empty()
    spacing = tuple(float(a[1] - a[0]) for a in axes)
    verts, faces, normals, _ = marching_cubes(values, level=0.0, spacing=spacing,
                                              gradient_direction="descent", allow_degenerate=True)
    verts = verts + bounds[0]
    # "descent" winds faces outward for negative-inside fields, but its normals face inward
    normals = -normals / np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-300)
    return cleanup(TriangleMesh(verts, faces, normals))


# ---------------------------------------------------------------- sampling


@dataclass
class SurfaceSamples:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.points)


def sample_surface(mesh: TriangleMesh, n: int, rng: Optional[np.random.Generator] = None):
    """Area-weighted uniform samples on the triangles; normals are the face normals."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    areas = mesh.triangle_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=-1)
    tri = mesh.vertices[mesh.triangles[face]]
    points = np.einsum("nk,nkd->nd", bary, tri)
    return points, mesh.face_normals()[face]


def nearest_neighbor(points, queries):
    """Exact nearest stored point for each query; returns ``(distances, indices)``.

    A k-d tree finds the index; the distance is recomputed directly so it is
    bitwise the same as a brute-force evaluation of that pair.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("nearest_neighbor needs at least one stored point")
    _, idx = cKDTree(points).query(queries, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    dist = np.linalg.norm(queries - points[idx], axis=-1)
    return dist, idx


def brute_force_nearest(points, queries):
    """O(n*m) reference for :func:`nearest_neighbor`; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=-1)
    idx = d.argmin(axis=1)
    return d[np.arange(len(queries)), idx], idx


# ---------------------------------------------------------------- metrics


@dataclass
class MeshMetricsReport:
    accuracy: Optional[float]
    completeness: Optional[float]
    chamfer_l1: Optional[float]
    precision: float
    recall: float
    fscore: float
    normal_consistency: Optional[float]
    threshold: float
    sample_count: int
    empty: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def fscore(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def _within(d: np.ndarray, threshold: float) -> np.ndarray:
    # inclusive boundary; the relative slack absorbs rounding in |a - b| for exact offsets
    return d <= threshold * (1.0 + 1e-9)


def evaluate_points(pred_points, gt_points, threshold: float = DEFAULT_THRESHOLD, pred_normals=None,
                    gt_normals=None, nn=nearest_neighbor) -> MeshMetricsReport:
    """Accuracy, completeness, Chamfer-L1, precision/recall/F-score (percent) and normal consistency."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    pred_points = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(gt_points) == 0:
        raise ValueError("ground truth surface is empty")
    n = int(max(len(pred_points), len(gt_points)))
    if len(pred_points) == 0:
        return MeshMetricsReport(None, None, None, 0.0, 0.0, 0.0, None, float(threshold), n, empty=True)
    d_pred, i_pred = nn(gt_points, pred_points)  # pred -> gt
    d_gt, i_gt = nn(pred_points, gt_points)  # gt -> pred
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    prec = 100.0 * float(_within(d_pred, threshold).mean())
    rec = 100.0 * float(_within(d_gt, threshold).mean())
    nc = None
    if pred_normals is not None and gt_normals is not None:
        pn = np.asarray(pred_normals, dtype=np.float64).reshape(-1, 3)
        gn = np.asarray(gt_normals, dtype=np.float64).reshape(-1, 3)
        c1 = np.abs(np.sum(pn * gn[i_pred], axis=-1))
        c2 = np.abs(np.sum(gn * pn[i_gt], axis=-1))
        nc = float(0.5 * (c1.mean() + c2.mean()))
    return MeshMetricsReport(acc, comp, 0.5 * (acc + comp), prec, rec, fscore(prec, rec), nc, float(threshold), n)


Surface = Union[TriangleMesh, AnalyticScene, SurfaceSamples]


def _samples(surface: Surface, n: int, rng: np.random.Generator) -> SurfaceSamples:
    if isinstance(surface, SurfaceSamples):
        return surface
    if isinstance(surface, AnalyticScene):
        return SurfaceSamples(*sample_scene_surface(surface, n, rng))
    if isinstance(surface, TriangleMesh):
        if surface.is_empty:
            return SurfaceSamples(np.zeros((0, 3)), np.zeros((0, 3)))
        return SurfaceSamples(*sample_surface(surface, n, rng))
    raise TypeError(f"cannot sample surface of type {type(surface).__name__}")


def evaluate(pred: Surface, gt: Surface, threshold: float = DEFAULT_THRESHOLD, n: int = DEFAULT_SAMPLES,
             seed: int = 0) -> MeshMetricsReport:
    """Sample ``n`` points on each surface and compare them.

    ``gt`` may be an analytic scene, sampled exactly on its primitives. An
    empty prediction gives a report flagged ``empty`` with zero precision
    and recall.
    """
    rng = np.random.default_rng(seed)
    ps = _samples(pred, n, rng)
    gs = _samples(gt, n, rng)
    return evaluate_points(ps.points, gs.points, threshold, ps.normals, gs.normals)
