import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occsdf.scenes import (
    AnalyticScene,
    Primitive,
    Ray,
    SceneFormatError,
    build_toy_scene,
    load_scene,
    normal_query,
    occupancy_query,
    ray_first_hit,
    sample_scene_surface,
    save_scene,
    scene_from_dict,
    scene_to_dict,
    sdf_query,
    toy_rays,
    trace_rays,
)

BIG = np.array([[-5.0, -5.0, -5.0], [5.0, 5.0, 5.0]])


def unit_sphere(center=(0.0, 0.0, 0.0)):
    return Primitive("sphere", translation=np.asarray(center, float), size={"radius": 1.0})


def scene_of(*prims):
    return AnalyticScene(prims, BIG)


def fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


def test_sphere_sdf_values():
    sc = scene_of(unit_sphere())
    assert sdf_query(sc, np.array([2.0, 0, 0])) == pytest.approx(1.0)
    assert sdf_query(sc, np.zeros(3)) == pytest.approx(-1.0)


def test_union_matches_dense_surface_samples():
    sc = scene_of(unit_sphere(), unit_sphere((3.0, 0, 0)))
    surf = np.concatenate([fibonacci_sphere(200_000), fibonacci_sphere(200_000) + [3.0, 0, 0]])
    p = np.array([1.5, 0.0, 0.0])
    brute = np.linalg.norm(surf - p, axis=1).min()
    assert sdf_query(sc, p) == pytest.approx(0.5, abs=1e-12)
    assert abs(sdf_query(sc, p) - brute) < 1e-3


def test_normals():
    assert np.allclose(normal_query(scene_of(unit_sphere()), [0, 0, 2.0]), [0, 0, 1])
    plane = Primitive("plane", size={"normal": [0, 0, 1], "offset": 0.0})
    assert np.allclose(normal_query(scene_of(plane), [5, 5, 1.0]), [0, 0, 1])


def test_box_normal_matches_finite_difference():
    box = scene_of(Primitive("box", size={"half_extents": [1, 1, 1]}))
    p = np.array([2.0, 0.5, 0.5])
    h = 1e-5
    fd = np.array([(sdf_query(box, p + h * e) - sdf_query(box, p - h * e)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(normal_query(box, p), fd, atol=1e-8)
    assert np.allclose(normal_query(box, p), [1, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3), st.floats(0, 360), st.floats(0, 360))
def test_rotated_cylinder_gradient_is_finite_difference(p, a, b):
    cyl = Primitive("cylinder", translation=np.array([0.1, -0.2, 0.0]), size={"radius": 0.4, "height": 1.0},
                    rotation=_euler(a, b))
    sc = scene_of(cyl)
    p = np.asarray(p)
    h = 1e-6
    fd = np.array([(sdf_query(sc, p + h * e) - sdf_query(sc, p - h * e)) / (2 * h) for e in np.eye(3)])
    n = normal_query(sc, p)
    assert np.linalg.norm(n) == pytest.approx(1.0)
    # away from the rim creases the analytic gradient must match
    if np.linalg.norm(fd) > 0.999:
        assert np.allclose(n, fd, atol=1e-4)


def _euler(a, b):
    a, b = np.deg2rad(a), np.deg2rad(b)
    rz = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, np.cos(b), -np.sin(b)], [0, np.sin(b), np.cos(b)]])
    return rz @ rx


def test_occupancy_boundary_is_outside():
    sc = scene_of(unit_sphere())
    assert occupancy_query(sc, np.zeros(3)) == 1
    assert occupancy_query(sc, [2.0, 0, 0]) == 0
    assert occupancy_query(sc, [1.0, 0, 0]) == 0


def test_ray_first_hit():
    sc = scene_of(unit_sphere())
    assert ray_first_hit(sc, Ray([-3.0, 0, 0], [1.0, 0, 0], 0.0, 10.0)) == pytest.approx(2.0, abs=1e-7)
    assert ray_first_hit(sc, Ray([-3.0, 2, 0], [1.0, 0, 0], 0.0, 10.0)) is None


def test_trace_rays_agrees_with_single_ray():
    sc = build_toy_scene()
    rng = np.random.default_rng(3)
    o = rng.uniform(-2, 2, (40, 3)) + [0, -4, 0]
    d = rng.normal(size=(40, 3)) * 0.3 + [0, 1, 0]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t = trace_rays(sc, o, d, np.zeros(40), np.full(40, 8.0))
    for k in range(40):
        ref = ray_first_hit(sc, Ray(o[k], d[k], 0.0, 8.0))
        assert (ref is None and np.isnan(t[k])) or t[k] == pytest.approx(ref, abs=1e-9)


def _dense_scan(scene, ray, n=20001):
    ts = np.linspace(ray.near, ray.far, n)
    return ts, sdf_query(scene, ray.at(ts))


def _local_minima(v):
    return int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))


def test_toy_occluded_ray_profile():
    sc = build_toy_scene()
    ray = toy_rays(sc)["occluded"]
    ts, s = _dense_scan(sc, ray)
    hit = ray_first_hit(sc, ray)
    assert _local_minima(s[ts < hit]) >= 1 and _local_minima(s) + 1 >= 2
    # the occluder's near-miss gives a positive local minimum before the true hit
    pre = ts < hit
    i = np.argmin(np.where(pre & (ts < hit - 0.2), s, np.inf))
    assert 0 < s[i] < 0.05 and ts[i] < hit


def test_toy_single_ray_monotone_until_hit():
    sc = build_toy_scene()
    ray = toy_rays(sc)["single"]
    ts, s = _dense_scan(sc, ray)
    hit = ray_first_hit(sc, ray)
    assert np.all(np.diff(s[ts <= hit]) <= 1e-12)


def test_occupancy_changes_exactly_at_crossings():
    sc = build_toy_scene()
    for ray in toy_rays(sc).values():
        ts, s = _dense_scan(sc, ray, 4001)
        occ = occupancy_query(sc, ray.at(ts))
        assert np.array_equal(np.diff(occ) != 0, np.diff(s < 0) != 0)


def test_scene_json_roundtrip(tmp_path):
    sc = build_toy_scene()
    save_scene(sc, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    pts = np.random.default_rng(0).uniform(-2, 2, (500, 3))
    assert np.array_equal(sdf_query(sc, pts), sdf_query(back, pts))
    assert scene_to_dict(back) == scene_to_dict(sc)


@pytest.mark.parametrize(
    "doc, where",
    [
        ({"primitives": [{"kind": "torus"}], "bounds": [[-1] * 3, [1] * 3]}, "primitives[0]"),
        ({"primitives": [{"kind": "sphere", "size": {"radius": -1}}], "bounds": [[-1] * 3, [1] * 3]}, "primitives[0]"),
        ({"primitives": [{"kind": "sphere", "size": {"radius": 1}}]}, "bounds"),
        ({"primitives": [{"kind": "sphere", "size": {"radius": 1}}], "bounds": [[1] * 3, [-1] * 3]}, "bounds"),
        ({"version": 99, "primitives": []}, "version"),
    ],
)
def test_scene_errors_name_location(doc, where):
    with pytest.raises(SceneFormatError) as exc:
        scene_from_dict(doc)
    assert exc.value.location.startswith(where)


def test_scene_file_parse_error_has_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "primitives": [,\n}')
    with pytest.raises(SceneFormatError) as exc:
        load_scene(p)
    assert exc.value.location == f"{p}:2:18"


def test_euler_rotation_parses():
    doc = {"primitives": [{"kind": "box", "euler_deg": [0, 0, 90], "size": {"half_extents": [1, 0.5, 0.5]}}],
           "bounds": [[-2] * 3, [2] * 3]}
    sc = scene_from_dict(json.loads(json.dumps(doc)))
    # rotated 90 degrees about z, the long axis now lies along y
    assert sdf_query(sc, [0, 0.99, 0]) < 0 and sdf_query(sc, [0.99, 0, 0]) > 0


def test_surface_samples_lie_on_surface():
    sc = build_toy_scene()
    pts, nrm = sample_scene_surface(sc, 5000, np.random.default_rng(0))
    assert len(pts) == 5000
    assert np.max(np.abs(sdf_query(sc, pts))) < 1e-6
    assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0)
