from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridrecon.evaluation import (BAND_NAMES, MetricReport, REPORT_SCHEMA, accuracy, chamfer_distance,
                                    contour_contains, diagnostic_fan, evaluate_field, extract_surface,
                                    fan_dispersion, hausdorff_distance, marching_cubes, marching_squares,
                                    nearest_distances, normal_mae, reflection_dispersion, sample_polylines,
                                    surface_samples, winding_number)
from hybridrecon.render import AnalyticField
from hybridrecon.scenes import Ball, Box, Difference, HalfSpace, get_scene


def circle_points(r, n, phase=0.0):
    a = 2 * math.pi * (np.arange(n) + phase) / n
    return r * np.stack([np.cos(a), np.sin(a)], 1)


def test_marching_squares_circle():
    poly = marching_squares(Ball([0.0, 0.0], 0.5).eval, resolution=256)
    assert len(poly.chains) == 1 and poly.closed == [True]
    r = np.linalg.norm(poly.vertices, axis=1)
    assert np.abs(r - 0.5).max() < 5e-3
    assert poly.length() == pytest.approx(math.pi, rel=1e-3)
    assert winding_number(poly, [0.0, 0.0]) == 1
    assert not contour_contains(poly, [0.9, 0.0])


def test_marching_squares_empty_and_sign_flip():
    assert marching_squares(lambda x: np.ones(len(x)), resolution=32).is_empty()
    f = Box([0.1, -0.2], [0.4, 0.3]).eval
    a = marching_squares(f, resolution=64)
    b = marching_squares(lambda x: -f(x), resolution=64)
    assert a.segments.shape == b.segments.shape
    fwd = {tuple(np.round(s.ravel(), 12)) for s in a.segments}
    rev = {tuple(np.round(s[::-1].ravel(), 12)) for s in b.segments}
    assert fwd == rev
    assert winding_number(a, [0.1, -0.2]) == 1 and winding_number(b, [0.1, -0.2]) == -1


def test_marching_squares_saddle_consistency():
    # two disks nearly touching: every chain closed, two components
    f = lambda x: np.minimum(np.linalg.norm(x - [-0.3, 0.0], axis=1) - 0.29,
                             np.linalg.norm(x - [0.3, 0.0], axis=1) - 0.29)
    poly = marching_squares(f, resolution=101)
    assert all(poly.closed) and len(poly.chains) == 2


@pytest.mark.parametrize("name", ["flat2d-disk", "flat2d-lshape", "flat2d-blob"])
def test_extraction_residual_2d(name):
    sdf = get_scene(name).sdf
    poly = extract_surface(sdf.eval, 2, 256)
    cell = 2 * math.sqrt(2) / 256
    assert np.abs(sdf.eval(poly.vertices)).max() < cell


def test_marching_cubes_sphere():
    mesh = marching_cubes(Ball([0.0, 0.0, 0.0], 0.5).eval, resolution=64)
    assert mesh.is_closed()
    assert np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5).max() < 1e-2
    assert mesh.area() == pytest.approx(math.pi, rel=0.05)
    # outward orientation: face normals point away from the centre
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert ((n * v.mean(1)).sum(1) > 0).mean() > 0.99
    assert marching_cubes(lambda x: -np.ones(len(x)), resolution=16).is_empty()


def test_extraction_residual_bowl():
    sdf = get_scene("bowl3d").sdf
    mesh = extract_surface(sdf.eval, 3, 96)
    assert np.abs(sdf.eval(mesh.vertices)).max() < 2 * math.sqrt(3) / 96


def test_chamfer_concentric_circles():
    P, Q = circle_points(0.5, 20_000), circle_points(0.6, 20_000, 0.5)
    assert chamfer_distance(P, Q) == pytest.approx(0.1, abs=1e-3)
    assert chamfer_distance(P, Q) == chamfer_distance(Q, P)
    assert accuracy(P, Q) == pytest.approx(0.1, abs=1e-3)
    assert hausdorff_distance(P, Q) == pytest.approx(0.1, abs=1e-3)
    assert chamfer_distance(P, P) == 0.0
    with pytest.raises(ValueError):
        nearest_distances(P, np.zeros((0, 2)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 0.8), st.floats(0.2, 0.8), st.floats(0.2, 0.8))
def test_chamfer_triangle_style_bound(r1, r2, r3):
    n = 2000
    P, Q, R = circle_points(r1, n), circle_points(r2, n, 0.3), circle_points(r3, n, 0.7)
    spacing = 2 * math.pi * max(r1, r2, r3) / n
    assert chamfer_distance(P, R) <= chamfer_distance(P, Q) + chamfer_distance(Q, R) + 2 * spacing


def test_surface_samples_on_surface(rng):
    for name in ["flat2d-lshape", "bowl3d"]:
        sdf = get_scene(name).sdf
        pts = surface_samples(sdf, 2000, rng)
        assert len(pts) == 2000 and np.abs(sdf.eval(pts)).max() < 1e-9


def test_sample_polylines_even():
    poly = marching_squares(Ball([0.0, 0.0], 0.5).eval, resolution=128)
    pts = sample_polylines(poly, 1000)
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert gaps.max() < 1.5 * poly.length() / 1000


def rotate(v, deg):
    a = math.radians(deg)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return v @ R.T


def test_normal_mae_examples(rng):
    n = rng.normal(size=(8, 8, 2))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    assert normal_mae(n, n) == pytest.approx(0.0, abs=1e-6)
    assert normal_mae(rotate(n, 10.0), n) == pytest.approx(10.0, abs=1e-6)
    assert normal_mae(rotate(n, 90.0), n) == pytest.approx(90.0, abs=1e-6)
    mask = np.zeros((8, 8), bool)
    mask[0] = True
    bad = n.copy()
    bad[1:] = -bad[1:]
    assert normal_mae(bad, n, mask) == pytest.approx(0.0, abs=1e-6)


def test_halfplane_dispersion_zero():
    _, summary = fan_dispersion(get_scene("flat2d-halfplane").sdf, diagnostic_fan("flat2d-halfplane"))
    assert all(summary[b] == 0.0 for b in BAND_NAMES)


def test_lshape_dispersion_ratio():
    profiles, summary = fan_dispersion(get_scene("flat2d-lshape").sdf, diagnostic_fan("flat2d-lshape"))
    assert len(profiles) == 32 and summary["misses"] == 0
    assert summary["far"] > 2 * summary["near"]


def test_sphere_dispersion_grows_with_distance():
    _, summary = fan_dispersion(get_scene("sphere3d").sdf, diagnostic_fan("sphere3d"))
    assert summary["near"] < summary["far"]


def test_dispersion_profile_contents():
    sdf = Ball([0.0, 0.0], 0.5)
    p = reflection_dispersion(sdf, [-2.0, 0.1], [1.0, 0.0], n_samples=32)
    assert p.hit and sum(p.band_count.values()) == 32
    assert np.allclose(np.linalg.norm(p.reflections, axis=1), 1.0)
    q = reflection_dispersion(sdf, [-2.0, 0.1], [1.0, 0.0], n_samples=32)
    assert np.array_equal(p.reflections, q.reflections)
    assert np.allclose(list(p.band_spread.values()), list(q.band_spread.values()), equal_nan=True, rtol=0, atol=0)
    miss = reflection_dispersion(sdf, [-2.0, 0.8], [1.0, 0.0])
    assert not miss.hit


def test_evaluate_ground_truth_field():
    scene = get_scene("flat2d-disk")
    report, surface = evaluate_field(AnalyticField(scene.sdf), scene, n_points=5000)
    assert report.chamfer < 2 * math.sqrt(2) / 256
    d = report.to_dict()
    assert set(REPORT_SCHEMA["required"]) <= set(d)
    json.dumps(d)


def test_report_roundtrip():
    r = MetricReport(0.1, 0.2, 3.0, {"probe_inside": False})
    assert r.to_dict() == {"chamfer": 0.1, "accuracy": 0.2, "normal_mae": 3.0, "probe_inside": False}


def test_lshape_probe_outside_gt_contour():
    scene = get_scene("flat2d-lshape")
    poly = marching_squares(scene.sdf.eval)
    assert not contour_contains(poly, scene.probe)
    filled = marching_squares(Difference(Box([0.0, 0.0], [0.55, 0.55]), HalfSpace([-1.0, -1.0], -0.55)).eval)
    assert contour_contains(filled, scene.probe)
