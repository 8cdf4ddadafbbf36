import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradsdf.errors import EmptyFrameError, MedialPointError, SceneError
from gradsdf.geometry import (Aabb, AnalyticScene, Box, Frame, Room, Sphere, generate_frames,
                              scene_from_dict, scene_sdf, scene_sdf_gradient, scene_to_dict)

ROOT = Aabb((-5, -5, -5), (5, 5, 5))


def unit_sphere():
    return AnalyticScene([Sphere((0, 0, 0), 1.0)], ROOT)


def test_sphere_distance_outside():
    assert scene_sdf(unit_sphere(), (2, 0, 0)) == pytest.approx(1.0, abs=1e-12)


def test_sphere_center_depth():
    assert scene_sdf(unit_sphere(), (0, 0, 0)) == pytest.approx(-1.0, abs=1e-12)


def test_union_midpoint():
    sc = AnalyticScene([Sphere((0, 0, 0), 1.0), Sphere((4, 0, 0), 1.0)], ROOT)
    assert scene_sdf(sc, (2, 0, 0)) == pytest.approx(1.0, abs=1e-12)


def test_sphere_gradient_radial():
    np.testing.assert_allclose(scene_sdf_gradient(unit_sphere(), (2, 0, 0)), [1, 0, 0], atol=1e-12)


def test_box_face_normal():
    sc = AnalyticScene([Box((0, 0, 0), (1, 1, 1))], ROOT)
    np.testing.assert_allclose(scene_sdf_gradient(sc, (0, 0, 3)), [0, 0, 1], atol=1e-12)


def test_medial_tie_raises():
    sc = AnalyticScene([Sphere((-2, 0, 0), 1.0), Sphere((2, 0, 0), 1.0)], ROOT)
    with pytest.raises(MedialPointError):
        scene_sdf_gradient(sc, (0, 0, 0))


def test_box_distance_to_edge_and_corner():
    # brute force: distance to a dense sampling of the box surface
    box = Box((0, 0, 0), (1, 0.5, 0.25))
    g = np.linspace(-1, 1, 201)
    face_pts = []
    for a, h in enumerate((1, 0.5, 0.25)):
        u, v = np.meshgrid(g, g, indexing="ij")
        ax = [b for b in range(3) if b != a]
        hs = np.array([1, 0.5, 0.25])
        for s in (-1, 1):
            p = np.zeros((u.size, 3))
            p[:, a] = s * h
            p[:, ax[0]] = u.ravel() * hs[ax[0]]
            p[:, ax[1]] = v.ravel() * hs[ax[1]]
            face_pts.append(p)
    surf = np.concatenate(face_pts)
    for x in ([2, 1, 1], [1.5, 0, 0], [-2, -2, 0.1]):
        brute = np.min(np.linalg.norm(surf - np.array(x, float), axis=1))
        assert box.sdf(np.array(x, float)) == pytest.approx(brute, abs=5e-3)


def test_room_sdf_and_gradient():
    room = Room((0, 0, 0), (1, 1, 1), 0.1)
    sc = AnalyticScene([room], ROOT)
    assert scene_sdf(sc, (0.5, 0, 0)) == pytest.approx(0.5)
    assert scene_sdf(sc, (0.9, 0.2, 0)) == pytest.approx(0.1)
    assert scene_sdf(sc, (1.05, 0, 0)) == pytest.approx(-0.05)
    assert scene_sdf(sc, (1.3, 0, 0)) == pytest.approx(0.2)
    np.testing.assert_allclose(scene_sdf_gradient(sc, (0.9, 0.2, 0)), [-1, 0, 0], atol=1e-12)
    with pytest.raises(MedialPointError):
        scene_sdf_gradient(sc, (0, 0, 0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_eikonal_property_of_oracle(x):
    sc = AnalyticScene([Sphere((0.5, 0, 0), 0.7), Box((-1.5, 0.5, 0), (0.4, 0.3, 0.5))], ROOT)
    x = np.array(x)
    d = sc.sdf(x)
    if d <= 1e-3:
        return  # union is exact only outside the primitives
    g, medial = sc.gradient(x)
    dists = sorted(float(p.sdf(x)) for p in sc.primitives)
    if medial or dists[1] - dists[0] < 1e-3:
        return
    h = 1e-5
    fd = np.array([(sc.sdf(x + h * e) - sc.sdf(x - h * e)) / (2 * h) for e in np.eye(3)])
    assert 1 - 1e-3 <= np.linalg.norm(fd) <= 1 + 1e-3
    assert np.linalg.norm(g) == pytest.approx(1.0, abs=1e-9)


def test_frames_hit_surface_and_deterministic():
    sc = unit_sphere()
    a = generate_frames(sc, [(3, 0, 0)], 500, seed=7)
    b = generate_frames(sc, [(3, 0, 0)], 500, seed=7)
    assert np.all(np.abs(sc.sdf(a[0].points)) < 1e-4)
    assert a[0].points.tobytes() == b[0].points.tobytes()
    c = generate_frames(sc, [(3, 0, 0)], 500, seed=8)
    assert c[0].points.tobytes() != a[0].points.tobytes()


def test_closed_room_interior_rays_almost_all_hit():
    sc = AnalyticScene([Room((0, 0, 0), (1.5, 1.5, 1.5), 0.1)], Aabb((-2,) * 3, (2,) * 3))
    fr = generate_frames(sc, [(0.2, -0.3, 0.1)], 1000, seed=3)[0]
    assert len(fr.points) >= 990


def test_empty_frame_raises():
    # a speck in the far corner: five random rays all miss it
    tiny = AnalyticScene([Sphere((4.9, 4.9, 4.9), 0.01)], ROOT)
    with pytest.raises(EmptyFrameError):
        generate_frames(tiny, [(-4.5, -4.5, -4.5)], 5, seed=0)


def test_frame_clip_drops_and_counts():
    fr = Frame((0, 0, 0), np.array([[0, 0, 0.5], [9, 9, 9], [0.1, 0.2, 0.3]]), id=4)
    out = fr.clipped(Aabb((-1,) * 3, (1,) * 3))
    assert len(out.points) == 2 and out.dropped == 1 and out.id == 4


def test_scene_schema_roundtrip_and_pose_error():
    sc = AnalyticScene([Sphere((0, 0, 0), 1.0), Box((3, 0, 0), (0.5, 0.5, 0.5))], ROOT,
                       trajectory=[(0, 0, 3), (0, 3, 0)])
    doc = scene_to_dict(sc)
    back = scene_from_dict(doc)
    assert scene_to_dict(back) == doc
    doc["trajectory"].append([0.1, 0, 0])
    with pytest.raises(SceneError, match="pose 2"):
        scene_from_dict(doc)


def test_primitive_outside_root_rejected():
    with pytest.raises(SceneError):
        AnalyticScene([Sphere((4.5, 0, 0), 1.0)], ROOT)
