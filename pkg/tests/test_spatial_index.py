import numpy as np
import pytest

from mesh_core import InputError
from spatial_index import (
    REGION_EDGE,
    REGION_FACE,
    REGION_VERTEX,
    TriangleBVH,
    closest_point_on_triangles,
    nearest_neighbors,
    points_within,
)


def _brute_point_to_mesh(points, vertices, faces):
    best = np.full(len(points), np.inf)
    for face in faces:
        a, b, c = (np.repeat(vertices[i][None], len(points), axis=0) for i in face)
        near, _, _ = closest_point_on_triangles(points, a, b, c)
        best = np.minimum(best, np.linalg.norm(points - near, axis=1))
    return best


def test_nearest_neighbors_matches_brute_force():
    rng = np.random.default_rng(3)
    reference = rng.normal(size=(300, 3))
    queries = rng.normal(size=(50, 3))
    distance, index = nearest_neighbors(queries, reference)
    brute = np.linalg.norm(queries[:, None] - reference[None], axis=2)
    assert np.allclose(distance, brute.min(axis=1))
    assert np.array_equal(index, brute.argmin(axis=1))


def test_nearest_neighbors_empty_set():
    with pytest.raises(InputError):
        nearest_neighbors(np.zeros((2, 3)), np.zeros((0, 3)))


def test_points_within_is_inclusive():
    reference = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]])
    hits = points_within(np.array([[0.0, 0.0, 0.0]]), reference, 0.5)
    assert sorted(hits[0].tolist()) == [0, 1]


def test_closest_point_regions():
    a = np.array([[0.0, 0.0, 0.0]] * 3)
    b = np.array([[1.0, 0.0, 0.0]] * 3)
    c = np.array([[0.0, 1.0, 0.0]] * 3)
    points = np.array([[0.2, 0.2, 1.0], [0.5, -1.0, 0.0], [-1.0, -1.0, 0.0]])
    near, bary, region = closest_point_on_triangles(points, a, b, c)
    assert np.allclose(near, [[0.2, 0.2, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.0]])
    assert region.tolist() == [REGION_FACE, REGION_EDGE, REGION_VERTEX]
    assert np.allclose(bary.sum(axis=1), 1.0)
    assert np.allclose(np.einsum("pk,kpd->pd", bary, np.stack([a, b, c])), near)


def test_bvh_matches_brute_force(make_sphere):
    mesh = make_sphere(radius=0.5, rings=8, segments=12)
    points = np.random.default_rng(1).uniform(-1.0, 1.0, size=(200, 3))
    hit = TriangleBVH(mesh.vertices, mesh.faces, leaf_size=4).query(points)
    assert np.allclose(hit.distance, _brute_point_to_mesh(points, mesh.vertices, mesh.faces))
    assert np.allclose(np.linalg.norm(points - hit.point, axis=1), hit.distance)


def test_bvh_point_on_surface_has_zero_distance(quad):
    hit = TriangleBVH(quad.vertices, quad.faces).query(np.array([[0.25, 0.75, 0.0]]))
    assert hit.distance[0] == pytest.approx(0.0, abs=1e-12)
    split = TriangleBVH(quad.vertices, quad.faces, leaf_size=1)
    assert split.node_count == 3
    assert split.query(np.array([[0.25, 0.75, 0.0]])).distance[0] == pytest.approx(0.0, abs=1e-12)


def test_bvh_rejects_empty_mesh():
    with pytest.raises(InputError):
        TriangleBVH(np.zeros((3, 3)), np.zeros((0, 3)))
