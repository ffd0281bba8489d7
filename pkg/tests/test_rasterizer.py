import numpy as np
import pytest

import mesh_io
from mesh_core import BACKGROUND_DEPTH, Mesh, Scene
from rasterizer import contact_vertices, rasterize, render_contact_mask, save_render, vertex_visibility


def _brute_depth(mesh, camera):
    """Nearest orthographic hit per pixel center, testing every triangle."""
    uv, z = camera.project(mesh.vertices)
    depth = np.full((camera.height, camera.width), np.inf)
    rows, cols = np.mgrid[0:camera.height, 0:camera.width]
    px, py = cols.ravel() + 0.5, rows.ravel() + 0.5
    for face in mesh.faces:
        (x0, y0), (x1, y1), (x2, y2) = uv[face]
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(det) < 1e-12:
            continue
        l1 = ((px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)) / det
        l2 = ((x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 > 1e-9) & (l1 > 1e-9) & (l2 > 1e-9)
        d = l0 * z[face[0]] + l1 * z[face[1]] + l2 * z[face[2]]
        flat = depth.ravel()
        flat[inside] = np.minimum(flat[inside], d[inside])
        depth = flat.reshape(depth.shape)
    return np.where(np.isfinite(depth), depth, BACKGROUND_DEPTH)


def test_depth_matches_brute_force(make_sphere, front_ortho):
    mesh = make_sphere(radius=0.5, rings=8, segments=12)
    render = rasterize(Scene((mesh,)), front_ortho)
    expected = _brute_depth(mesh, front_ortho)
    both = render.foreground & (expected > 0)
    assert both.sum() > 0.95 * (expected > 0).sum()
    assert np.allclose(render.depth.data[both], expected[both], atol=1e-9)
    # the sphere's front pole is 0.5 in front of the origin
    assert render.depth.data[both].min() == pytest.approx(2.5, abs=0.05)


def _triangle_soup(seed, max_faces=200):
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, max_faces + 1))
    vertices = rng.uniform(-0.9, 0.9, size=(3 * count, 3))
    return Mesh(vertices, np.arange(3 * count).reshape(count, 3))


@pytest.mark.parametrize("seed", range(20))
def test_triangle_soup_depth_matches_brute_force(seed, front_ortho):
    mesh = _triangle_soup(seed)
    render = rasterize(Scene((mesh,)), front_ortho)
    expected = _brute_depth(mesh, front_ortho)
    covered = expected > 0
    assert (render.foreground != covered).sum() <= max(2, int(0.002 * covered.size))
    both = render.foreground & covered
    assert np.allclose(render.depth.data[both], expected[both], atol=1e-7)


@pytest.mark.parametrize("threads", range(1, 9))
def test_output_does_not_depend_on_thread_count(threads, two_spheres, front_ortho):
    soup = Scene((_triangle_soup(99),))
    for scene in (two_spheres, soup):
        one = rasterize(scene, front_ortho, render_parts=scene is two_spheres, threads=1)
        many = rasterize(scene, front_ortho, render_parts=scene is two_spheres, threads=threads)
        assert np.array_equal(one.face_index_map, many.face_index_map)
        assert np.array_equal(one.depth.data, many.depth.data)
        assert np.array_equal(one.normal.data, many.normal.data)


def test_instance_and_part_masks(two_spheres, front_ortho):
    render = rasterize(two_spheres, front_ortho, render_parts=True)
    ids = render.instance_map.data
    assert set(np.unique(ids)) == {0, 1, 2}
    # instance 1 is the sphere on the left (negative x)
    assert ids[32, 20] == 1 and ids[32, 44] == 2
    union = np.zeros(render.shape, dtype=bool)
    for (instance_id, _), mask in render.part_masks.items():
        assert not (union & mask.foreground()).any()
        assert np.all(ids[mask.foreground()] == instance_id)
        union |= mask.foreground()
    assert np.array_equal(union, render.foreground)


def test_front_face_normal_points_at_viewer(quad, front_ortho):
    centered = quad.with_vertices(quad.vertices - [0.5, 0.5, 0.0])
    render = rasterize(Scene((centered,)), front_ortho)
    fg = render.foreground
    assert fg.sum() == 32 * 32
    assert np.allclose(render.normal.data[fg], [0.0, 0.0, -1.0])
    assert np.all(render.normal_flip[fg] == 1.0)


def test_back_face_normal_is_flipped(quad, front_ortho):
    flipped = Mesh(quad.vertices - [0.5, 0.5, 0.0], quad.faces[:, ::-1])
    render = rasterize(Scene((flipped,)), front_ortho)
    fg = render.foreground
    assert np.allclose(render.normal.data[fg], [0.0, 0.0, -1.0])
    assert np.all(render.normal_flip[fg] == -1.0)


def test_faces_behind_near_plane_are_skipped(quad, front_persp):
    behind = quad.with_vertices(quad.vertices + [0.0, 0.0, 5.0])
    render = rasterize(Scene((behind,)), front_persp)
    assert not render.foreground.any()
    assert np.all(render.depth.data == BACKGROUND_DEPTH)


def test_rgb_defaults_to_gray_without_colors(make_sphere, front_ortho):
    render = rasterize(Scene((make_sphere(radius=0.5),)), front_ortho, render_rgb=True)
    assert np.allclose(render.rgb.data[render.foreground], 0.5)
    assert np.allclose(render.rgb.data[~render.foreground], 0.0)


def test_save_render_layout(tmp_path, two_spheres, front_ortho):
    render = rasterize(two_spheres, front_ortho, render_rgb=True, render_parts=True)
    out = save_render(render, tmp_path / "view_0")
    for name in ("depth.pfm", "normal.pfm", "instance.png", "faces.bin", "mask.png", "rgb.png"):
        assert (out / name).is_file()
    assert (out / "parts" / "instance_2_part_1.png").is_file()
    assert np.array_equal(mesh_io.read_int_grid(out / "faces.bin"), render.face_index_map)
    assert np.array_equal(mesh_io.read_png16(out / "instance.png"), render.instance_map.data)


def test_vertex_visibility_front_and_back(make_sphere, front_ortho):
    mesh = make_sphere(radius=0.5, rings=12, segments=24)
    visible = vertex_visibility(mesh, Scene((mesh,)), front_ortho, eps=0.05)
    front = mesh.vertices[:, 2] > 0.3
    back = mesh.vertices[:, 2] < -0.2
    assert visible[front].mean() > 0.9
    assert not visible[back].any()


def test_contact_vertices_and_mask(make_sphere, front_ortho):
    left = make_sphere((-0.3, 0.0, 0.0), 0.3, rings=10, segments=20, instance_id=1)
    right = make_sphere((0.305, 0.0, 0.0), 0.3, rings=10, segments=20, instance_id=2)
    scene = Scene((left, right))
    marks = contact_vertices(scene, 0.02)
    assert marks[1].any() and marks[2].any()
    assert np.all(left.vertices[marks[1], 0] > -0.05)
    mask = render_contact_mask(scene, front_ortho, 0.1)
    assert mask.foreground().any()
    assert not contact_vertices(scene, 0.001)[1].any()
