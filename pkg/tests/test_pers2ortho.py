import numpy as np
import pytest

from canonical import PARTIAL_VIEW_INDICES, build_rig, look_at
from mesh_core import Camera, ColoredPointCloud, ImageBuffer, InputError, Mesh, Scene, compute_face_normals
from pers2ortho import (
    PartialViewSet,
    depth_edge_filter,
    depth_to_mesh,
    depth_to_pointcloud,
    perspective_to_orthographic,
    refine_partial_geometry,
    reproject_pcd,
    save_partial_views,
    visible_point_select,
)
from rasterizer import rasterize
from spatial_index import TriangleBVH


def _red_sphere(make_sphere, radius=0.6):
    mesh = make_sphere(radius=radius, rings=12, segments=24)
    colors = np.tile([1.0, 0.0, 0.0], (mesh.vertex_count, 1))
    return Mesh(mesh.vertices, mesh.faces, colors)


def test_pointcloud_lies_on_rendered_surface(make_sphere, front_persp):
    mesh = _red_sphere(make_sphere)
    render = rasterize(Scene((mesh,)), front_persp, render_rgb=True)
    pcd = depth_to_pointcloud(render.depth, render.rgb, front_persp)
    assert len(pcd) == int(render.foreground.sum())
    hit = TriangleBVH(mesh.vertices, mesh.faces).query(pcd.points)
    assert hit.distance.max() < 1e-6
    assert np.allclose(pcd.colors, [1.0, 0.0, 0.0])
    row, col = pcd.source_pixel[0]
    assert render.foreground[row, col]


def test_pointcloud_rejects_size_mismatch(front_persp):
    depth = ImageBuffer.depth(np.ones((64, 64)))
    with pytest.raises(InputError):
        depth_to_pointcloud(depth, ImageBuffer.rgb(np.zeros((32, 32, 3))), front_persp)


def test_depth_to_mesh_faces_the_camera(front_persp):
    depth = np.full((64, 64), -1.0)
    depth[10:14, 20:24] = 2.0
    mesh = depth_to_mesh(ImageBuffer.depth(depth), front_persp)
    assert mesh.vertex_count == 16
    assert mesh.face_count == 18
    normals = compute_face_normals(mesh).normals
    assert np.all(normals @ front_persp.forward < 0)


def test_depth_to_mesh_breaks_at_jumps(front_persp):
    depth = np.full((64, 64), -1.0)
    depth[10:14, 20:22] = 2.0
    depth[10:14, 22:24] = 2.5
    mesh = depth_to_mesh(ImageBuffer.depth(depth), front_persp, max_jump=0.05)
    # the middle column of blocks straddles the jump
    assert mesh.face_count == 2 * 3 * 2


def test_depth_edge_filter_removes_discontinuity():
    depth = np.full((48, 48), 2.0)
    depth[:, 24:] = 3.0
    valid = depth_edge_filter(ImageBuffer.depth(depth), np.ones((48, 48), dtype=bool)).foreground()
    assert not valid[:, 22:26].any()
    assert valid[24, 8] and valid[24, 40]
    # erosion drops the image border
    assert not valid[0].any()


def test_depth_edge_filter_empty_after_erosion():
    mask = np.zeros((16, 16), dtype=bool)
    mask[5, 5] = True
    valid = depth_edge_filter(ImageBuffer.depth(np.where(mask, 2.0, -1.0)), mask)
    assert not valid.foreground().any()


def test_visible_point_select_drops_hidden_points(make_sphere, front_persp):
    mesh = make_sphere(radius=0.6)
    mesh_depth = rasterize(Scene((mesh,)), front_persp).depth
    front = np.array([[0.0, 0.0, 0.6], [0.1, 0.1, np.sqrt(0.36 - 0.02)]])
    back = np.array([[0.0, 0.0, -0.6]])
    pcd = ColoredPointCloud(np.vstack([front, back]), np.zeros((3, 3)))
    kept = visible_point_select(pcd, mesh_depth, front_persp, tau=0.02)
    assert len(kept) == 2
    assert np.allclose(kept.points, front)


def test_reproject_nearest_point_wins(front_ortho):
    points = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]])
    colors = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    rgb, mask = reproject_pcd(ColoredPointCloud(points, colors), front_ortho)
    assert mask.foreground().sum() == 1
    assert np.allclose(rgb.data[32, 32], [0.0, 1.0, 0.0])


def test_partial_view_set_checks_views():
    image = ImageBuffer.rgb(np.zeros((2, 2, 3)))
    with pytest.raises(InputError):
        PartialViewSet(partial_rgb={2: image}, visibility={2: ImageBuffer.mask(np.zeros((2, 2)))})
    with pytest.raises(InputError):
        PartialViewSet(partial_rgb={0: image})


def test_perspective_to_orthographic(tmp_path, make_sphere, front_persp):
    mesh = _red_sphere(make_sphere, radius=0.5)
    render = rasterize(Scene((mesh,)), front_persp, render_rgb=True)
    rig = build_rig(image_size=48, center=(0.0, 0.0, 0.0), scale=2.0)
    views = perspective_to_orthographic(render.rgb, render.depth, front_persp, Scene((mesh,)), rig)
    assert set(views.partial_rgb) == set(PARTIAL_VIEW_INDICES)
    assert len(views.smplx_normals) == 6
    front = views.visibility[0].foreground()
    assert front.sum() > 50
    assert np.allclose(views.partial_rgb[0].data[front], [1.0, 0.0, 0.0])
    assert np.allclose(views.partial_rgb[0].data[~front], 0.0)

    written = save_partial_views(views, rig, tmp_path)
    assert (tmp_path / "view_0" / "rgb.png").is_file()
    assert (tmp_path / "view_180" / "normal.pfm").is_file()
    assert not (tmp_path / "view_180" / "rgb.png").exists()
    assert len(written) == 6


def test_refine_partial_geometry_reduces_loss(make_sphere, front_persp):
    target = make_sphere(radius=0.6, rings=10, segments=16)
    render = rasterize(Scene((target,)), front_persp)
    start = target.with_vertices(target.vertices * [1.0, 1.0, 0.8])
    trace = []
    refined = refine_partial_geometry(start, render.depth, render.normal, front_persp,
                                      iters=30, lr=0.005, loss_trace=trace)
    assert len(trace) == 31
    assert min(trace) < trace[0]
    assert refined.vertex_count == start.vertex_count


def test_refine_partial_geometry_edge_cases(make_sphere, front_persp, quad):
    target = make_sphere(radius=0.6, rings=8, segments=12)
    render = rasterize(Scene((target,)), front_persp)
    unchanged = refine_partial_geometry(target, render.depth, render.normal, front_persp, iters=0)
    assert np.array_equal(unchanged.vertices, target.vertices)
    tiny = Mesh(quad.vertices[:3], quad.faces[:1])
    with pytest.raises(InputError):
        refine_partial_geometry(tiny, render.depth, render.normal, front_persp)


def _tiled_plane(tiles=16, size=1.0, tilt=0.0, seed=0):
    """Square in z=0 facing +Z made of separate tiles, one random color each; tilt raises z along x."""
    rng = np.random.default_rng(seed)
    step = size / tiles
    vertices, faces, colors = [], [], []
    for i in range(tiles):
        for j in range(tiles):
            x0, y0 = -size / 2.0 + i * step, -size / 2.0 + j * step
            base = len(vertices)
            for x, y in ((x0, y0), (x0 + step, y0), (x0 + step, y0 + step), (x0, y0 + step)):
                vertices.append([x, y, tilt * (x + size / 2.0)])
            faces += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
            colors += [rng.random(3)] * 4
    return Mesh(np.array(vertices), np.array(faces), np.array(colors))


def _close_camera():
    rotation, translation = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0))
    # 197 px focal length keeps pixel centers off the tile borders
    return Camera.perspective(rotation, translation, 128, 128, 197.0, 197.0)


def test_textured_plane_lands_on_the_right_pixels():
    # 32 px front view: every tile covers exactly one pixel
    plane = Scene((_tiled_plane(),))
    camera = _close_camera()
    observed = rasterize(plane, camera, render_rgb=True)
    rig = build_rig(image_size=32)
    views = perspective_to_orthographic(observed.rgb, observed.depth, camera, plane, rig)
    hit = views.visibility[0].foreground()
    assert hit.sum() > 150
    expected = rasterize(plane, rig.cameras[0], render_rgb=True).rgb.data
    correct = np.all(np.abs(views.partial_rgb[0].data - expected) < 1e-6, axis=2)
    assert correct[hit].mean() >= 0.99


def test_larger_tau_keeps_more_points():
    observed_scene = Scene((_tiled_plane(),))
    tilted = Scene((_tiled_plane(tilt=0.06),))
    camera = _close_camera()
    observed = rasterize(observed_scene, camera, render_rgb=True)
    rig = build_rig(image_size=32)
    counts = []
    for tau in (0.005, 0.01, 0.02, 0.05):
        views = perspective_to_orthographic(observed.rgb, observed.depth, camera, tilted, rig, tau=tau)
        counts.append(int(views.visibility[0].foreground().sum()))
    assert counts == sorted(counts)
    assert counts[0] < counts[-1]
