import logging

import numpy as np
import pytest

from canonical import build_rig, normalize_scene
from fixtures import two_person_scene
from mesh_core import ImageBuffer, InputError, Mesh, Scene
from rasterizer import rasterize, vertex_visibility
from texture import confidence_kernel, edge_confidence_mask, fill_unseen, fuse_texture, sample_bilinear


def _colored_sphere(make_sphere, colors=None):
    mesh = make_sphere(radius=0.6, rings=12, segments=24)
    if colors is None:
        colors = np.clip((mesh.vertices + 0.6) / 1.2, 0.0, 1.0)
    return Mesh(mesh.vertices, mesh.faces, np.broadcast_to(colors, mesh.vertices.shape))


def _rig_views(mesh, size=64, background=(0.0, 0.0, 0.0)):
    rig = build_rig(image_size=size)
    views = []
    for camera in rig.cameras:
        render = rasterize(Scene((mesh,)), camera, render_rgb=True, background=background)
        views.append((camera, render.rgb, render.depth))
    return views


def test_sample_bilinear_interpolates_between_centers():
    image = ImageBuffer.rgb(np.array([[[0.0] * 3, [1.0] * 3], [[0.0] * 3, [1.0] * 3]]))
    samples = sample_bilinear(image, np.array([[1.0, 1.0], [0.5, 0.5], [1.5, 0.5]]))
    assert np.allclose(samples[:, 0], [0.5, 0.0, 1.0])


def test_edge_confidence_mask_drops_depth_steps():
    depth = np.full((40, 40), 2.0)
    depth[:, 20:] = 2.5
    confident = edge_confidence_mask(ImageBuffer.depth(depth), dilate_kernel=5).foreground()
    assert not confident[:, 19:21].any()
    assert confident[20, 5] and confident[20, 35]


def test_uniform_color_survives_fusion(make_sphere):
    mesh = _colored_sphere(make_sphere, colors=[0.2, 0.4, 0.8])
    fused = fuse_texture(mesh.with_colors(None), _rig_views(mesh, background=(0.2, 0.4, 0.8)), dilate_kernel=3)
    assert np.allclose(fused.vertex_colors, [0.2, 0.4, 0.8], atol=1e-6)


def test_varying_color_survives_fusion(make_sphere):
    mesh = _colored_sphere(make_sphere)
    views = _rig_views(mesh)
    visibility = [vertex_visibility(mesh, Scene((mesh,)), camera, eps=0.05) for camera, _, _ in views]
    contributions = []
    fused = fuse_texture(mesh.with_colors(None), views, visibility, dilate_kernel=3, contributions=contributions)
    seen = sum(c.per_vertex_weight for c in contributions) > 0
    assert seen.mean() > 0.6
    error = np.abs(fused.vertex_colors[seen] - mesh.vertex_colors[seen]).mean()
    assert error < 0.03


def test_restore_hook_and_debug_output(tmp_path, make_sphere):
    mesh = _colored_sphere(make_sphere, colors=[1.0, 0.0, 0.0])
    views = _rig_views(mesh, size=32)

    def paint_blue(index, rgb):
        return ImageBuffer.rgb(np.broadcast_to([0.0, 0.0, 1.0], rgb.data.shape))

    fused = fuse_texture(mesh, views, dilate_kernel=3, restore_view=paint_blue, debug_dir=tmp_path)
    assert np.allclose(fused.vertex_colors, [0.0, 0.0, 1.0], atol=1e-6)
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"contribution_{i}.png" for i in range(6)]


def test_explicit_visibility_limits_samples(make_sphere):
    mesh = _colored_sphere(make_sphere, colors=[0.0, 1.0, 0.0])
    views = _rig_views(mesh, size=32)
    nobody = [np.zeros(mesh.vertex_count, dtype=bool)] * len(views)
    fused = fuse_texture(mesh, views, visibility=nobody, dilate_kernel=3)
    assert np.allclose(fused.vertex_colors, 0.5)
    with pytest.raises(InputError):
        fuse_texture(mesh, views, visibility=nobody[:2])
    with pytest.raises(InputError):
        fuse_texture(mesh, [])


def test_fill_unseen_walks_edges(quad):
    vertices = np.vstack([quad.vertices, [[9.0, 9.0, 9.0]]])
    mesh = Mesh(vertices, quad.faces)
    colors = np.zeros((5, 3))
    colors[0] = [1.0, 0.0, 0.0]
    seen = np.array([True, False, False, False, False])
    filled = fill_unseen(mesh, colors, seen)
    assert np.allclose(filled[:4], [1.0, 0.0, 0.0])
    # the isolated vertex has no path to a seen vertex
    assert np.allclose(filled[4], 0.5)


def test_confidence_kernel_scales_with_resolution():
    assert confidence_kernel(768) == 21
    assert confidence_kernel(160) == 5
    assert confidence_kernel(48) == 1
    assert confidence_kernel(1536) == 43
    assert all(confidence_kernel(size) % 2 == 1 for size in range(1, 2000, 7))
    with pytest.raises(InputError):
        confidence_kernel(0)


def test_small_renders_keep_every_part_colored(caplog):
    gt, _ = two_person_scene()
    canonical, _, _ = normalize_scene(gt)
    views = []
    for camera in build_rig(image_size=64).cameras:
        render = rasterize(canonical, camera, render_rgb=True)
        views.append((camera, render.rgb, render.depth))
    with caplog.at_level(logging.WARNING):
        fused = [fuse_texture(mesh.with_colors(None), views) for mesh in canonical.instances]
    assert "using gray" not in caplog.text
    for mesh, truth in zip(fused, canonical.instances):
        assert np.abs(mesh.vertex_colors - truth.vertex_colors).mean() < 0.15
