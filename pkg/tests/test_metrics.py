import math

import numpy as np
import pandas as pd
import pytest

from canonical import orbit_cameras
from mesh_core import ImageBuffer, InputError, Mesh, Scene
from spatial_index import closest_point_on_triangles
from metrics import (
    METRIC_KEYS,
    MetricReport,
    SampledSurface,
    bbox_iou,
    chamfer,
    contact_precision,
    evaluate,
    fscore,
    l2_normal_error,
    normal_consistency,
    normal_map_l2,
    occlusion_masks,
    p2s,
    psnr,
    sample_surface,
    ssim,
)


def _box(lo, hi):
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return Mesh(corners, np.array([[0, 1, 2], [5, 6, 7]]))


def _touching_pair(make_sphere, gap=0.005):
    return Scene((
        make_sphere((-0.3 - gap / 2.0, 0.0, 0.0), 0.3, rings=10, segments=20, instance_id=1),
        make_sphere((0.3 + gap / 2.0, 0.0, 0.0), 0.3, rings=10, segments=20, instance_id=2),
    ))


def test_chamfer_in_centimeters():
    origin = np.zeros((1, 3))
    shifted = np.array([[0.01, 0.0, 0.0]])
    assert chamfer(origin, shifted) == pytest.approx(2.0)
    assert chamfer(origin, shifted, mean=True) == pytest.approx(1.0)
    assert chamfer(origin, origin) == 0.0
    with pytest.raises(InputError):
        chamfer(np.zeros((0, 3)), origin)


def test_point_to_surface(quad):
    points = np.array([[0.25, 0.25, 0.03]])
    assert p2s(points, quad) == pytest.approx(3.0)
    assert p2s(points, quad, squared=True) == pytest.approx(9.0)


def test_fscore_partial_precision():
    predicted = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    truth = np.zeros((1, 3))
    assert fscore(predicted, truth, tau=1.0) == pytest.approx(200.0 / 3.0)
    assert fscore(truth, truth) == pytest.approx(100.0)
    assert fscore(predicted[1:], truth) == 0.0


def test_bbox_iou():
    assert bbox_iou(_box([0, 0, 0], [1, 1, 1]), _box([0.5, 0, 0], [1.5, 1, 1])) == pytest.approx(1.0 / 3.0)
    assert bbox_iou(_box([0, 0, 0], [1, 1, 1]), _box([2, 2, 2], [3, 3, 3])) == 0.0
    flat = _box([0, 0, 0], [1, 1, 0])
    assert bbox_iou(flat, flat) == 1.0


def test_normal_consistency_sign(quad):
    samples = sample_surface(quad, 200, seed=1)
    assert normal_consistency(samples, samples) == pytest.approx(1.0)
    flipped = SampledSurface(samples.points, -samples.normals)
    assert normal_consistency(samples, flipped) == pytest.approx(-1.0)


def test_sample_surface_is_seeded_and_on_mesh(quad):
    a = sample_surface(quad, 500, seed=3)
    b = sample_surface(quad, 500, seed=3)
    assert np.array_equal(a.points, b.points)
    assert np.all((a.points[:, :2] >= 0.0) & (a.points[:, :2] <= 1.0))
    assert np.allclose(a.points[:, 2], 0.0)
    assert np.allclose(a.normals, [0.0, 0.0, 1.0])
    with pytest.raises(InputError):
        sample_surface(quad, 0)


def test_psnr_reference_values():
    a = np.full((8, 8, 3), 100, dtype=np.uint8)
    assert psnr(a, a + 1) == pytest.approx(48.1308, abs=1e-3)
    assert psnr(np.zeros((4, 4), dtype=np.uint8), np.full((4, 4), 255, dtype=np.uint8)) == pytest.approx(0.0)
    assert psnr(a, a) == math.inf
    mask = np.zeros((8, 8), dtype=bool)
    mask[0, 0] = True
    b = a.copy()
    b[1:, :] = 0
    assert psnr(a, b, mask) == math.inf
    with pytest.raises(InputError):
        psnr(a, b, np.zeros((8, 8), dtype=bool))


def test_ssim_reference_values():
    checker = ((np.indices((32, 32)) // 4).sum(axis=0) % 2 * 255).astype(np.uint8)
    assert ssim(checker, checker) == pytest.approx(1.0)
    assert ssim(checker, 255 - checker) < 0.0
    rgb = np.random.default_rng(0).random((32, 32, 3))
    region = np.zeros((32, 32), dtype=bool)
    region[8:24, 8:24] = True
    assert ssim(rgb, rgb, region) == pytest.approx(1.0)


def test_normal_map_l2_counts_union():
    up = np.zeros((2, 2, 3))
    up[0, 0] = [0.0, 0.0, 1.0]
    down = -up
    total, count = normal_map_l2(ImageBuffer.normal(up), ImageBuffer.normal(down))
    assert (total, count) == (pytest.approx(4.0), 1)
    other = np.zeros((2, 2, 3))
    other[1, 1] = [1.0, 0.0, 0.0]
    total, count = normal_map_l2(ImageBuffer.normal(up), ImageBuffer.normal(other))
    assert (total, count) == (pytest.approx(2.0), 2)


def test_l2_normal_error_zero_for_same_mesh(make_sphere):
    sphere = make_sphere(radius=0.5, rings=8, segments=12)
    views = orbit_cameras([0.0, 90.0], image_size=24)
    assert l2_normal_error(sphere, sphere, views) == pytest.approx(0.0)
    shifted = sphere.with_vertices(sphere.vertices + [0.3, 0.0, 0.0])
    assert l2_normal_error(sphere, shifted, views) > 0.1


def test_contact_precision(make_sphere):
    touching = _touching_pair(make_sphere)
    assert contact_precision(touching, touching) == pytest.approx(1.0)
    apart = _touching_pair(make_sphere, gap=0.2)
    assert contact_precision(apart, touching) == 0.0
    assert contact_precision(touching, apart) == 0.0
    with pytest.raises(InputError):
        contact_precision(touching.only(1), touching)


def test_evaluate_identical_scenes(make_sphere):
    scene = _touching_pair(make_sphere)
    report = evaluate(scene, scene, n_samples=2000, resolution=32)
    values = report.scene
    assert set(values) == set(METRIC_KEYS)
    assert values["cd_cm"] == pytest.approx(0.0)
    assert values["p2s_cm"] == pytest.approx(0.0, abs=1e-6)
    assert values["nc"] == pytest.approx(1.0)
    assert values["fscore"] == pytest.approx(100.0)
    assert values["bbox_iou"] == pytest.approx(1.0)
    assert values["norm_l2"] == pytest.approx(0.0)
    assert values["cp"] == pytest.approx(1.0)
    assert values["psnr"] == math.inf
    assert values["ssim"] == pytest.approx(1.0)
    # the side views put one sphere behind the other
    assert values["occ_norm_l2"] == pytest.approx(0.0)
    assert values["occ_psnr"] == math.inf
    assert sorted(report.instances) == [1, 2]
    assert math.isnan(report.instances[1]["cp"])


def test_evaluate_detects_shift(make_sphere):
    scene = _touching_pair(make_sphere)
    moved = scene.with_vertices(scene.merged().vertices + [0.0, 0.02, 0.0])
    report = evaluate(moved, scene, n_samples=2000, resolution=32)
    assert report.scene["cd_cm"] > 1.0
    assert report.scene["bbox_iou"] < 1.0
    assert report.scene["psnr"] < math.inf


def test_evaluate_needs_shared_instances(make_sphere):
    first = Scene((make_sphere(instance_id=1),))
    second = Scene((make_sphere(instance_id=2),))
    with pytest.raises(InputError):
        evaluate(first, second)


def test_metric_report_files(tmp_path):
    scene = {key: 1.0 for key in METRIC_KEYS}
    scene["psnr"] = math.inf
    scene["cp"] = math.nan
    report = MetricReport(scene, {1: dict(scene)})
    json_path, csv_path = report.save(tmp_path)
    loaded = MetricReport.load(json_path)
    assert loaded.scene["psnr"] == math.inf
    assert math.isnan(loaded.scene["cp"])
    assert loaded.instances[1]["nc"] == 1.0
    frame = pd.read_csv(csv_path)
    assert list(frame.columns) == ["level", *METRIC_KEYS]
    assert list(frame["level"]) == ["scene", "instance_1"]
    assert "instance_1" in report.table()


def test_occlusion_masks_mark_pixels_owned_by_others():
    owner = np.array([[1, 1, 2, 0]])
    amodal = {1: np.array([[True, True, True, False]]), 2: np.array([[False, True, True, True]])}
    masks = occlusion_masks(amodal, ImageBuffer.instance(owner))
    assert masks[1].data.tolist() == [[False, False, True, False]]
    assert masks[2].data.tolist() == [[False, True, False, False]]


def _pairwise(p, q):
    return np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)


def _cloud_scene(rng, offset, count=60):
    first = rng.uniform(0.0, 0.1, size=(count, 3))
    second = rng.uniform(0.0, 0.1, size=(count, 3)) + [offset, 0.0, 0.0]
    face = np.array([[0, 1, 2]])
    return Scene((Mesh(first, face, instance_id=1), Mesh(second, face, instance_id=2)))


def test_chamfer_and_fscore_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(5):
        p = rng.uniform(-0.05, 0.05, size=(150, 3))
        q = rng.uniform(-0.05, 0.05, size=(120, 3)) + rng.normal(scale=0.005, size=3)
        d = _pairwise(p, q)
        forward, backward = d.min(axis=1), d.min(axis=0)
        assert chamfer(p, q) == pytest.approx(100.0 * (forward.mean() + backward.mean()))
        assert chamfer(p, q, mean=True) == pytest.approx(50.0 * (forward.mean() + backward.mean()))
        precision = 100.0 * (forward < 0.01).mean()
        recall = 100.0 * (backward < 0.01).mean()
        expected = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
        assert fscore(p, q, tau=1.0) == pytest.approx(expected)


def test_point_to_surface_matches_brute_force(make_sphere):
    mesh = make_sphere(radius=0.4, rings=8, segments=12)
    points = np.random.default_rng(5).uniform(-0.6, 0.6, size=(200, 3))
    best = np.full(len(points), np.inf)
    for face in mesh.faces:
        a, b, c = (np.repeat(mesh.vertices[i][None], len(points), axis=0) for i in face)
        near, _, _ = closest_point_on_triangles(points, a, b, c)
        best = np.minimum(best, np.linalg.norm(points - near, axis=1))
    assert p2s(points, mesh) == pytest.approx(100.0 * best.mean(), rel=1e-6)
    assert p2s(points, mesh, squared=True) == pytest.approx(1e4 * (best ** 2).mean(), rel=1e-6)


def test_normal_consistency_matches_brute_force():
    rng = np.random.default_rng(8)

    def unit(n):
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    P = SampledSurface(rng.uniform(size=(90, 3)), unit(90))
    Q = SampledSurface(rng.uniform(size=(70, 3)), unit(70))
    d = _pairwise(P.points, Q.points)
    forward = np.sum(P.normals * Q.normals[d.argmin(axis=1)], axis=1).mean()
    backward = np.sum(Q.normals * P.normals[d.argmin(axis=0)], axis=1).mean()
    assert normal_consistency(P, Q) == pytest.approx(0.5 * (forward + backward))


def test_contact_precision_matches_brute_force():
    rng = np.random.default_rng(21)
    delta = 0.03
    for _ in range(5):
        pred = _cloud_scene(rng, 0.08)
        gt = _cloud_scene(rng, 0.08)

        def contacts(scene):
            d = _pairwise(scene.instances[0].vertices, scene.instances[1].vertices)
            return np.concatenate([d.min(axis=1) < delta, d.min(axis=0) < delta])

        pred_contacts, gt_contacts = contacts(pred), contacts(gt)
        pred_vertices = np.concatenate([m.vertices for m in pred.instances])
        gt_vertices = np.concatenate([m.vertices for m in gt.instances])
        nearest = _pairwise(pred_vertices[pred_contacts], gt_vertices).argmin(axis=1)
        expected = gt_contacts[nearest].mean() if pred_contacts.any() else 0.0
        assert contact_precision(pred, gt, delta=delta) == pytest.approx(expected)


def test_sample_surface_is_area_weighted():
    # the second triangle has six times the area of the first
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    mesh = Mesh(vertices, np.array([[0, 1, 2], [1, 3, 4]]))
    samples = sample_surface(mesh, 20000, seed=2)
    in_first = samples.points.sum(axis=1) <= 1.0
    assert in_first.mean() == pytest.approx(0.5 / (0.5 + 3.0), abs=0.02)
    assert np.allclose(samples.normals, [0.0, 0.0, 1.0])
