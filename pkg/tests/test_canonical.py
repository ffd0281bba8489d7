import numpy as np
import pytest

import mesh_io
from canonical import (
    EVAL_AZIMUTHS,
    RIG_AZIMUTHS,
    SILHOUETTE_TEMPLATES,
    build_rig,
    denormalize_scene,
    dilate_mask,
    erode_mask,
    fill_mask_holes,
    load_rig,
    look_at,
    normalize_scene,
    orbit_cameras,
    save_rig,
    simulate_occlusion_mask,
)
from mesh_core import InputError, Scene


def test_normalize_scene_fits_cube_and_inverts(two_spheres):
    normalized, center, scale = normalize_scene(two_spheres)
    vertices = normalized.merged().vertices
    assert np.abs(vertices).max() <= 1.0
    # the longest extent (1.3 m in x) maps to 2 / 1.05
    assert vertices[:, 0].max() - vertices[:, 0].min() == pytest.approx(2.0 / 1.05)
    assert np.allclose(center, 0.0, atol=1e-12)
    assert scale == pytest.approx(1.3 * 1.05)
    back = denormalize_scene(normalized, center, scale)
    assert np.allclose(back.merged().vertices, two_spheres.merged().vertices)


def test_normalize_rejects_degenerate_scene(quad):
    flat_point = quad.with_vertices(np.zeros((4, 3)))
    with pytest.raises(InputError):
        normalize_scene(Scene((flat_point,)))


def test_jittered_normalization_is_seeded(two_spheres):
    _, c1, _ = normalize_scene(two_spheres, jitter=0.1, seed=4)
    _, c2, _ = normalize_scene(two_spheres, jitter=0.1, seed=4)
    assert np.array_equal(c1, c2)
    assert c1[2] == 0.0


def test_look_at_axes():
    rotation, translation = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0))
    assert np.allclose(rotation @ rotation.T, np.eye(3))
    assert np.allclose(rotation[2], [0.0, 0.0, -1.0])
    assert np.allclose(-rotation.T @ translation, [0.0, 0.0, 3.0])
    with pytest.raises(InputError):
        look_at((0.0, 3.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(InputError):
        look_at((1.0, 1.0, 1.0), (1.0, 1.0, 1.0))


def test_rig_cameras_orbit_the_origin():
    rig = build_rig(image_size=32)
    assert rig.azimuths == RIG_AZIMUTHS
    assert rig.resolution == 32
    for camera, azimuth in zip(rig.cameras, rig.azimuths):
        a = np.radians(azimuth)
        assert np.allclose(camera.center, 3.0 * np.array([np.sin(a), 0.0, np.cos(a)]))
        assert np.allclose(camera.forward, -camera.center / 3.0)
        uv, depth = camera.project(np.zeros((1, 3)))
        assert np.allclose(uv, [[16.0, 16.0]])
        assert depth[0] == pytest.approx(3.0)
    # at azimuth 90 the camera sits on +X and world +Z points left in the image
    uv, _ = rig.view(90.0).project(np.array([[0.0, 0.0, 0.5]]))
    assert uv[0, 0] < 16.0


def test_orbit_cameras_elevation_and_distance():
    camera = orbit_cameras([0.0], distance=2.0, image_size=8, elevation_deg=30.0)[0]
    assert np.allclose(camera.center, 2.0 * np.array([0.0, 0.5, np.sqrt(3.0) / 2.0]))
    assert len(orbit_cameras(EVAL_AZIMUTHS, image_size=8)) == 4
    with pytest.raises(InputError):
        orbit_cameras([0.0], distance=0.0)


def test_rig_json(tmp_path):
    rig = build_rig(image_size=16, center=(0.1, 0.2, 0.3), scale=1.5)
    save_rig(rig, tmp_path / "rig.json")
    loaded = load_rig(tmp_path / "rig.json")
    assert loaded.azimuths == rig.azimuths
    assert np.allclose(loaded.center, [0.1, 0.2, 0.3])
    assert loaded.scale == 1.5
    assert np.allclose(loaded.view(315.0).rotation, rig.view(315.0).rotation)


def test_dilate_and_erode_are_square():
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 4] = True
    grown = dilate_mask(mask, 3).foreground()
    assert grown.sum() == 9 and grown[3:6, 3:6].all()
    assert erode_mask(grown, 3).foreground().sum() == 1
    assert np.array_equal(dilate_mask(mask, 1).foreground(), mask)
    with pytest.raises(InputError):
        dilate_mask(mask, 4)


def test_fill_mask_holes():
    ring = np.ones((5, 5), dtype=bool)
    ring[2, 2] = False
    assert fill_mask_holes(ring).foreground().all()


@pytest.mark.parametrize("kind", ["silhouette", "freeform"])
def test_occlusion_mask_is_deterministic(kind):
    first = simulate_occlusion_mask(64, kind=kind, rng_seed=7)
    second = simulate_occlusion_mask(64, kind=kind, rng_seed=7)
    assert first.shape == (64, 64)
    assert np.array_equal(first.data, second.data)
    assert first.foreground().any()


def test_occlusion_silhouette_scale_is_clamped():
    small = simulate_occlusion_mask(128, rng_seed=1, scale=0.1, dilate_kernel=1)
    clamped = simulate_occlusion_mask(128, rng_seed=1, scale=0.4, dilate_kernel=1)
    assert np.array_equal(small.data, clamped.data)
    with pytest.raises(InputError):
        simulate_occlusion_mask(32, kind="spray")


def test_occlusion_mask_from_template_folder(tmp_path):
    template = np.zeros((20, 10), dtype=bool)
    template[2:18, 3:7] = True
    mesh_io.write_mask(tmp_path / "figure.png", template)
    mask = simulate_occlusion_mask((64, 48), rng_seed=3, scale=0.5, template_dir=tmp_path, dilate_kernel=1)
    assert mask.shape == (64, 48)
    assert mask.foreground().any()


def test_builtin_silhouettes_cover_several_poses():
    assert len(SILHOUETTE_TEMPLATES) >= 5
    for capsules in SILHOUETTE_TEMPLATES.values():
        assert all(len(capsule) == 5 and capsule[4] > 0 for capsule in capsules)
    areas = [simulate_occlusion_mask(96, rng_seed=seed).foreground().mean() for seed in range(20)]
    assert min(areas) > 0.0
    assert max(areas) < 1.0
