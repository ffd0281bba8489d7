import numpy as np
import pytest

import mesh_io
from fixtures import CONTACT_RADIUS, capsule, load_joints, two_person_scene, write_fixture
from hug_config import resolve_threads
from mesh_core import InputError, Mesh, compute_face_normals
from pipeline_config import PipelineConfig
from refine import contact_pairs_from_meshes


def test_unknown_keys_are_rejected():
    with pytest.raises(InputError):
        PipelineConfig.from_dict({"meshs": ["a.ply"]})
    with pytest.raises(InputError):
        PipelineConfig.from_dict({"optimization": {"lambda": 1.0}})
    with pytest.raises(InputError):
        PipelineConfig(alpha=1.5)


def test_paths_resolve_against_config_folder(tmp_path):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "camera.json").write_text("{}")
    mesh_io.save_json({"camera": "data/camera.json", "meshes": "data/a.ply", "out": "run"},
                      tmp_path / "config.json")
    config = PipelineConfig.from_dict(mesh_io.load_json(tmp_path / "config.json"), tmp_path)
    assert config.camera == tmp_path / "data" / "camera.json"
    assert config.meshes == [tmp_path / "data" / "a.ply"]
    assert config.out == tmp_path / "run"
    # the mesh file does not exist
    with pytest.raises(InputError):
        PipelineConfig.load(tmp_path / "config.json")


def test_overrides_apply_on_top_of_file(tmp_path):
    mesh_io.save_json({"resolution": 64, "optimization": {"iters": 10}}, tmp_path / "config.json")
    config = PipelineConfig.load(tmp_path / "config.json", {"iters": 2, "alpha": 0.5, "seed": None})
    assert config.optimization.iters == 2
    assert config.optimization.resolution == 64
    assert config.alpha == 0.5
    assert config.seed == 0
    with pytest.raises(InputError):
        config.require("meshes")


def test_env_controls_defaults(monkeypatch):
    monkeypatch.setenv("HUG_GEOM_RESOLUTION", "96")
    assert PipelineConfig().render_resolution == 96
    monkeypatch.setenv("HUG_GEOM_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("HUG_GEOM_THREADS", "many")
    assert resolve_threads() >= 1


def test_capsule_is_closed_and_outward():
    vertices, faces = capsule((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 0.2)
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)

    mesh = Mesh(vertices, faces)
    centers = vertices[faces].mean(axis=1) - [0.0, 0.5, 0.0]
    assert np.all((compute_face_normals(mesh).normals * centers).sum(axis=1) > 0)


def test_two_person_scene_has_a_contact():
    scene, joints = two_person_scene()
    assert [m.instance_id for m in scene.instances] == [1, 2]
    assert joints.shape == (6, 3)
    pairs = contact_pairs_from_meshes(scene, CONTACT_RADIUS)
    assert len(pairs) >= 1


def test_write_fixture_round_trips(tmp_path):
    config_path = write_fixture(tmp_path, resolution=24, iters=2, samples=500)
    config = PipelineConfig.load(config_path)
    assert config.render_resolution == 24
    assert config.optimization.iters == 2
    assert config.optimization.contact_radius == CONTACT_RADIUS
    assert len(config.meshes) == 2
    assert load_joints(config.joints).shape == (6, 3)
    assert mesh_io.load_camera(config.camera).is_perspective
