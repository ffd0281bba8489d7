import json
import logging

import numpy as np
import pandas as pd
import pytest

import mesh_io
from hug_cli import EXIT_INPUT, EXIT_OK, main


@pytest.fixture(scope="module")
def fixture_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    assert main(["make-fixture", "--out", str(root), "--resolution", "48", "--iters", "3"]) == EXIT_OK
    return root / "config.json"


def test_make_fixture_layout(fixture_config):
    root = fixture_config.parent
    config = json.loads(fixture_config.read_text())
    assert config["resolution"] == 48
    assert config["optimization"]["iters"] == 3
    for name in ("gt/instance_1.ply", "init/instance_2.ply", "input/depth.pfm", "input/camera.json",
                 "targets/view_0/normal.pfm", "targets/view_90/instance_1/normal.pfm", "joints.json"):
        assert (root / name).is_file(), name
    assert list((root / "targets" / "view_0" / "parts").glob("instance_*_part_*.png"))


def test_pipeline_commands(fixture_config):
    root = fixture_config.parent
    out = root / "out"
    config = ["--config", str(fixture_config)]

    assert main(["pers2ortho", *config]) == EXIT_OK
    assert (out / "view_0" / "rgb.png").is_file()
    assert (out / "rig.json").is_file()

    assert main(["refine", *config, "--plot"]) == EXIT_OK
    trace = pd.read_csv(out / "loss_trace.csv")
    assert len(trace) == 4
    assert {"L_normal", "L_vis", "L_pen", "L_total", "min_distance"} <= set(trace.columns)
    assert (out / "loss_trace.png").is_file()
    refined = mesh_io.load_ply(out / "mesh" / "instance_1.ply")
    assert refined.part_labels is not None

    assert main(["fuse-texture", *config]) == EXIT_OK
    textured = mesh_io.load_ply(out / "textured" / "instance_2.ply")
    assert textured.vertex_colors is not None

    assert main(["evaluate", *config]) == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["scene"]["cd_cm"] < 5.0
    assert (out / "metrics.csv").is_file()


def test_partial_refinement_writes_partial_mesh(fixture_config, tmp_path):
    args = ["pers2ortho", "--config", str(fixture_config), "--refine-partial", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert (tmp_path / "partial_mesh.ply").is_file()


def test_corrupt_depth_is_an_input_error(fixture_config, tmp_path):
    broken = tmp_path / "depth.pfm"
    broken.write_bytes(b"Pf\n48 48\n-1.0\n\x00\x00")
    args = ["pers2ortho", "--config", str(fixture_config), "--depth", str(broken), "--out", str(tmp_path)]
    assert main(args) == EXIT_INPUT


def test_missing_input_is_an_input_error(tmp_path):
    assert main(["refine", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["refine", "--mesh", str(tmp_path / "nowhere.ply"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_compose_command(tmp_path):
    mesh_io.write_latent(tmp_path / "group.latent", np.zeros((4, 4, 1)))
    mesh_io.write_latent(tmp_path / "person.latent", np.full((4, 4, 1), 10.0))
    mesh_io.write_latent(tmp_path / "wide.latent", np.full((8, 8, 1), 10.0))
    mask = np.zeros((32, 32), dtype=bool)
    mask[:, :16] = True
    mesh_io.write_mask(tmp_path / "person.png", mask)

    base = ["compose", "--latent", str(tmp_path / "group.latent"), "--mask", str(tmp_path / "person.png"),
            "--alpha", "0.8", "--out", str(tmp_path)]
    assert main([*base, "--instance-latent", str(tmp_path / "person.latent")]) == EXIT_OK
    composed = mesh_io.read_latent(tmp_path / "composed.latent")
    assert np.allclose(composed[:, :2], 8.0)
    assert np.allclose(composed[:, 2:], 0.0)

    assert main([*base, "--instance-latent", str(tmp_path / "wide.latent")]) == EXIT_INPUT


def test_rig_and_render_commands(fixture_config, tmp_path):
    config = ["--config", str(fixture_config), "--out", str(tmp_path)]
    assert main(["rig", *config]) == EXIT_OK
    rig = json.loads((tmp_path / "rig.json").read_text())
    assert len(rig) == 6
    assert main(["render", *config, "--azimuth", "0", "180"]) == EXIT_OK
    assert (tmp_path / "render" / "view_180" / "normal.pfm").is_file()


def test_shipped_fixture_refines_past_the_initial_meshes(tmp_path, caplog):
    assert main(["make-fixture", "--out", str(tmp_path)]) == EXIT_OK
    config = ["--config", str(tmp_path / "config.json")]
    out = tmp_path / "out"

    assert main(["refine", *config]) == EXIT_OK
    with caplog.at_level(logging.WARNING):
        assert main(["fuse-texture", *config]) == EXIT_OK
    assert "using gray" not in caplog.text

    assert main(["evaluate", *config]) == EXIT_OK
    refined = json.loads((out / "metrics.json").read_text())["scene"]
    init_meshes = [str(tmp_path / "init" / f"instance_{k}.ply") for k in (1, 2)]
    assert main(["evaluate", *config, "--mesh", *init_meshes, "--out", str(tmp_path / "init_eval")]) == EXIT_OK
    initial = json.loads((tmp_path / "init_eval" / "metrics.json").read_text())["scene"]
    assert refined["cd_cm"] < initial["cd_cm"]
    assert refined["norm_l2"] < initial["norm_l2"]
