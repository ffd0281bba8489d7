"""
Synthetic two-person scene for smoke runs and tests.

Each person is a set of capsules (head, torso, two arms, two legs) with a
body-part label per vertex. The two people stand side by side with their
inner hands almost touching, so they form a contact pair and hide each other
in the side views.
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

import mesh_io
from canonical import build_rig, look_at, normalize_scene, transform_scene
from mesh_core import Camera, Mesh, Scene, compute_vertex_normals
from rasterizer import rasterize, save_render

PART_NAMES = ("head", "torso", "left_arm", "right_arm", "left_leg", "right_leg")
PART_COLORS = np.array([
    [0.93, 0.76, 0.62],
    [0.20, 0.45, 0.80],
    [0.85, 0.30, 0.25],
    [0.85, 0.55, 0.20],
    [0.25, 0.60, 0.35],
    [0.45, 0.30, 0.60],
])
PERSON_SPACING = 0.95
INPUT_DISTANCE = 3.5
INPUT_FOCAL = 1.2
# hands sit 1 cm apart; vertex spacing on the arm capsules is about 3 cm
CONTACT_RADIUS = 0.04


def capsule(p0, p1, radius: float, rings: int = 3, segments: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """Closed capsule around the segment p0-p1 with outward-facing triangles."""
    p0, p1 = np.asarray(p0, dtype=np.float64), np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length if length > 1e-12 else np.array([0.0, 1.0, 0.0])
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    u = np.cross(helper, axis)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)

    phi = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    around = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w
    top = np.linspace(0.0, 0.5 * np.pi, rings + 1)[1:]
    bottom = np.linspace(0.5 * np.pi, np.pi, rings + 1)[:-1]
    ring_list = [p1 + radius * (np.sin(t) * around + np.cos(t) * axis) for t in top]
    ring_list += [p0 + radius * (np.sin(t) * around + np.cos(t) * axis) for t in bottom]

    vertices = [p1 + radius * axis] + [v for ring in ring_list for v in ring] + [p0 - radius * axis]
    n_rings = len(ring_list)
    last = 1 + n_rings * segments
    faces = []
    for j in range(segments):
        k = (j + 1) % segments
        faces.append([0, 1 + j, 1 + k])
        faces.append([last, 1 + (n_rings - 1) * segments + k, 1 + (n_rings - 1) * segments + j])
        for r in range(n_rings - 1):
            a, b = 1 + r * segments, 1 + (r + 1) * segments
            faces.append([a + j, b + j, a + k])
            faces.append([a + k, b + j, b + k])
    return np.array(vertices), np.array(faces, dtype=np.int64)


def _skeleton(x: float, facing_right: bool):
    """Capsule endpoints and radii per part, plus hand and head joints."""
    inner = 1.0 if facing_right else -1.0
    reach = 0.42
    parts = [
        ((x, 1.62, 0.0), (x, 1.70, 0.0), 0.10),
        ((x, 0.95, 0.0), (x, 1.40, 0.0), 0.15),
        ((x + 0.20 * inner, 1.40, 0.0), (x + reach * inner, 1.05, 0.05), 0.05),
        ((x - 0.20 * inner, 1.40, 0.0), (x - 0.35 * inner, 0.95, -0.05), 0.05),
        ((x + 0.09, 0.10, 0.0), (x + 0.09, 0.90, 0.0), 0.07),
        ((x - 0.09, 0.10, 0.0), (x - 0.09, 0.90, 0.0), 0.07),
    ]
    joints = [(x, 1.66, 0.0), parts[2][1], parts[3][1]]
    return parts, joints


def capsule_person(x: float, instance_id: int, facing_right: bool = True) -> Tuple[Mesh, List]:
    parts, joints = _skeleton(x, facing_right)
    vertices, faces, labels = [], [], []
    offset = 0
    for label, (p0, p1, radius) in enumerate(parts):
        v, f = capsule(p0, p1, radius)
        vertices.append(v)
        faces.append(f + offset)
        labels.append(np.full(len(v), label, dtype=np.int64))
        offset += len(v)
    vertices = np.concatenate(vertices)
    labels = np.concatenate(labels)
    shade = 0.75 + 0.25 * np.clip(vertices[:, 1] / 1.8, 0.0, 1.0)
    colors = np.clip(PART_COLORS[labels] * shade[:, None], 0.0, 1.0)
    return Mesh(vertices, np.concatenate(faces), colors, labels, instance_id), joints


def two_person_scene() -> Tuple[Scene, np.ndarray]:
    """Ground-truth scene (meters) and its hand/head joints."""
    first, joints_a = capsule_person(0.0, 1, facing_right=True)
    second, joints_b = capsule_person(PERSON_SPACING, 2, facing_right=False)
    return Scene((first, second)), np.array(joints_a + joints_b, dtype=np.float64)


def perturb_scene(scene: Scene, sigma: float = 0.01, seed: int = 0) -> Scene:
    """Move every vertex along its normal by N(0, sigma) meters and drop colors."""
    rng = np.random.default_rng(seed)
    meshes = []
    for mesh in scene.instances:
        normals = compute_vertex_normals(mesh).normals
        offset = rng.normal(0.0, sigma, mesh.vertex_count)[:, None] * normals
        meshes.append(mesh.with_vertices(mesh.vertices + offset).with_colors(None))
    return Scene(tuple(meshes))


def input_camera(scene: Scene, resolution: int) -> Camera:
    """Frontal perspective camera 3.5 m in front of the scene center."""
    lo = np.min([m.vertices.min(axis=0) for m in scene.instances], axis=0)
    hi = np.max([m.vertices.max(axis=0) for m in scene.instances], axis=0)
    target = (lo + hi) / 2.0
    rotation, translation = look_at(target + np.array([0.0, 0.0, INPUT_DISTANCE]), target)
    focal = INPUT_FOCAL * resolution
    return Camera.perspective(rotation, translation, resolution, resolution, focal, focal)


def write_fixture(out_dir, seed: int = 0, resolution: int = 160, iters: int = 50,
                  base_lr: float = 0.0008, lr_decay: Optional[float] = None, samples: int = 20_000,
                  noise: float = 0.01) -> Path:
    """
    Write the fixture and return the path of its pipeline config.

    Layout: gt/ and init/ meshes, input/ perspective observation, targets/
    canonical renders of the ground truth (per view: normal.pfm, rgb.png,
    parts/ visibility masks, instance_{k}/normal.pfm), joints.json,
    normalization.json and config.json.

    The refinement step size falls tenfold over `iters` unless `lr_decay` is given.
    """
    out_dir = Path(out_dir)
    gt, joints = two_person_scene()
    init = perturb_scene(gt, noise, seed)

    mesh_names = []
    for mesh_gt, mesh_init in zip(gt.instances, init.instances):
        name = f"instance_{mesh_gt.instance_id}.ply"
        mesh_io.save_ply(mesh_gt, out_dir / "gt" / name)
        mesh_io.save_ply(mesh_init, out_dir / "init" / name)
        mesh_names.append(name)

    camera = input_camera(gt, resolution)
    observed = rasterize(gt, camera, render_rgb=True)
    mesh_io.write_rgb(out_dir / "input" / "rgb.png", observed.rgb)
    mesh_io.write_pfm(out_dir / "input" / "depth.pfm", observed.depth.data)
    mesh_io.write_pfm(out_dir / "input" / "normal.pfm", observed.normal.data)
    mesh_io.save_camera(camera, out_dir / "input" / "camera.json")

    _, center, scale = normalize_scene(init)
    mesh_io.save_json({"center": [float(x) for x in center], "scale": float(scale)},
                      out_dir / "normalization.json")
    mesh_io.save_json({"joints": joints.tolist()}, out_dir / "joints.json")

    rig = build_rig(image_size=resolution, center=center, scale=scale)
    canonical_gt = transform_scene(gt, center, scale)
    for camera_i, azimuth in zip(rig.cameras, rig.azimuths):
        view_dir = out_dir / "targets" / f"view_{int(round(azimuth))}"
        save_render(rasterize(canonical_gt, camera_i, render_rgb=True, render_parts=True), view_dir)
        for mesh in canonical_gt.instances:
            alone = rasterize(canonical_gt.only(mesh.instance_id), camera_i)
            mesh_io.write_pfm(view_dir / f"instance_{mesh.instance_id}" / "normal.pfm", alone.normal.data)

    config = {
        "image": "input/rgb.png",
        "depth": "input/depth.pfm",
        "normal": "input/normal.pfm",
        "camera": "input/camera.json",
        "meshes": [f"init/{name}" for name in mesh_names],
        "gt_meshes": [f"gt/{name}" for name in mesh_names],
        "targets": "targets",
        "normalization": "normalization.json",
        "joints": "joints.json",
        "out": "out",
        "seed": seed,
        "resolution": resolution,
        "samples": samples,
        "optimization": {
            "iters": iters,
            "base_lr": base_lr,
            "lr_decay": 1.0 / iters if lr_decay is None else lr_decay,
            "contact_radius": CONTACT_RADIUS,
        },
    }
    config_path = out_dir / "config.json"
    mesh_io.save_json(config, config_path)
    logging.info(f"fixture written to {out_dir} ({resolution}px, {sum(m.vertex_count for m in gt.instances)} vertices)")
    return config_path


def load_joints(path) -> np.ndarray:
    data = mesh_io.load_json(path)
    joints = data["joints"] if isinstance(data, dict) else data
    return np.asarray(joints, dtype=np.float64).reshape(-1, 3)

