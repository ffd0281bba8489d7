#!/usr/bin/env python3
"""
HUG3D geometry CLI
Runs the non-neural stages of the multi-person reconstruction pipeline on files
"""

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import mesh_io
from canonical import (
    RIG_AZIMUTHS,
    build_rig,
    denormalize_scene,
    normalize_scene,
    orbit_cameras,
    save_rig,
    transform_scene,
)
from fixtures import load_joints, write_fixture
from hug_config import setup_logging
from latent_ops import (
    LatentGrid,
    compose_instance_to_group,
    downsample_mask_to_latent,
    inject_partial_rgb,
    stack_instances,
)
from mesh_core import ImageBuffer, InputError, InvariantError, NumericalError, Scene
from metrics import evaluate
from pers2ortho import (
    depth_edge_filter,
    depth_to_mesh,
    perspective_to_orthographic,
    refine_partial_geometry,
    save_partial_views,
)
from pipeline_config import PipelineConfig
from rasterizer import rasterize, save_render
from refine import NormalTargets, PartPairSet, contact_pairs_from_meshes, optimize
from texture import fuse_texture

VERSION = "HUG3D geometry CLI v1.0.0"
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_INTERNAL = 0, 2, 3, 4
PART_FILE = re.compile(r"instance_(\d+)_part_(\d+)\.png$")


# ---------------------------------------------------------------- loading helpers

def view_dir(root: Path, azimuth: float) -> Path:
    return Path(root) / f"view_{int(round(azimuth))}"


def load_scene(paths: List[Path]) -> Scene:
    """One mesh per file; instance ids follow the file order starting at 1."""
    if not paths:
        raise InputError("no meshes given")
    return Scene(tuple(mesh_io.load_mesh(p, instance_id=k + 1) for k, p in enumerate(paths)))


def load_normalization(config: PipelineConfig, scene: Optional[Scene]) -> Tuple[np.ndarray, float]:
    if config.normalization is not None:
        data = mesh_io.load_json(config.normalization)
        try:
            center = np.asarray(data["center"], dtype=np.float64).reshape(3)
            scale = float(data["scale"])
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"{config.normalization}: invalid normalization ({e})") from e
        if scale <= 0:
            raise InputError(f"{config.normalization}: scale must be positive")
        return center, scale
    if scene is None:
        return np.zeros(3), 2.0
    _, center, scale = normalize_scene(scene)
    return center, scale


def latest_meshes(config: PipelineConfig, explicit: bool, stages=("mesh",)) -> List[Path]:
    """Explicit --mesh wins; otherwise the newest pipeline output, then the configured meshes."""
    if not explicit:
        for stage in stages:
            found = sorted(Path(config.out, stage).glob("instance_*.ply"),
                           key=lambda p: int(re.findall(r"\d+", p.stem)[-1]))
            if found:
                logging.info(f"Using {len(found)} meshes from {Path(config.out, stage)}")
                return found
    config.require("meshes")
    return config.meshes


def load_normal_targets(root: Path, rig) -> NormalTargets:
    group, instance = {}, {}
    for index, azimuth in enumerate(rig.azimuths):
        folder = view_dir(root, azimuth)
        target = mesh_io.load_normal(folder / "normal.pfm")
        if target.shape != (rig.resolution, rig.resolution):
            raise InputError(f"{folder / 'normal.pfm'} is {target.shape}, expected {rig.resolution}px")
        group[index] = target
        for path in sorted(folder.glob("instance_*/normal.pfm")):
            instance[(index, int(path.parent.name.split("_")[-1]))] = mesh_io.load_normal(path)
    return NormalTargets(group, instance)


def load_part_visibility(root: Path, rig) -> Dict[int, Dict[Tuple[int, int], object]]:
    visibility = {}
    for index, azimuth in enumerate(rig.azimuths):
        masks = {}
        for path in sorted((view_dir(root, azimuth) / "parts").glob("instance_*_part_*.png")):
            match = PART_FILE.search(path.name)
            if match:
                masks[(int(match.group(1)), int(match.group(2)))] = mesh_io.read_mask(path)
        if masks:
            visibility[index] = masks
    return visibility


def save_scene(scene: Scene, folder: Path) -> List[Path]:
    paths = []
    for mesh in scene.instances:
        path = Path(folder) / f"instance_{mesh.instance_id}.ply"
        mesh_io.save_ply(mesh, path)
        paths.append(path)
    return paths


def plot_trace(trace: pd.DataFrame, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.figure(figsize=(10, 6))
    for column in ("L_normal", "L_vis", "L_pen", "L_total"):
        plt.plot(trace["iteration"], trace[column], label=column)
    plt.yscale("symlog", linthresh=1e-6)
    plt.xlabel("Iteration")
    plt.ylabel("Loss")
    plt.title("Refinement loss")
    plt.legend()
    plt.tight_layout()
    with mesh_io.atomic_write(path) as f:
        plt.savefig(f, format="png", dpi=150, bbox_inches="tight")
    plt.close()


# ---------------------------------------------------------------- commands

def run_pers2ortho(config: PipelineConfig, args) -> int:
    """Perspective observation -> partial canonical views"""
    config.require("image", "depth", "camera", "meshes")
    if config.refine_partial:
        config.require("normal")
    print("🔧 Transforming the perspective view into canonical views...")
    rgb = mesh_io.read_rgb(config.image)
    depth = mesh_io.load_depth(config.depth)
    normal = mesh_io.load_normal(config.normal) if config.refine_partial else None
    camera = mesh_io.load_camera(config.camera)
    scene = load_scene(config.meshes)
    center, scale = load_normalization(config, scene)
    rig = build_rig(config.rig_distance, config.render_resolution, center, scale)

    partial_mesh = None
    if config.refine_partial:
        validity = depth_edge_filter(depth, depth.foreground())
        partial_mesh = depth_to_mesh(depth, camera, validity)
        if partial_mesh.vertex_count >= 4 and partial_mesh.face_count:
            partial_mesh = refine_partial_geometry(
                partial_mesh, depth, normal, camera, iters=config.partial_iters, lr=config.partial_lr,
                progress=config.optimization.progress, threads=config.threads,
            )
            refined = rasterize(Scene((partial_mesh,)), camera, threads=config.threads).depth
            depth = ImageBuffer.depth(np.where(refined.foreground(), refined.data, depth.data))
        else:
            logging.warning("too few valid pixels for a partial mesh; skipping partial refinement")
            partial_mesh = None

    views = perspective_to_orthographic(rgb, depth, camera, scene, rig, tau=config.tau, threads=config.threads)
    save_partial_views(views, rig, config.out)
    save_rig(rig, Path(config.out) / "rig.json")
    if partial_mesh is not None:
        mesh_io.save_ply(partial_mesh, Path(config.out) / "partial_mesh.ply")
    covered = {i: int(views.visibility[i].data.sum()) for i in sorted(views.visibility)}
    print(f"✅ Partial views written to {config.out}")
    print(f"📊 Covered pixels per view: {covered}")
    return EXIT_OK


def run_refine(config: PipelineConfig, args) -> int:
    """Joint multi-person mesh refinement"""
    config.require("meshes")
    options = config.optimization
    print("🔧 Refining meshes...")
    scene = load_scene(config.meshes)
    center, scale = load_normalization(config, scene)
    rig = build_rig(config.rig_distance, config.render_resolution, center, scale)
    targets = None
    visibility = {}
    if options.lambda_group > 0 or options.lambda_inst > 0:
        config.require("targets")
        targets = load_normal_targets(config.targets, rig)
    if options.lambda_vis > 0 and config.targets is not None:
        visibility = load_part_visibility(config.targets, rig)
    if all(m.part_labels is not None for m in scene.instances):
        pairs = contact_pairs_from_meshes(scene, options.contact_radius)
    else:
        logging.warning("meshes carry no part labels; penetration term disabled")
        pairs = PartPairSet()
    half = scale / 2.0
    joints = (load_joints(config.joints) - center) / half if config.joints is not None else None

    result = optimize(transform_scene(scene, center, scale), targets, visibility, pairs, options, rig,
                      joints=joints, metric_scale=half)
    refined = denormalize_scene(result.scene, center, scale)
    out = Path(config.out)
    save_scene(refined, out / "mesh")
    trace = pd.DataFrame(result.trace)
    with mesh_io.atomic_write(out / "loss_trace.csv", "w") as f:
        trace.to_csv(f, index=False)
    if args.plot:
        plot_trace(trace, out / "loss_trace.png")

    initial = result.trace[0]["L_total"]
    final = result.trace[result.best_iteration]["L_total"]
    print(f"✅ Refined meshes written to {out / 'mesh'}")
    print(f"📊 L_total {initial:.6g} -> {final:.6g} (best iteration {result.best_iteration}, {len(pairs)} contact pairs)")
    return EXIT_OK


def run_fuse_texture(config: PipelineConfig, args) -> int:
    """Multi-view texture fusion onto the (refined) meshes"""
    source = config.views or config.targets
    if source is None:
        raise InputError("missing required input: views (set views or targets)")
    print("🎨 Fusing textures...")
    scene = load_scene(latest_meshes(config, bool(args.mesh)))
    center, scale = load_normalization(config, scene)
    azimuths = tuple(args.azimuth) if args.azimuth else RIG_AZIMUTHS
    images = []
    for azimuth in azimuths:
        images.append(mesh_io.read_rgb(view_dir(source, azimuth) / "rgb.png"))
    resolution = images[0].width
    cameras = orbit_cameras(azimuths, config.rig_distance, resolution)
    canonical = transform_scene(scene, center, scale)
    depths = [rasterize(canonical, cam, threads=config.threads).depth for cam in cameras]

    textured = []
    for mesh in canonical.instances:
        debug_dir = Path(config.out) / "debug" / f"instance_{mesh.instance_id}" if args.debug else None
        views = list(zip(cameras, images, depths))
        textured.append(fuse_texture(mesh, views, debug_dir=debug_dir, threads=config.threads))
    saved = save_scene(denormalize_scene(Scene(tuple(textured)), center, scale), Path(config.out) / "textured")
    print(f"✅ Textured meshes written: {', '.join(str(p) for p in saved)}")
    return EXIT_OK


def run_evaluate(config: PipelineConfig, args) -> int:
    """Metrics of the predicted scene against ground truth"""
    config.require("gt_meshes")
    print("📊 Evaluating...")
    pred = load_scene(latest_meshes(config, bool(args.mesh), stages=("textured", "mesh")))
    gt = load_scene(config.gt_meshes)
    report = evaluate(pred, gt, n_samples=config.samples, seed=config.seed,
                      resolution=config.render_resolution)
    json_path, csv_path = report.save(config.out)
    print(report.table())
    print(f"✅ Metrics written to {json_path} and {csv_path}")
    return EXIT_OK


def run_render(config: PipelineConfig, args) -> int:
    """Render meshes through the rig, orbit views or a given camera"""
    scene = load_scene(latest_meshes(config, bool(args.mesh), stages=("textured", "mesh")))
    parts = all(m.part_labels is not None for m in scene.instances)
    out = Path(config.out) / "render"
    if args.camera:
        camera = mesh_io.load_camera(args.camera)
        save_render(rasterize(scene, camera, render_rgb=True, render_parts=parts, threads=config.threads),
                    out / "camera")
        print(f"✅ Rendered through {args.camera} into {out / 'camera'}")
        return EXIT_OK
    center, scale = load_normalization(config, scene)
    canonical = transform_scene(scene, center, scale)
    azimuths = tuple(args.azimuth) if args.azimuth else RIG_AZIMUTHS
    for azimuth, camera in zip(azimuths, orbit_cameras(azimuths, config.rig_distance, config.render_resolution)):
        output = rasterize(canonical, camera, render_rgb=True, render_parts=parts, threads=config.threads)
        save_render(output, view_dir(out, azimuth))
    print(f"✅ Rendered {len(azimuths)} views into {out}")
    return EXIT_OK


def run_compose(config: PipelineConfig, args) -> int:
    """Latent blending: instance-to-group composition or partial-RGB injection"""
    if not args.latent:
        raise InputError("compose needs --latent")
    group = LatentGrid(mesh_io.read_latent(args.latent))
    grids = [LatentGrid(mesh_io.read_latent(p)) for p in args.instance_latent or []]
    masks = [downsample_mask_to_latent(mesh_io.read_mask(p), group.data.shape[:2]) for p in args.mask or []]
    if args.inject:
        if len(grids) != 1 or len(masks) != 1:
            raise InputError("--inject needs exactly one --instance-latent (the raw latent) and one --mask")
        result = inject_partial_rgb(group, grids[0], masks[0], config.alpha)
    else:
        result = compose_instance_to_group(group, stack_instances(grids, masks), config.alpha, args.overlap)
    path = Path(config.out) / "composed.latent"
    mesh_io.write_latent(path, result.data)
    print(f"✅ Latent written to {path}")
    return EXIT_OK


def run_rig(config: PipelineConfig, args) -> int:
    """Write the six canonical cameras"""
    scene = load_scene(config.meshes) if config.meshes else None
    center, scale = load_normalization(config, scene)
    rig = build_rig(config.rig_distance, config.render_resolution, center, scale)
    path = Path(config.out) / "rig.json"
    save_rig(rig, path)
    print(f"✅ Rig written to {path}")
    return EXIT_OK


def run_make_fixture(args) -> int:
    """Write the synthetic two-person fixture"""
    out = Path(args.out or "fixture")
    print(f"🧪 Writing the two-person fixture to {out}...")
    kwargs = {"seed": args.seed or 0}
    if args.resolution:
        kwargs["resolution"] = args.resolution
    if args.iters:
        kwargs["iters"] = args.iters
    config_path = write_fixture(out, **kwargs)
    print(f"✅ Fixture ready; run e.g. hug3d refine --config {config_path}")
    return EXIT_OK


COMMANDS = {
    "pers2ortho": run_pers2ortho,
    "refine": run_refine,
    "fuse-texture": run_fuse_texture,
    "evaluate": run_evaluate,
    "render": run_render,
    "compose": run_compose,
    "rig": run_rig,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="HUG3D geometry CLI",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  hug3d make-fixture --out fixture               # Write the synthetic two-person scene
  hug3d pers2ortho --config fixture/config.json  # Partial canonical views
  hug3d refine --config fixture/config.json      # Joint mesh refinement
  hug3d fuse-texture --config fixture/config.json
  hug3d evaluate --config fixture/config.json    # metrics.json / metrics.csv
  hug3d compose --latent g.latent --instance-latent a.latent --mask a.png --alpha 0.8
        """
    )
    parser.add_argument(
        'command',
        choices=['pers2ortho', 'refine', 'fuse-texture', 'evaluate', 'render', 'compose', 'rig',
                 'make-fixture', 'help'],
        help='Command to run'
    )
    parser.add_argument('--version', action='version', version=VERSION)
    parser.add_argument('--config', help='Pipeline config JSON')
    parser.add_argument('--out', help='Output folder')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--threads', type=int, help='Worker threads (0 = all cores)')
    parser.add_argument('--resolution', type=int, help='Canonical render resolution')
    parser.add_argument('--iters', type=int, help='Refinement iterations')
    parser.add_argument('--alpha', type=float, help='Latent blend factor')
    parser.add_argument('--refine-partial', action='store_true', help='Refine the partial mesh before reprojection')
    parser.add_argument('--debug', action='store_true', help='Write per-view texture contributions')
    parser.add_argument('--plot', action='store_true', help='Write loss_trace.png')
    parser.add_argument('--progress', action='store_true', help='Show progress bars')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--mesh', nargs='+', help='Mesh files, one per person')
    parser.add_argument('--gt', nargs='+', help='Ground-truth mesh files')
    parser.add_argument('--image', help='Perspective RGB (PNG)')
    parser.add_argument('--depth', help='Depth map (PFM)')
    parser.add_argument('--normal', help='Normal map (PFM)')
    parser.add_argument('--camera', help='Camera JSON')
    parser.add_argument('--targets', help='Folder of canonical targets')
    parser.add_argument('--views', help='Folder of per-view RGB for texture fusion')
    parser.add_argument('--normalization', help='Normalization JSON (center, scale)')
    parser.add_argument('--joints', help='Joints JSON')
    parser.add_argument('--latent', help='Group (or current) latent')
    parser.add_argument('--instance-latent', nargs='+', help='Instance (or raw) latents')
    parser.add_argument('--mask', nargs='+', help='Region masks (PNG)')
    parser.add_argument('--inject', action='store_true', help='Partial-RGB injection instead of composition')
    parser.add_argument('--overlap', choices=['priority', 'sum'], default='priority')
    parser.add_argument('--azimuth', nargs='+', type=float, help='View azimuths in degrees')
    return parser


def overrides_from_args(args) -> Dict:
    return {
        "image": args.image,
        "depth": args.depth,
        "normal": args.normal,
        "camera": args.camera,
        "meshes": args.mesh,
        "gt_meshes": args.gt,
        "targets": args.targets,
        "views": args.views,
        "normalization": args.normalization,
        "joints": args.joints,
        "out": args.out,
        "seed": args.seed,
        "threads": args.threads,
        "resolution": args.resolution,
        "alpha": args.alpha,
        "iters": args.iters,
        "refine_partial": True if args.refine_partial else None,
        "progress": True if args.progress else None,
    }


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    if args.command == 'help':
        parser.print_help()
        return EXIT_OK
    try:
        if args.command == 'make-fixture':
            return run_make_fixture(args)
        config = PipelineConfig.load(args.config, overrides_from_args(args))
        return COMMANDS[args.command](config, args)
    except InputError as e:
        print(f"❌ Input error: {e}")
        return EXIT_INPUT
    except NumericalError as e:
        print(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except InvariantError as e:
        print(f"❌ Internal invariant violated: {e}")
        return EXIT_INTERNAL
    except Exception as e:
        logging.exception("unexpected failure")
        print(f"❌ Error running {args.command}: {e}")
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
