"""
Evaluation metrics for reconstructed multi-person scenes.

Geometry: Chamfer distance, point-to-surface distance, normal consistency,
F-score, bounding-box IoU, rendered-normal L2 error and contact precision.
Images: PSNR and SSIM, plus occlusion-aware variants restricted to the
pixels where one person is hidden behind another.
Distances are reported in centimeters for scenes given in meters.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import trimesh
import trimesh.proximity
import trimesh.sample
from skimage.metrics import structural_similarity

import mesh_io
from canonical import EVAL_AZIMUTHS, normalize_scene, orbit_cameras, transform_scene
from hug_config import default_resolution
from mesh_core import (
    Camera,
    ImageBuffer,
    InputError,
    Mesh,
    Scene,
    as_scene,
    bounding_box,
    compute_face_normals,
    merge_instances,
)
from rasterizer import RenderOutput, rasterize
from spatial_index import nearest_neighbors

DEFAULT_SAMPLES = 100_000
DEFAULT_FSCORE_TAU_CM = 1.0
DEFAULT_CONTACT_DELTA = 0.01
METRIC_KEYS = ("cd_cm", "p2s_cm", "nc", "fscore", "bbox_iou", "norm_l2", "cp",
               "psnr", "ssim", "occ_norm_l2", "occ_psnr", "occ_ssim")


@dataclass(frozen=True, eq=False)
class SampledSurface:
    points: np.ndarray
    normals: np.ndarray
    mesh_id: int = 0

    def __len__(self) -> int:
        return len(self.points)


def _as_trimesh(mesh: Mesh) -> trimesh.Trimesh:
    return trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False, validate=False)


def sample_surface(mesh: Mesh, n: int = DEFAULT_SAMPLES, seed: int = 0) -> SampledSurface:
    """Area-uniform surface samples with the normals of their source faces."""
    if n < 1:
        raise InputError(f"sample count must be positive, got {n}")
    normals, _ = compute_face_normals(mesh)
    surface = _as_trimesh(mesh)
    if mesh.face_count == 0 or surface.area <= 0:
        raise InputError(f"instance {mesh.instance_id} has no non-degenerate faces to sample")
    points, face = trimesh.sample.sample_surface(surface, n, seed=seed)
    return SampledSurface(np.asarray(points, dtype=np.float64), normals[face], mesh.instance_id)


def _points(surface) -> np.ndarray:
    points = surface.points if isinstance(surface, SampledSurface) else np.asarray(surface, dtype=np.float64)
    points = points.reshape(-1, 3)
    if len(points) == 0:
        raise InputError("metric on an empty point set")
    return points


def chamfer(P, Q, mean: bool = False) -> float:
    """Sum (or mean with `mean=True`) of the two directional mean nearest distances, in cm."""
    p, q = _points(P), _points(Q)
    forward, _ = nearest_neighbors(p, q)
    backward, _ = nearest_neighbors(q, p)
    total = forward.mean() + backward.mean()
    return float(100.0 * (0.5 * total if mean else total))


def p2s(P_pred, mesh_gt: Mesh, squared: bool = False) -> float:
    """Mean distance from predicted samples to the ground-truth surface, in cm (cm^2 when squared)."""
    points = _points(P_pred)
    if mesh_gt.face_count == 0:
        raise InputError("point-to-surface distance against a mesh without faces")
    _, distance, _ = trimesh.proximity.closest_point(_as_trimesh(mesh_gt), points)
    distance = np.nan_to_num(np.asarray(distance, dtype=np.float64))
    if squared:
        return float(1e4 * (distance ** 2).mean())
    return float(100.0 * distance.mean())


def normal_consistency(P: SampledSurface, Q: SampledSurface) -> float:
    """Average cosine between each sample's normal and its nearest neighbour's, both directions."""
    p, q = _points(P), _points(Q)
    _, pq = nearest_neighbors(p, q)
    _, qp = nearest_neighbors(q, p)
    forward = np.einsum("pd,pd->p", P.normals, Q.normals[pq]).mean()
    backward = np.einsum("pd,pd->p", Q.normals, P.normals[qp]).mean()
    return float(0.5 * (forward + backward))


def fscore(P, Q, tau: float = DEFAULT_FSCORE_TAU_CM) -> float:
    """Harmonic mean of precision and recall at tau centimeters, in percent."""
    p, q = _points(P), _points(Q)
    threshold = tau / 100.0
    forward, _ = nearest_neighbors(p, q)
    backward, _ = nearest_neighbors(q, p)
    precision = 100.0 * float((forward < threshold).mean())
    recall = 100.0 * float((backward < threshold).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def bbox_iou(mesh_a, mesh_b) -> float:
    """Volume IoU of the axis-aligned bounding boxes."""
    lo_a, hi_a = bounding_box(as_scene(mesh_a))
    lo_b, hi_b = bounding_box(as_scene(mesh_b))
    overlap = np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)
    intersection = float(np.prod(overlap))
    union = float(np.prod(hi_a - lo_a) + np.prod(hi_b - lo_b) - intersection)
    if union <= 0:
        return 1.0 if np.allclose(lo_a, lo_b) and np.allclose(hi_a, hi_b) else 0.0
    return intersection / union


def normal_map_l2(pred: ImageBuffer, gt: ImageBuffer, region: Optional[np.ndarray] = None) -> Tuple[float, int]:
    """
    Sum of squared normal differences over the foreground union (or `region`)
    and the pixel count; background normals count as zero vectors.
    """
    if pred.shape != gt.shape:
        raise InputError(f"normal maps differ in size: {pred.shape} vs {gt.shape}")
    pixels = pred.foreground() | gt.foreground() if region is None else np.asarray(region, dtype=bool)
    diff = pred.data[pixels] - gt.data[pixels]
    return float((diff ** 2).sum()), int(pixels.sum())


def l2_normal_error(pred_mesh, gt_mesh, views: Sequence[Camera]) -> float:
    """Mean squared normal difference over the union silhouettes of all views."""
    pred_scene, gt_scene = as_scene(pred_mesh), as_scene(gt_mesh)
    if len({(c.width, c.height) for c in views}) > 1:
        raise InputError("l2 normal error views must share one resolution")
    total, count = 0.0, 0
    for camera in views:
        s, n = normal_map_l2(rasterize(pred_scene, camera).normal, rasterize(gt_scene, camera).normal)
        total += s
        count += n
    if count == 0:
        raise InputError("both scenes render empty in every view")
    return total / count


def _contact_vertices(scene: Scene, delta: float) -> List[np.ndarray]:
    first, second = scene.instances
    d_first, _ = nearest_neighbors(first.vertices, second.vertices)
    d_second, _ = nearest_neighbors(second.vertices, first.vertices)
    return [d_first < delta, d_second < delta]


def contact_precision(pred_scene: Scene, gt_scene: Scene, delta: float = DEFAULT_CONTACT_DELTA) -> float:
    """Share of predicted contact vertices whose nearest ground-truth vertex is a ground-truth contact."""
    if len(pred_scene) != 2 or len(gt_scene) != 2:
        raise InputError("contact precision needs exactly two instances in both scenes")
    pred_contacts = np.concatenate(_contact_vertices(pred_scene, delta))
    gt_contacts = np.concatenate(_contact_vertices(gt_scene, delta))
    if not pred_contacts.any():
        logging.warning("no predicted contact vertices; contact precision is 0")
        return 0.0
    pred_vertices = pred_scene.merged().vertices[pred_contacts]
    _, nearest = nearest_neighbors(pred_vertices, gt_scene.merged().vertices)
    return float(gt_contacts[nearest].mean())


def quantize(image) -> np.ndarray:
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image)
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64)
    return np.round(np.clip(data, 0.0, 1.0) * 255.0)


def _region(mask, shape) -> Optional[np.ndarray]:
    if mask is None:
        return None
    region = mask.data.astype(bool) if isinstance(mask, ImageBuffer) else np.asarray(mask, dtype=bool)
    if region.shape != shape:
        raise InputError(f"mask {region.shape} differs from image {shape}")
    if not region.any():
        raise InputError("image metric over an empty mask")
    return region


def psnr(img_a, img_b, mask=None) -> float:
    """PSNR in dB on 8-bit values; identical inputs give +inf."""
    a, b = quantize(img_a), quantize(img_b)
    if a.shape != b.shape:
        raise InputError(f"images differ in size: {a.shape} vs {b.shape}")
    region = _region(mask, a.shape[:2])
    diff = (a - b) ** 2
    mse = float(diff[region].mean() if region is not None else diff.mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def ssim(img_a, img_b, mask=None) -> float:
    """Gaussian-window SSIM (sigma 1.5) on 8-bit values, averaged over `mask` when given."""
    a, b = quantize(img_a), quantize(img_b)
    if a.shape != b.shape:
        raise InputError(f"images differ in size: {a.shape} vs {b.shape}")
    region = _region(mask, a.shape[:2])
    channel_axis = -1 if a.ndim == 3 else None
    score, full = structural_similarity(
        a, b, data_range=255, channel_axis=channel_axis, gaussian_weights=True,
        sigma=1.5, use_sample_covariance=False, full=True,
    )
    if region is None:
        return float(score)
    if full.ndim == 3:
        full = full.mean(axis=2)
    return float(full[region].mean())


def occlusion_masks(gt_renders: Dict[int, RenderOutput], instance_map) -> Dict[int, ImageBuffer]:
    """Per instance, pixels its amodal render covers but another instance owns in the group render."""
    owner = instance_map.data if isinstance(instance_map, ImageBuffer) else np.asarray(instance_map)
    masks = {}
    for k, render in gt_renders.items():
        fg = render.foreground if isinstance(render, RenderOutput) else np.asarray(render, dtype=bool)
        masks[k] = ImageBuffer.mask(fg & (owner != 0) & (owner != k))
    return masks


@dataclass
class MetricReport:
    """Scene-level and per-instance metric values; NaN marks a metric that does not apply."""

    scene: Dict[str, float] = field(default_factory=dict)
    instances: Dict[int, Dict[str, float]] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"level": "scene", **self.scene}]
        rows += [{"level": f"instance_{k}", **values} for k, values in sorted(self.instances.items())]
        return pd.DataFrame(rows, columns=["level", *METRIC_KEYS])

    def to_dict(self) -> Dict:
        def clean(values):
            out = {}
            for key, value in values.items():
                if value is None or (isinstance(value, float) and math.isnan(value)):
                    out[key] = None
                elif isinstance(value, float) and math.isinf(value):
                    out[key] = "inf" if value > 0 else "-inf"
                else:
                    out[key] = value
            return out

        return {"scene": clean(self.scene),
                "instances": {str(k): clean(v) for k, v in sorted(self.instances.items())}}

    def save(self, out_dir) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = out_dir / "metrics.json", out_dir / "metrics.csv"
        mesh_io.save_json(self.to_dict(), json_path)
        with mesh_io.atomic_write(csv_path, "w") as f:
            self.to_frame().to_csv(f, index=False)
        return json_path, csv_path

    @classmethod
    def load(cls, path) -> "MetricReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))

        def parse(values):
            return {k: (math.nan if v is None else float(v)) for k, v in values.items()}

        return cls(parse(data["scene"]), {int(k): parse(v) for k, v in data["instances"].items()})

    def table(self) -> str:
        return self.to_frame().to_string(index=False, float_format=lambda x: f"{x:.4f}")


def _geometry_metrics(pred: Mesh, gt: Mesh, n: int, seed: int, tau: float) -> Dict[str, float]:
    pred_samples = sample_surface(pred, n, seed)
    gt_samples = sample_surface(gt, n, seed)
    return {
        "cd_cm": chamfer(pred_samples, gt_samples),
        "p2s_cm": p2s(pred_samples, gt),
        "nc": normal_consistency(pred_samples, gt_samples),
        "fscore": fscore(pred_samples, gt_samples, tau),
        "bbox_iou": bbox_iou(pred, gt),
    }


def _mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def evaluate(pred_scene: Scene, gt_scene: Scene, views: Optional[Sequence[Camera]] = None,
             n_samples: int = DEFAULT_SAMPLES, seed: int = 0, tau: float = DEFAULT_FSCORE_TAU_CM,
             delta: float = DEFAULT_CONTACT_DELTA, resolution: Optional[int] = None) -> MetricReport:
    """
    Full comparison of a predicted scene with the ground truth.

    Geometric metrics use the scenes as given (meters). Image metrics render
    both scenes after applying the ground truth's canonical normalization,
    from `views` (default: four orbit views at 0, 90, 180, 270 degrees).

    Returns:
        MetricReport with a scene row and one row per instance id found in both scenes
    """
    pred_scene, gt_scene = as_scene(pred_scene), as_scene(gt_scene)
    shared = [k for k in gt_scene.instance_ids if k in pred_scene.instance_ids]
    if not shared:
        raise InputError("predicted and ground-truth scenes share no instance ids")

    report = MetricReport()
    scene_values = _geometry_metrics(merge_instances(pred_scene), merge_instances(gt_scene), n_samples, seed, tau)
    scene_values["cp"] = contact_precision(pred_scene, gt_scene, delta) \
        if len(pred_scene) == 2 and len(gt_scene) == 2 else math.nan

    _, center, scale = normalize_scene(gt_scene)
    pred_n = transform_scene(pred_scene, center, scale)
    gt_n = transform_scene(gt_scene, center, scale)
    if views is None:
        views = orbit_cameras(EVAL_AZIMUTHS, image_size=resolution or default_resolution())

    instance_values = {k: _geometry_metrics(pred_scene.instance(k), gt_scene.instance(k), n_samples, seed, tau)
                       for k in shared}
    normal_sum, normal_count = 0.0, 0
    psnrs, ssims = [], []
    inst_normals = {k: [0.0, 0] for k in shared}
    inst_psnr = {k: [] for k in shared}
    inst_ssim = {k: [] for k in shared}
    occ_normal, occ_psnr_values, occ_ssim_values = [], [], []

    for camera in views:
        pred_group = rasterize(pred_n, camera, render_rgb=True)
        gt_group = rasterize(gt_n, camera, render_rgb=True)
        s, n = normal_map_l2(pred_group.normal, gt_group.normal)
        normal_sum += s
        normal_count += n
        psnrs.append(psnr(pred_group.rgb, gt_group.rgb))
        ssims.append(ssim(pred_group.rgb, gt_group.rgb))

        pred_alone = {k: rasterize(pred_n.only(k), camera, render_rgb=True) for k in shared}
        gt_alone = {k: rasterize(gt_n.only(k), camera, render_rgb=True) for k in shared}
        occluded = occlusion_masks(gt_alone, gt_group.instance_map)
        for k in shared:
            s, n = normal_map_l2(pred_alone[k].normal, gt_alone[k].normal)
            inst_normals[k][0] += s
            inst_normals[k][1] += n
            if (pred_alone[k].foreground | gt_alone[k].foreground).any():
                inst_psnr[k].append(psnr(pred_alone[k].rgb, gt_alone[k].rgb))
                inst_ssim[k].append(ssim(pred_alone[k].rgb, gt_alone[k].rgb))
            region = occluded[k].data.astype(bool)
            if region.any():
                s, n = normal_map_l2(pred_alone[k].normal, gt_alone[k].normal, region)
                occ_normal.append(s / n)
                occ_psnr_values.append(psnr(pred_alone[k].rgb, gt_alone[k].rgb, region))
                occ_ssim_values.append(ssim(pred_alone[k].rgb, gt_alone[k].rgb, region))

    if normal_count == 0:
        raise InputError("both scenes render empty in every evaluation view")
    scene_values.update({
        "norm_l2": normal_sum / normal_count,
        "psnr": _mean(psnrs),
        "ssim": _mean(ssims),
        "occ_norm_l2": _mean(occ_normal),
        "occ_psnr": _mean(occ_psnr_values),
        "occ_ssim": _mean(occ_ssim_values),
    })
    report.scene = {key: scene_values.get(key, math.nan) for key in METRIC_KEYS}
    for k in shared:
        values = instance_values[k]
        total, count = inst_normals[k]
        values.update({
            "norm_l2": total / count if count else math.nan,
            "cp": math.nan,
            "psnr": _mean(inst_psnr[k]),
            "ssim": _mean(inst_ssim[k]),
        })
        report.instances[k] = {key: values.get(key, math.nan) for key in METRIC_KEYS}
    logging.info(f"evaluation: cd {report.scene['cd_cm']:.4f} cm, nc {report.scene['nc']:.4f}")
    return report
