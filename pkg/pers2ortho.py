"""
Perspective-to-orthographic view transform.

Lifts a perspective RGB + depth observation to a colored point cloud, drops
points near depth discontinuities or hidden behind the body, and splats the
survivors into the canonical orthographic views as partial RGB images with
visibility masks. Also refines a partial mesh against predicted depth and
normal maps.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import ndimage
from skimage.feature import canny
from tqdm import tqdm

import mesh_io
from adam import Adam
from canonical import PARTIAL_VIEW_INDICES, CanonicalRig, dilate, erode, transform_scene
from mesh_core import (
    Camera,
    ColoredPointCloud,
    ImageBuffer,
    InputError,
    Mesh,
    NumericalError,
    Scene,
    as_scene,
)
from raster_grad import FrozenView
from rasterizer import rasterize, sample_depth

CANNY_SIGMA = 1.0
CANNY_LOW = 0.05
CANNY_HIGH = 0.15
DEFAULT_TAU = 0.02
STD_FLOOR = 1e-8


@dataclass
class PartialViewSet:
    """
    Partial observations in the canonical views.

    `partial_rgb` and `visibility` are keyed by rig view index (subset of 0, 1, 5);
    `smplx_normals` / `smplx_depths` hold renders of the initialization mesh for
    all six views.
    """

    partial_rgb: Dict[int, ImageBuffer] = field(default_factory=dict)
    visibility: Dict[int, ImageBuffer] = field(default_factory=dict)
    smplx_normals: Dict[int, ImageBuffer] = field(default_factory=dict)
    smplx_depths: Dict[int, ImageBuffer] = field(default_factory=dict)

    def __post_init__(self):
        extra = set(self.partial_rgb) - set(PARTIAL_VIEW_INDICES)
        if extra:
            raise InputError(f"partial RGB views must be among {PARTIAL_VIEW_INDICES}, got {sorted(extra)}")
        if set(self.partial_rgb) != set(self.visibility):
            raise InputError("every partial RGB view needs a visibility mask")


def depth_to_pointcloud(depth: ImageBuffer, rgb: ImageBuffer, camera: Camera,
                        valid_mask=None) -> ColoredPointCloud:
    """
    One world-space point per valid foreground pixel, unprojected through the pixel center.

    Args:
        depth: depth buffer (background <= 0)
        rgb: color image of the same size
        camera: camera that produced the depth
        valid_mask: optional binary mask further restricting pixels

    Returns:
        ColoredPointCloud with source_pixel = (row, col)
    """
    if depth.shape != rgb.shape:
        raise InputError(f"depth {depth.shape} and rgb {rgb.shape} differ in size")
    if depth.shape != (camera.height, camera.width):
        raise InputError(f"buffers {depth.shape} do not match the camera {camera.height}x{camera.width}")
    keep = depth.foreground()
    if valid_mask is not None:
        mask = valid_mask.data if isinstance(valid_mask, ImageBuffer) else np.asarray(valid_mask)
        if mask.shape != depth.shape:
            raise InputError(f"valid mask {mask.shape} differs from depth {depth.shape}")
        keep &= mask.astype(bool)
    rows, cols = np.nonzero(keep)
    uv = np.stack([cols + 0.5, rows + 0.5], axis=1)
    points = camera.unproject(uv, depth.data[rows, cols])
    return ColoredPointCloud(points, rgb.data[rows, cols], np.stack([rows, cols], axis=1))


def depth_to_mesh(depth: ImageBuffer, camera: Camera, valid_mask=None, max_jump: float = 0.05,
                  instance_id: int = 1) -> Mesh:
    """
    Triangulate the valid pixel grid into a partial surface facing the camera.

    A 2x2 pixel block becomes two triangles when all four pixels are valid and
    their depths span less than `max_jump`.
    """
    valid = depth.foreground()
    if valid_mask is not None:
        mask = valid_mask.data if isinstance(valid_mask, ImageBuffer) else np.asarray(valid_mask)
        valid &= mask.astype(bool)
    rows, cols = np.nonzero(valid)
    index = np.full(depth.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(len(rows))
    uv = np.stack([cols + 0.5, rows + 0.5], axis=1)
    vertices = camera.unproject(uv, depth.data[rows, cols]) if len(rows) else np.zeros((0, 3))

    tl, tr = index[:-1, :-1], index[:-1, 1:]
    bl, br = index[1:, :-1], index[1:, 1:]
    d = depth.data
    corners = np.stack([d[:-1, :-1], d[:-1, 1:], d[1:, :-1], d[1:, 1:]])
    keep = (tl >= 0) & (tr >= 0) & (bl >= 0) & (br >= 0)
    keep &= corners.max(axis=0) - corners.min(axis=0) < max_jump
    faces = np.concatenate([
        np.stack([tl[keep], bl[keep], tr[keep]], axis=1),
        np.stack([tr[keep], bl[keep], br[keep]], axis=1),
    ])
    logging.debug(f"depth mesh: {len(vertices)} vertices, {len(faces)} faces")
    return Mesh(vertices, faces, instance_id=instance_id)


def _fill_background(values: np.ndarray, fg: np.ndarray) -> np.ndarray:
    """Extend foreground values into the background by nearest foreground pixel."""
    if fg.all():
        return values
    _, (rows, cols) = ndimage.distance_transform_edt(~fg, return_indices=True)
    return values[rows, cols]


def depth_edge_filter(depth: ImageBuffer, fg_mask, erode_kernel: int = 3, dilate_kernel: int = 5,
                      sigma: float = CANNY_SIGMA, low: float = CANNY_LOW,
                      high: float = CANNY_HIGH) -> ImageBuffer:
    """
    Validity mask that removes pixels near depth discontinuities.

    The foreground is eroded, Canny edges are taken on the depth normalized to
    [0, 1] over the foreground, the edges are dilated, and the validity is the
    eroded foreground minus the dilated edges.
    """
    fg = fg_mask.data.astype(bool) if isinstance(fg_mask, ImageBuffer) else np.asarray(fg_mask, dtype=bool)
    if fg.shape != depth.shape:
        raise InputError(f"mask {fg.shape} and depth {depth.shape} differ in size")
    eroded = erode(fg, erode_kernel)
    if not eroded.any():
        return ImageBuffer.mask(eroded)
    edges = dilate(depth_edges(depth, fg, eroded, sigma, low, high), dilate_kernel)
    return ImageBuffer.mask(eroded & ~edges)


def depth_edges(depth: ImageBuffer, fg: np.ndarray, mask: Optional[np.ndarray] = None,
                sigma: float = CANNY_SIGMA, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> np.ndarray:
    """Canny edges of the depth normalized to [0, 1] over the foreground, restricted to `mask`."""
    mask = fg if mask is None else mask
    if not mask.any():
        return np.zeros(depth.shape, dtype=bool)
    values = depth.data[fg]
    lo, hi = values.min(), values.max()
    normalized = np.zeros(depth.shape)
    if hi > lo:
        normalized[fg] = (values - lo) / (hi - lo)
    normalized = _fill_background(normalized, fg)
    return canny(normalized, sigma=sigma, low_threshold=low, high_threshold=high, mask=mask)


def visible_point_select(pcd: ColoredPointCloud, mesh_depth: ImageBuffer, camera: Camera,
                         tau: float = DEFAULT_TAU) -> ColoredPointCloud:
    """Keep points whose projection lands on the rendered surface within tau."""
    if len(pcd) == 0:
        return pcd
    uv, z = camera.project(pcd.points)
    rendered, inside = sample_depth(mesh_depth, uv)
    keep = inside & (rendered > 0) & (np.abs(rendered - z) < tau)
    logging.debug(f"visible point selection kept {int(keep.sum())}/{len(pcd)} points")
    return pcd.subset(keep)


def reproject_pcd(pcd: ColoredPointCloud, target: Camera,
                  background=(0.0, 0.0, 0.0)):
    """
    Splat points into `target` with one-pixel footprints; the nearest point wins.

    Returns:
        (rgb ImageBuffer, visibility mask ImageBuffer)
    """
    height, width = target.height, target.width
    rgb = np.tile(np.asarray(background, dtype=np.float64), (height * width, 1))
    hit = np.zeros(height * width, dtype=bool)
    if len(pcd):
        uv, z = target.project(pcd.points)
        col = np.floor(uv[:, 0])
        row = np.floor(uv[:, 1])
        ok = np.isfinite(col) & np.isfinite(row) & (z > 0)
        ok &= (col >= 0) & (col < width) & (row >= 0) & (row < height)
        pix = (row[ok] * width + col[ok]).astype(np.int64)
        depth = z[ok]
        colors = pcd.colors[ok]
        order = np.lexsort((depth, pix))
        pix, colors = pix[order], colors[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        rgb[pix[first]] = colors[first]
        hit[pix[first]] = True
    return (ImageBuffer.rgb(np.clip(rgb, 0.0, 1.0).reshape(height, width, 3)),
            ImageBuffer.mask(hit.reshape(height, width)))


def perspective_to_orthographic(rgb: ImageBuffer, depth: ImageBuffer, camera: Camera, scene,
                                rig: CanonicalRig, tau: float = DEFAULT_TAU, fg_mask=None,
                                threads: Optional[int] = None) -> PartialViewSet:
    """
    Full transform from one perspective observation to the canonical partial views.

    Args:
        rgb, depth: the observation (depth in the input camera's units)
        camera: input camera
        scene: initialization meshes in the input camera's world frame
        rig: canonical rig; its (center, scale) maps world into canonical space
        tau: visibility threshold for point selection
        fg_mask: optional person mask; defaults to depth > 0

    Returns:
        PartialViewSet with partial RGB for views 0, 1, 5 and initialization normals for all six
    """
    scene = as_scene(scene)
    fg = depth.foreground() if fg_mask is None else (
        fg_mask.data.astype(bool) if isinstance(fg_mask, ImageBuffer) else np.asarray(fg_mask, dtype=bool)
    )
    validity = depth_edge_filter(depth, fg)
    pcd = depth_to_pointcloud(depth, rgb, camera, validity)
    mesh_depth = rasterize(scene, camera, threads=threads).depth
    visible = visible_point_select(pcd, mesh_depth, camera, tau)
    logging.info(f"point cloud: {len(pcd)} valid pixels, {len(visible)} front-visible")

    half = rig.scale / 2.0
    canonical = ColoredPointCloud((visible.points - rig.center) / half, visible.colors, visible.source_pixel)
    canonical_scene = transform_scene(scene, rig.center, rig.scale)

    views = PartialViewSet()
    for index in PARTIAL_VIEW_INDICES:
        views.partial_rgb[index], views.visibility[index] = reproject_pcd(canonical, rig.cameras[index])
    for index, cam in enumerate(rig.cameras):
        render = rasterize(canonical_scene, cam, threads=threads)
        views.smplx_normals[index] = render.normal
        views.smplx_depths[index] = render.depth
    return views


def save_partial_views(views: PartialViewSet, rig: CanonicalRig, out_dir) -> List[Path]:
    """Write `view_{azimuth}/{rgb.png, mask.png, depth.pfm, normal.pfm}` per rig view."""
    out_dir = Path(out_dir)
    written = []
    for index, azimuth in enumerate(rig.azimuths):
        view_dir = out_dir / f"view_{int(round(azimuth))}"
        view_dir.mkdir(parents=True, exist_ok=True)
        if index in views.partial_rgb:
            mesh_io.write_rgb(view_dir / "rgb.png", views.partial_rgb[index])
            mesh_io.write_mask(view_dir / "mask.png", views.visibility[index])
        if index in views.smplx_normals:
            mesh_io.write_pfm(view_dir / "normal.pfm", views.smplx_normals[index].data)
        if index in views.smplx_depths:
            mesh_io.write_pfm(view_dir / "depth.pfm", views.smplx_depths[index].data)
        written.append(view_dir)
    return written


# ---------------------------------------------------------------- geometry refinement

def standardize(values: np.ndarray):
    """Zero-mean, unit-std version of `values` plus the std used."""
    mean = values.mean()
    std = np.sqrt(values.var() + STD_FLOOR)
    return (values - mean) / std, std


def standardize_backward(standardized: np.ndarray, std: float, grad: np.ndarray) -> np.ndarray:
    return (grad - grad.mean() - standardized * (grad * standardized).mean()) / std


class GeometryLoss:
    """
    Depth + normal agreement between a mesh render and predicted maps:
    sum of (d'_target - d'_mesh)^2 + 1 - <n_target, n_mesh> over valid pixels,
    where d' is depth standardized over those pixels.
    """

    def __init__(self, mesh: Mesh, target_depth: ImageBuffer, target_normal: ImageBuffer,
                 camera: Camera, threads: Optional[int] = None):
        if target_depth.shape != (camera.height, camera.width) or target_normal.shape != target_depth.shape:
            raise InputError("target maps must match the camera resolution")
        self.mesh = mesh
        self.camera = camera
        self.threads = threads
        self.target_depth = target_depth.data
        self.target_normal = target_normal.data
        self.target_valid = target_depth.foreground() & target_normal.foreground()

    def freeze(self, vertices: np.ndarray) -> FrozenView:
        render = rasterize(Scene((self.mesh.with_vertices(vertices),)), self.camera, threads=self.threads)
        valid = render.foreground & self.target_valid
        if not valid.any():
            raise InputError("rendered mesh and target maps share no foreground pixels")
        return FrozenView(render, self.camera, self.mesh.faces, self.mesh.vertex_count, valid)

    def _targets(self, view: FrozenView):
        flat_depth = self.target_depth.ravel()[view.pixels]
        flat_normal = self.target_normal.reshape(-1, 3)[view.pixels]
        return flat_depth, flat_normal

    def value(self, vertices: np.ndarray, view: FrozenView) -> float:
        target_depth, target_normal = self._targets(view)
        rendered, _ = standardize(view.depth(vertices))
        target, _ = standardize(target_depth)
        depth_term = ((target - rendered) ** 2).sum()
        normal_term = (1.0 - np.einsum("pd,pd->p", target_normal, view.normals(vertices))).sum()
        return float(depth_term + normal_term)

    def value_and_grad(self, vertices: np.ndarray, view: FrozenView):
        target_depth, target_normal = self._targets(view)
        rendered, std = standardize(view.depth(vertices))
        target, _ = standardize(target_depth)
        residual = rendered - target
        normals = view.normals(vertices)
        loss = float((residual ** 2).sum() + (1.0 - np.einsum("pd,pd->p", target_normal, normals)).sum())
        g_depth = standardize_backward(rendered, std, 2.0 * residual)
        grad = view.depth_backward(vertices, g_depth) + view.normals_backward(vertices, -target_normal)
        return loss, grad


def refine_partial_geometry(mesh: Mesh, target_depth: ImageBuffer, target_normal: ImageBuffer,
                            camera: Camera, iters: int = 200, lr: float = 0.02,
                            loss_trace: Optional[list] = None, progress: bool = False,
                            remesh: Optional[Callable[[Mesh], Mesh]] = None,
                            threads: Optional[int] = None) -> Mesh:
    """
    Fit mesh vertices to predicted depth (affine-invariant) and normal maps with Adam.

    Coverage is re-rasterized every iteration and held fixed for that step's
    gradient. The lowest-loss iterate is returned.

    Args:
        mesh: partial mesh, at least 4 vertices
        target_depth, target_normal: predictions in `camera` (normals camera-frame, facing the viewer)
        camera: camera of the predictions
        iters: optimizer steps
        lr: Adam step size
        loss_trace: optional list receiving the loss per iteration
        progress: show a progress bar
        remesh: optional hook applied to the result

    Returns:
        refined Mesh
    """
    if mesh.vertex_count < 4:
        raise InputError("partial geometry refinement needs at least 4 vertices")
    if iters < 0:
        raise InputError(f"iters must be >= 0, got {iters}")
    objective = GeometryLoss(mesh, target_depth, target_normal, camera, threads)
    vertices = np.array(mesh.vertices)
    optimizer = Adam(vertices.shape, lr=lr)
    best_vertices, best_loss = vertices.copy(), np.inf

    for step in tqdm(range(iters + 1), desc="refine partial geometry", disable=not progress):
        view = objective.freeze(vertices)
        loss, grad = objective.value_and_grad(vertices, view)
        if not np.isfinite(loss):
            if step == 0:
                raise NumericalError("partial geometry loss is not finite at the start")
            logging.warning(f"geometry loss became non-finite at iteration {step}; keeping the best iterate")
            break
        if loss_trace is not None:
            loss_trace.append(loss)
        if loss < best_loss:
            best_loss, best_vertices = loss, vertices.copy()
        if step == iters:
            break
        candidate = optimizer.step(vertices, grad)
        if not np.all(np.isfinite(candidate)):
            logging.warning(f"non-finite vertices at iteration {step}; keeping the best iterate")
            break
        vertices = candidate

    logging.info(f"partial geometry loss {loss_trace[0] if loss_trace else best_loss:.6f} -> {best_loss:.6f}")
    refined = mesh.with_vertices(best_vertices)
    return remesh(refined) if remesh is not None else refined
