"""
Multi-view texture fusion onto mesh vertices.

Every vertex samples each view's RGB at its projection. A sample counts when
the vertex is visible in that view's depth and lies away from depth
discontinuities; it is weighted by how frontally the vertex faces the
camera. Vertices no view saw take the color of the nearest colored vertex
along mesh edges.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import breadth_first_order

import mesh_io
from canonical import dilate
from hug_config import resolve_threads
from mesh_core import Camera, ImageBuffer, InputError, Mesh, compute_vertex_normals
from pers2ortho import depth_edges
from rasterizer import DEFAULT_VISIBILITY_EPS, sample_depth

UNSEEN_GRAY = 0.5
# edge band: 21 px at a 768 px frame
DEFAULT_CONFIDENCE_KERNEL = 21
CONFIDENCE_KERNEL_REFERENCE = 768


def confidence_kernel(resolution: int) -> int:
    """Odd edge-band width scaled to the view resolution."""
    if resolution < 1:
        raise InputError(f"resolution must be positive, got {resolution}")
    return max(1, int(round(DEFAULT_CONFIDENCE_KERNEL * resolution / CONFIDENCE_KERNEL_REFERENCE))) | 1


@dataclass(frozen=True, eq=False)
class ViewContribution:
    view_index: int
    confidence_mask: ImageBuffer
    rgb: ImageBuffer
    per_vertex_weight: np.ndarray
    samples: np.ndarray


def edge_confidence_mask(depth: ImageBuffer, fg_mask=None,
                         dilate_kernel: int = DEFAULT_CONFIDENCE_KERNEL) -> ImageBuffer:
    """Foreground pixels outside a dilated band around depth discontinuities."""
    if fg_mask is None:
        fg = depth.foreground()
    else:
        fg = fg_mask.data.astype(bool) if isinstance(fg_mask, ImageBuffer) else np.asarray(fg_mask, dtype=bool)
    if fg.shape != depth.shape:
        raise InputError(f"mask {fg.shape} and depth {depth.shape} differ in size")
    edges = dilate(depth_edges(depth, fg), dilate_kernel)
    return ImageBuffer.mask(fg & ~edges)


def sample_bilinear(image: ImageBuffer, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates (pixel centers at +0.5)."""
    coords = np.stack([uv[:, 1] - 0.5, uv[:, 0] - 0.5])
    data = image.data if image.data.ndim == 3 else image.data[:, :, None]
    channels = [
        ndimage.map_coordinates(data[:, :, c], coords, order=1, mode="nearest")
        for c in range(data.shape[2])
    ]
    return np.stack(channels, axis=1)


def _toward_camera(camera: Camera, vertices: np.ndarray) -> np.ndarray:
    if camera.is_perspective:
        direction = camera.center - vertices
        return direction / np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    return np.tile(-camera.forward, (len(vertices), 1))


def view_contribution(index: int, mesh: Mesh, normals: np.ndarray, camera: Camera, rgb: ImageBuffer,
                      depth: ImageBuffer, visible: Optional[np.ndarray] = None,
                      dilate_kernel: int = DEFAULT_CONFIDENCE_KERNEL,
                      eps: float = DEFAULT_VISIBILITY_EPS) -> ViewContribution:
    """Samples and weights of one view for every vertex."""
    if rgb.shape != depth.shape or depth.shape != (camera.height, camera.width):
        raise InputError(f"view {index}: rgb, depth and camera sizes disagree")
    confidence = edge_confidence_mask(depth, depth.foreground(), dilate_kernel)
    uv, z = camera.project(mesh.vertices)
    rendered, inside = sample_depth(depth, uv)
    if visible is None:
        visible = inside & (z > 0) & (rendered > 0) & (np.abs(rendered - z) < eps)
    visible = np.asarray(visible, dtype=bool) & inside

    confident = np.zeros(mesh.vertex_count, dtype=bool)
    rows = np.floor(uv[inside, 1]).astype(np.int64)
    cols = np.floor(uv[inside, 0]).astype(np.int64)
    confident[inside] = confidence.data[rows, cols] == 1

    facing = np.einsum("pd,pd->p", normals, _toward_camera(camera, mesh.vertices))
    weight = np.where(visible & confident, np.maximum(facing, 0.0), 0.0)
    samples = np.zeros((mesh.vertex_count, 3))
    samples[inside] = sample_bilinear(rgb, uv[inside])
    return ViewContribution(index, confidence, rgb, weight, samples)


def fill_unseen(mesh: Mesh, colors: np.ndarray, seen: np.ndarray) -> np.ndarray:
    """Give unseen vertices the color of the nearest seen vertex by edge hops."""
    colors = colors.copy()
    if seen.all():
        return colors
    if not seen.any():
        logging.warning("no view saw the mesh; using uniform gray")
        colors[:] = UNSEEN_GRAY
        return colors
    n = mesh.vertex_count
    f = mesh.faces
    src = np.concatenate([f[:, 0], f[:, 1], f[:, 2], np.full(int(seen.sum()), n)])
    dst = np.concatenate([f[:, 1], f[:, 2], f[:, 0], np.nonzero(seen)[0]])
    graph = sparse.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n + 1, n + 1)).tocsr()
    order, predecessors = breadth_first_order(graph, n, directed=False, return_predecessors=True)
    for v in order[1:]:
        if not seen[v]:
            colors[v] = colors[predecessors[v]]
    reached = np.zeros(n + 1, dtype=bool)
    reached[order] = True
    lost = ~reached[:n]
    if lost.any():
        logging.warning(f"{int(lost.sum())} vertices are not connected to any seen vertex; using gray")
        colors[lost] = UNSEEN_GRAY
    return colors


def fuse_texture(mesh: Mesh, views: Sequence[Tuple[Camera, ImageBuffer, ImageBuffer]],
                 visibility: Optional[Sequence[np.ndarray]] = None,
                 dilate_kernel: Optional[int] = None,
                 restore_view: Optional[Callable[[int, ImageBuffer], ImageBuffer]] = None,
                 debug_dir=None, threads: Optional[int] = None,
                 contributions: Optional[List[ViewContribution]] = None) -> Mesh:
    """
    Blend view colors onto the vertices.

    Args:
        mesh: target mesh
        views: (camera, rgb, depth) per view; depth is the view's render of the mesh
        visibility: optional per-view vertex visibility; derived from depth when omitted
        dilate_kernel: width of the discarded band around depth edges;
            scaled from each view's resolution when omitted
        restore_view: optional hook returning a replacement image for view i
        debug_dir: when set, write each view's confidence-masked image as PNG
        contributions: optional list receiving the per-view contributions

    Returns:
        mesh with vertex_colors
    """
    if not views:
        raise InputError("texture fusion needs at least one view")
    if visibility is not None and len(visibility) != len(views):
        raise InputError(f"{len(visibility)} visibility arrays for {len(views)} views")
    normals = compute_vertex_normals(mesh).normals

    def contribute(i):
        camera, rgb, depth = views[i]
        if restore_view is not None:
            rgb = restore_view(i, rgb)
        visible = None if visibility is None else visibility[i]
        kernel = confidence_kernel(max(depth.shape)) if dilate_kernel is None else dilate_kernel
        return view_contribution(i, mesh, normals, camera, rgb, depth, visible, kernel)

    workers = min(resolve_threads(threads), len(views))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(contribute, range(len(views))))
    else:
        parts = [contribute(i) for i in range(len(views))]

    total = np.zeros(mesh.vertex_count)
    accumulated = np.zeros((mesh.vertex_count, 3))
    for part in parts:
        total += part.per_vertex_weight
        accumulated += part.per_vertex_weight[:, None] * part.samples
    seen = total > 0
    colors = np.zeros((mesh.vertex_count, 3))
    colors[seen] = accumulated[seen] / total[seen, None]
    colors = np.clip(fill_unseen(mesh, colors, seen), 0.0, 1.0)
    logging.info(f"texture fusion: {int(seen.sum())}/{mesh.vertex_count} vertices seen in {len(views)} views")

    if debug_dir is not None:
        debug_dir = Path(debug_dir)
        debug_dir.mkdir(parents=True, exist_ok=True)
        for part in parts:
            masked = part.rgb.data * part.confidence_mask.data[:, :, None]
            mesh_io.write_rgb(debug_dir / f"contribution_{part.view_index}.png", masked)
    if contributions is not None:
        contributions.extend(parts)
    return mesh.with_colors(colors)
