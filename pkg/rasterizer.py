"""
Deterministic z-buffer rasterizer.

Produces depth, camera-space normal, RGB, instance-id and body-part buffers
for a Scene seen through a Camera. Pixel (i, j) samples the continuous point
(i + 0.5, j + 0.5); shared edges follow the top-left fill rule; back faces are
drawn and their normals flipped toward the viewer. Work is split into row
bands that may run on a thread pool; the winner at each pixel is the smallest
(depth, face index) pair, so output does not depend on the thread count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

import mesh_io
from hug_config import resolve_threads
from mesh_core import (
    BACKGROUND_DEPTH,
    Camera,
    ImageBuffer,
    Mesh,
    Scene,
    area_weighted_vertex_normals,
    face_cross_products,
    majority_face_labels,
)
from spatial_index import points_within

NEAR_PLANE = 1e-6
MAX_CANDIDATES = 2_000_000
DEFAULT_VISIBILITY_EPS = 0.01
NO_FACE = np.iinfo(np.int64).max


@dataclass(frozen=True, eq=False)
class RenderOutput:
    """
    Buffers from one rasterization.

    `face_index_map` indexes the faces of `scene.merged()`; together with
    `barycentrics` (perspective-correct) and `normal_flip` it pins the
    coverage so losses can be differentiated with the assignment held fixed.
    """

    depth: ImageBuffer
    normal: ImageBuffer
    instance_map: ImageBuffer
    face_index_map: np.ndarray
    barycentrics: np.ndarray
    normal_flip: np.ndarray
    rgb: Optional[ImageBuffer] = None
    part_masks: Optional[Dict[Tuple[int, int], ImageBuffer]] = None

    @property
    def foreground(self) -> np.ndarray:
        return self.face_index_map >= 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.face_index_map.shape


class _Triangles:
    """Screen-space triangles normalized to positive signed area."""

    def __init__(self, uv: np.ndarray, z: np.ndarray, faces: np.ndarray, camera: Camera):
        face_z = z[faces]
        corners = uv[faces]
        valid = np.all(face_z > NEAR_PLANE, axis=1) & np.all(np.isfinite(corners), axis=(1, 2))
        p0, p1, p2 = corners[:, 0], corners[:, 1], corners[:, 2]
        area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
        valid &= np.abs(area) > 1e-12

        self.face = np.nonzero(valid)[0]
        swap = area[valid] < 0
        self.swap = swap
        p0, p1, p2 = p0[valid], p1[valid], p2[valid]
        z0, z1, z2 = face_z[valid, 0], face_z[valid, 1], face_z[valid, 2]
        p1, p2 = np.where(swap[:, None], p2, p1), np.where(swap[:, None], p1, p2)
        z1, z2 = np.where(swap, z2, z1), np.where(swap, z1, z2)
        self.p = (p0, p1, p2)
        self.z = (z0, z1, z2)
        self.area = np.abs(area[valid])
        self.perspective = camera.is_perspective

        # top-left rule per edge (a -> b) with v growing downward
        def top_left(a, b):
            dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
            return (dy < 0) | ((dy == 0) & (dx > 0))

        self.top_left = (top_left(p1, p2), top_left(p2, p0), top_left(p0, p1))

        us = np.stack([p0[:, 0], p1[:, 0], p2[:, 0]], axis=1)
        vs = np.stack([p0[:, 1], p1[:, 1], p2[:, 1]], axis=1)
        self.umin = np.maximum(0, np.ceil(us.min(axis=1) - 0.5)).astype(np.int64)
        self.umax = np.minimum(camera.width - 1, np.floor(us.max(axis=1) - 0.5)).astype(np.int64)
        self.vmin = np.maximum(0, np.ceil(vs.min(axis=1) - 0.5)).astype(np.int64)
        self.vmax = np.minimum(camera.height - 1, np.floor(vs.max(axis=1) - 0.5)).astype(np.int64)
        self.width = camera.width


def _edge(a, b, x, y):
    return (b[:, 0] - a[:, 0]) * (y - a[:, 1]) - (b[:, 1] - a[:, 1]) * (x - a[:, 0])


def _covers(w, top_left):
    return (w > 0) | ((w == 0) & top_left)


def _raster_band(tris: _Triangles, row0: int, row1: int):
    """Winning (depth, face, barycentrics) for every pixel of rows [row0, row1)."""
    width = tris.width
    size = (row1 - row0) * width
    best_depth = np.full(size, np.inf)
    best_face = np.full(size, NO_FACE, dtype=np.int64)
    best_bary = np.zeros((size, 3))

    vmin = np.maximum(tris.vmin, row0)
    vmax = np.minimum(tris.vmax, row1 - 1)
    nx = np.maximum(tris.umax - tris.umin + 1, 0)
    ny = np.maximum(vmax - vmin + 1, 0)
    counts = nx * ny
    active = np.nonzero(counts > 0)[0]
    if active.size == 0:
        return best_depth, best_face, best_bary

    cumulative = np.cumsum(counts[active])
    begin = 0
    while begin < active.size:
        limit = (cumulative[begin - 1] if begin else 0) + MAX_CANDIDATES
        end = max(begin + 1, int(np.searchsorted(cumulative, limit, side="right")))
        sel = active[begin:end]
        begin = end

        c = counts[sel]
        rep = np.repeat(sel, c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        cols = nx[rep]
        px = tris.umin[rep] + local % cols
        py = vmin[rep] + local // cols
        sx = px + 0.5
        sy = py + 0.5

        p0, p1, p2 = (p[rep] for p in tris.p)
        w0 = _edge(p1, p2, sx, sy)
        w1 = _edge(p2, p0, sx, sy)
        w2 = _edge(p0, p1, sx, sy)
        tl0, tl1, tl2 = (t[rep] for t in tris.top_left)
        inside = _covers(w0, tl0) & _covers(w1, tl1) & _covers(w2, tl2)
        if not inside.any():
            continue

        rep, px, py = rep[inside], px[inside], py[inside]
        area = tris.area[rep]
        lam = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / area[:, None]
        z = np.stack([t[rep] for t in tris.z], axis=1)
        if tris.perspective:
            depth = 1.0 / (lam / z).sum(axis=1)
            bary = lam / z * depth[:, None]
        else:
            depth = (lam * z).sum(axis=1)
            bary = lam
        # undo the winding normalization so weights follow the face's corners
        swap = tris.swap[rep]
        bary[swap] = bary[swap][:, [0, 2, 1]]

        face = tris.face[rep]
        pix = (py - row0) * width + px
        order = np.lexsort((face, depth, pix))
        pix, depth, face, bary = pix[order], depth[order], face[order], bary[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, depth, face, bary = pix[first], depth[first], face[first], bary[first]

        better = (depth < best_depth[pix]) | ((depth == best_depth[pix]) & (face < best_face[pix]))
        pix = pix[better]
        best_depth[pix] = depth[better]
        best_face[pix] = face[better]
        best_bary[pix] = bary[better]

    return best_depth, best_face, best_bary


def view_rays(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """Camera-space viewing direction through the centers of flat pixel indices."""
    u = (pixels % camera.width) + 0.5
    v = (pixels // camera.width) + 0.5
    _, directions = camera.pixel_rays(np.stack([u, v], axis=1))
    return directions


def interpolate_normals(vertex_normals_cam: np.ndarray, corner_index: np.ndarray,
                        bary: np.ndarray, rays: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Barycentric blend of camera-space vertex normals, renormalized and turned
    toward the viewer.

    Returns:
        unit normals (P, 3), flip sign (P,), raw blend length (P,)
    """
    blend = np.einsum("pk,pkd->pd", bary, vertex_normals_cam[corner_index])
    length = np.linalg.norm(blend, axis=1)
    unit = np.divide(blend, length[:, None], out=np.zeros_like(blend), where=length[:, None] > 1e-12)
    flip = np.where(np.einsum("pd,pd->p", unit, rays) > 0, -1.0, 1.0)
    return unit * flip[:, None], flip, length


def rasterize(scene: Scene, camera: Camera, render_rgb: bool = False,
              render_parts: bool = False, threads: Optional[int] = None,
              background: Sequence[float] = (0.0, 0.0, 0.0)) -> RenderOutput:
    """
    Rasterize every instance of `scene` through `camera`.

    Args:
        scene: meshes to draw (non-empty)
        camera: perspective or orthographic camera
        render_rgb: interpolate vertex colors (gray where an instance has none)
        render_parts: emit one mask per (instance, part label)
        threads: row-band workers; None reads HUG_GEOM_THREADS
        background: RGB for uncovered pixels

    Returns:
        RenderOutput; faces crossing the near plane are skipped whole
    """
    merged = scene.merged()
    height, width = camera.height, camera.width
    cam_vertices = camera.world_to_camera(merged.vertices)
    uv, z = camera.project_camera(cam_vertices)
    tris = _Triangles(uv, z, merged.faces, camera)

    workers = min(resolve_threads(threads), height)
    bounds = np.linspace(0, height, workers + 1).astype(int)
    bands = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(bands) > 1:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            results = list(pool.map(lambda band: _raster_band(tris, *band), bands))
    else:
        results = [_raster_band(tris, *band) for band in bands]

    depth = np.concatenate([r[0] for r in results])
    face = np.concatenate([r[1] for r in results])
    bary = np.concatenate([r[2] for r in results])
    fg = face != NO_FACE
    face = np.where(fg, face, -1)
    depth = np.where(fg, depth, BACKGROUND_DEPTH)
    bary[~fg] = 0.0
    pixels = np.nonzero(fg)[0]
    hit_faces = face[pixels]

    instance_map = np.zeros(height * width, dtype=np.int64)
    instance_map[pixels] = merged.face_instance[hit_faces]

    vertex_normals, _ = area_weighted_vertex_normals(merged.vertices, merged.faces)
    corner_index = merged.faces[hit_faces]
    rays = view_rays(camera, pixels)
    normals, flip, length = interpolate_normals(
        vertex_normals @ camera.rotation.T, corner_index, bary[pixels], rays
    )
    weak = length <= 1e-12
    if weak.any():
        face_normals = face_cross_products(cam_vertices, merged.faces[hit_faces[weak]])
        face_normals /= np.linalg.norm(face_normals, axis=1, keepdims=True)
        turn = np.where(np.einsum("pd,pd->p", face_normals, rays[weak]) > 0, -1.0, 1.0)
        normals[weak] = face_normals * turn[:, None]
        flip[weak] = turn
    normal_image = np.zeros((height * width, 3))
    normal_image[pixels] = normals
    flip_image = np.zeros(height * width)
    flip_image[pixels] = flip

    rgb = None
    if render_rgb:
        colors = np.concatenate([
            mesh.vertex_colors if mesh.vertex_colors is not None
            else np.full((mesh.vertex_count, 3), 0.5)
            for mesh in scene.instances
        ])
        rgb_image = np.tile(np.asarray(background, dtype=np.float64), (height * width, 1))
        rgb_image[pixels] = np.clip(np.einsum("pk,pkd->pd", bary[pixels], colors[corner_index]), 0.0, 1.0)
        rgb = ImageBuffer.rgb(rgb_image.reshape(height, width, 3))

    part_masks = None
    if render_parts:
        part_masks = {}
        face_labels = np.full(len(merged.faces), -1, dtype=np.int64)
        for k, mesh in enumerate(scene.instances):
            if mesh.part_labels is None:
                logging.warning(f"instance {mesh.instance_id} has no part labels; no part masks")
                continue
            face_labels[merged.face_offsets[k]:merged.face_offsets[k + 1]] = majority_face_labels(
                mesh.part_labels, mesh.faces
            )
        label_image = np.full(height * width, -1, dtype=np.int64)
        label_image[pixels] = face_labels[hit_faces]
        for mesh in scene.instances:
            if mesh.part_labels is None:
                continue
            own = instance_map == mesh.instance_id
            for label in np.unique(mesh.part_labels):
                mask = own & (label_image == label)
                part_masks[(mesh.instance_id, int(label))] = ImageBuffer.mask(mask.reshape(height, width))

    return RenderOutput(
        depth=ImageBuffer.depth(depth.reshape(height, width)),
        normal=ImageBuffer.normal(normal_image.reshape(height, width, 3)),
        instance_map=ImageBuffer.instance(instance_map.reshape(height, width)),
        face_index_map=face.reshape(height, width),
        barycentrics=bary.reshape(height, width, 3),
        normal_flip=flip_image.reshape(height, width),
        rgb=rgb,
        part_masks=part_masks,
    )


def sample_depth(depth: ImageBuffer, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-pixel depth lookup; returns (depth or background, in-bounds flag)."""
    col = np.floor(uv[:, 0])
    row = np.floor(uv[:, 1])
    inside = np.isfinite(col) & np.isfinite(row)
    inside &= (col >= 0) & (col < depth.width) & (row >= 0) & (row < depth.height)
    sampled = np.full(len(uv), BACKGROUND_DEPTH)
    sampled[inside] = depth.data[row[inside].astype(np.int64), col[inside].astype(np.int64)]
    return sampled, inside


def vertex_visibility(mesh: Mesh, scene: Scene, camera: Camera,
                      eps: float = DEFAULT_VISIBILITY_EPS,
                      render: Optional[RenderOutput] = None) -> np.ndarray:
    """True where a vertex projects in bounds and lies within eps of the rendered depth."""
    if render is None:
        render = rasterize(scene, camera)
    uv, z = camera.project(mesh.vertices)
    rendered, inside = sample_depth(render.depth, uv)
    return inside & (z > 0) & (rendered > 0) & (np.abs(rendered - z) < eps)


def contact_vertices(scene: Scene, contact_radius: float) -> Dict[int, np.ndarray]:
    """Per instance, a boolean mark of vertices within contact_radius of another instance."""
    marks = {mesh.instance_id: np.zeros(mesh.vertex_count, dtype=bool) for mesh in scene.instances}
    for a, mesh_a in enumerate(scene.instances):
        for mesh_b in scene.instances[a + 1:]:
            hits = points_within(mesh_a.vertices, mesh_b.vertices, contact_radius)
            for i, neighbours in enumerate(hits):
                if len(neighbours):
                    marks[mesh_a.instance_id][i] = True
                    marks[mesh_b.instance_id][neighbours] = True
    return marks


def render_contact_mask(scene: Scene, camera: Camera, contact_radius: float = 0.02,
                        render: Optional[RenderOutput] = None) -> ImageBuffer:
    """Pixels whose visible face touches an inter-instance contact vertex."""
    if render is None:
        render = rasterize(scene, camera)
    marks = contact_vertices(scene, contact_radius)
    merged = scene.merged()
    vertex_mark = np.concatenate([marks[mesh.instance_id] for mesh in scene.instances])
    face_mark = vertex_mark[merged.faces].any(axis=1)
    fg = render.foreground
    mask = np.zeros(render.shape, dtype=bool)
    mask[fg] = face_mark[render.face_index_map[fg]]
    return ImageBuffer.mask(mask)


def save_render(output: RenderOutput, directory) -> Path:
    """depth/normal as PFM, rgb and masks as PNG, instances as 16-bit PNG, faces as raw int32."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mesh_io.write_pfm(directory / "depth.pfm", output.depth.data)
    mesh_io.write_pfm(directory / "normal.pfm", output.normal.data)
    mesh_io.write_png16(directory / "instance.png", output.instance_map.data)
    mesh_io.write_int_grid(directory / "faces.bin", output.face_index_map)
    mesh_io.write_mask(directory / "mask.png", output.foreground)
    if output.rgb is not None:
        mesh_io.write_rgb(directory / "rgb.png", output.rgb)
    if output.part_masks:
        for (instance_id, label), mask in sorted(output.part_masks.items()):
            mesh_io.write_mask(directory / "parts" / f"instance_{instance_id}_part_{label}.png", mask)
    return directory
