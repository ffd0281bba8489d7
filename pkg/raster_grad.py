"""
Frozen-coverage derivatives of rendered depth and normals.

A FrozenView records which face covers each foreground pixel and with what
barycentric weights. Holding that assignment fixed, rendered depth and normal
become smooth functions of the vertex positions; this module evaluates them
and pulls pixel-space gradients back onto the vertices.
"""

from typing import Optional

import numpy as np

from mesh_core import Camera, InputError, area_weighted_vertex_normals
from rasterizer import RenderOutput, view_rays


def scatter_corners(grad_a: np.ndarray, grad_b: np.ndarray, grad_c: np.ndarray,
                    faces: np.ndarray, vertex_count: int) -> np.ndarray:
    """Sum per-corner (P, 3) gradients onto the vertices named by `faces`."""
    out = np.zeros((vertex_count, 3))
    for corner, grad in enumerate((grad_a, grad_b, grad_c)):
        for axis in range(3):
            out[:, axis] += np.bincount(faces[:, corner], weights=grad[:, axis], minlength=vertex_count)
    return out


def _unit_backward(direction: np.ndarray, length: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient through x -> x/|x| given the unit result and |x|."""
    radial = np.einsum("pd,pd->p", direction, grad)
    safe = np.where(length > 1e-300, length, 1.0)
    out = (grad - direction * radial[:, None]) / safe[:, None]
    out[length <= 1e-300] = 0.0
    return out


class FrozenView:
    """
    Coverage of one render held fixed for differentiation.

    Args:
        render: output of rasterize()
        camera: the camera used for the render
        faces: (F, 3) faces of the rendered scene, as indices into the
            optimized vertex array (so sub-scene renders map to global vertices)
        vertex_count: length of the optimized vertex array
        pixel_mask: optional (H, W) mask restricting the tracked pixels
    """

    def __init__(self, render: RenderOutput, camera: Camera, faces: np.ndarray,
                 vertex_count: int, pixel_mask: Optional[np.ndarray] = None):
        fg = render.foreground
        if pixel_mask is not None:
            fg = fg & np.asarray(pixel_mask, dtype=bool)
        self.camera = camera
        self.shape = render.shape
        self.vertex_count = int(vertex_count)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.all_faces = self.faces
        flat = np.nonzero(fg.ravel())[0]
        self.pixels = flat
        self.face = render.face_index_map.ravel()[flat]
        if len(self.face) and self.face.max() >= len(self.faces):
            raise InputError("render does not match the supplied face list")
        self.corners = self.faces[self.face]
        self.bary = render.barycentrics.reshape(-1, 3)[flat]
        self.flip = render.normal_flip.ravel()[flat]
        u = (flat % camera.width) + 0.5
        v = (flat // camera.width) + 0.5
        self.origins, self.directions = camera.pixel_rays(np.stack([u, v], axis=1))
        self.rays = view_rays(camera, flat)

    def __len__(self) -> int:
        return len(self.pixels)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        out[self.pixels] = True
        return out.reshape(self.shape)

    def _corners_cam(self, vertices: np.ndarray):
        cam = self.camera.world_to_camera(vertices)
        return cam[self.corners[:, 0]], cam[self.corners[:, 1]], cam[self.corners[:, 2]]

    def depth(self, vertices: np.ndarray) -> np.ndarray:
        """Ray/plane depth of every tracked pixel."""
        a, b, c = self._corners_cam(vertices)
        normal = np.cross(b - a, c - a)
        num = np.einsum("pd,pd->p", normal, a - self.origins)
        den = np.einsum("pd,pd->p", normal, self.directions)
        return num / den

    def depth_backward(self, vertices: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Vertex gradient (world frame) of sum(grad * depth)."""
        a, b, c = self._corners_cam(vertices)
        e1, e2 = b - a, c - a
        normal = np.cross(e1, e2)
        w = a - self.origins
        d = self.directions
        num = np.einsum("pd,pd->p", normal, w)
        den = np.einsum("pd,pd->p", normal, d)
        t = num / den

        num_b, num_c = np.cross(e2, w), np.cross(w, e1)
        num_a = normal - num_b - num_c
        den_b, den_c = np.cross(e2, d), np.cross(d, e1)
        den_a = -den_b - den_c

        scale = (grad / den)[:, None]
        ga = scale * (num_a - t[:, None] * den_a)
        gb = scale * (num_b - t[:, None] * den_b)
        gc = scale * (num_c - t[:, None] * den_c)
        cam_grad = scatter_corners(ga, gb, gc, self.corners, self.vertex_count)
        return cam_grad @ self.camera.rotation

    def _vertex_normals_cam(self, vertices: np.ndarray):
        unit, sums = area_weighted_vertex_normals(vertices, self.all_faces)
        return unit, sums, unit @ self.camera.rotation.T

    def normals(self, vertices: np.ndarray) -> np.ndarray:
        """Viewer-facing unit normals (camera frame) of every tracked pixel."""
        _, _, cam_normals = self._vertex_normals_cam(vertices)
        blend = np.einsum("pk,pkd->pd", self.bary, cam_normals[self.corners])
        length = np.linalg.norm(blend, axis=1)
        unit = np.divide(blend, length[:, None], out=np.zeros_like(blend), where=length[:, None] > 1e-12)
        return unit * self.flip[:, None]

    def normals_backward(self, vertices: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Vertex gradient (world frame) of sum(grad . normals)."""
        unit, sums, cam_normals = self._vertex_normals_cam(vertices)
        blend = np.einsum("pk,pkd->pd", self.bary, cam_normals[self.corners])
        length = np.linalg.norm(blend, axis=1)
        blend_unit = np.divide(blend, length[:, None], out=np.zeros_like(blend), where=length[:, None] > 1e-12)
        g_blend = _unit_backward(blend_unit, np.where(length > 1e-12, length, 0.0), grad * self.flip[:, None])

        g_cam_normals = scatter_corners(
            self.bary[:, 0:1] * g_blend, self.bary[:, 1:2] * g_blend, self.bary[:, 2:3] * g_blend,
            self.corners, self.vertex_count,
        )
        g_unit = g_cam_normals @ self.camera.rotation
        g_sums = _unit_backward(unit, np.linalg.norm(sums, axis=1), g_unit)

        faces = self.all_faces
        g_face = g_sums[faces].sum(axis=1)
        a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
        e1, e2 = b - a, c - a
        gb = np.cross(e2, g_face)
        gc = np.cross(g_face, e1)
        return scatter_corners(-gb - gc, gb, gc, faces, self.vertex_count)


def check_normals(view: FrozenView, vertices: np.ndarray, render: RenderOutput) -> float:
    """Largest deviation between frozen normals and the rasterizer's; a consistency check."""
    if not len(view):
        return 0.0
    rendered = render.normal.data.reshape(-1, 3)[view.pixels]
    return float(np.abs(view.normals(vertices) - rendered).max())
