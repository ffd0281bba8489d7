#!/usr/bin/env python3
"""
Mesh Core
Geometric and image value types shared by every stage of the reconstruction
pipeline, plus the small amount of mesh topology math they all need.

All world coordinates are meters; depth is meters along the camera's viewing
axis. Cameras follow the pinhole convention X_cam = R @ X_world + T with the
camera looking along its own +Z axis and image rows growing downward.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

BACKGROUND_DEPTH = -1.0
DEGENERATE_AREA = 1e-12
ORTHONORMAL_TOL = 1e-6
NORMAL_TOL = 1e-4

SEMANTICS = ("depth", "normal", "rgb", "mask", "instance")


class HugGeometryError(Exception):
    """Base class for every error raised by the toolkit."""


class InputError(HugGeometryError, ValueError):
    """Invalid user data: shapes, parameters, unreadable or corrupt files."""


class NumericalError(HugGeometryError, ArithmeticError):
    """A loss or a vertex position became non-finite."""


class InvariantError(HugGeometryError, AssertionError):
    """An internal consistency check failed."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Triangle mesh of one person (or any rigid object) in meters.

    Args:
        vertices: (N, 3) positions
        faces: (F, 3) vertex indices, counter-clockwise seen from outside
        vertex_colors: optional (N, 3) RGB in [0, 1]
        part_labels: optional (N,) integer body-part ids
        instance_id: which person this mesh belongs to (>= 1)
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: Optional[np.ndarray] = None
    part_labels: Optional[np.ndarray] = None
    instance_id: int = 1

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise InputError(f"vertices must be (N, 3), got {vertices.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise InputError(f"faces must be (F, 3), got {faces.shape}")
        if not np.all(np.isfinite(vertices)):
            raise InputError("vertices contain non-finite values")
        if len(faces):
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise InputError(
                    f"face index out of range for {len(vertices)} vertices"
                )
            repeated = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if repeated.any():
                raise InputError(
                    f"{int(repeated.sum())} faces repeat a vertex index"
                )
        object.__setattr__(self, "vertices", _frozen(vertices))
        object.__setattr__(self, "faces", _frozen(faces))

        if self.vertex_colors is not None:
            colors = np.asarray(self.vertex_colors, dtype=np.float64)
            if colors.shape != vertices.shape:
                raise InputError(
                    f"vertex_colors must be {vertices.shape}, got {colors.shape}"
                )
            if colors.size and (colors.min() < 0.0 or colors.max() > 1.0):
                raise InputError("vertex_colors must lie in [0, 1]")
            object.__setattr__(self, "vertex_colors", _frozen(colors))

        if self.part_labels is not None:
            labels = np.asarray(self.part_labels, dtype=np.int64)
            if labels.shape != (len(vertices),):
                raise InputError(
                    f"part_labels must have length {len(vertices)}, got {labels.shape}"
                )
            object.__setattr__(self, "part_labels", _frozen(labels))

        if int(self.instance_id) < 1:
            raise InputError(f"instance_id must be >= 1, got {self.instance_id}")
        object.__setattr__(self, "instance_id", int(self.instance_id))

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return replace(self, vertices=vertices)

    def with_colors(self, colors: Optional[np.ndarray]) -> "Mesh":
        return replace(self, vertex_colors=colors)

    def face_part_labels(self) -> np.ndarray:
        """Majority vote of the three vertex labels; ties go to the smallest id."""
        if self.part_labels is None:
            raise InputError(f"instance {self.instance_id} has no part labels")
        return majority_face_labels(self.part_labels, self.faces)


def majority_face_labels(part_labels: np.ndarray, faces: np.ndarray) -> np.ndarray:
    l0 = part_labels[faces[:, 0]]
    l1 = part_labels[faces[:, 1]]
    l2 = part_labels[faces[:, 2]]
    smallest = np.minimum(np.minimum(l0, l1), l2)
    labels = np.where(l1 == l2, l1, smallest)
    return np.where((l0 == l1) | (l0 == l2), l0, labels)


class MergedScene(NamedTuple):
    """All instances of a Scene flattened into shared vertex/face arrays."""

    vertices: np.ndarray
    faces: np.ndarray
    face_instance: np.ndarray
    vertex_offsets: np.ndarray
    face_offsets: np.ndarray


@dataclass(frozen=True, eq=False)
class Scene:
    """A group of meshes sharing one world frame; instance ids are unique."""

    instances: Tuple[Mesh, ...] = ()

    def __post_init__(self):
        instances = tuple(self.instances)
        ids = [mesh.instance_id for mesh in instances]
        if len(set(ids)) != len(ids):
            raise InputError(f"instance ids must be unique, got {ids}")
        object.__setattr__(self, "instances", instances)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def instance_ids(self) -> List[int]:
        return [mesh.instance_id for mesh in self.instances]

    def instance(self, instance_id: int) -> Mesh:
        for mesh in self.instances:
            if mesh.instance_id == instance_id:
                return mesh
        raise InputError(f"no instance with id {instance_id}")

    def only(self, instance_id: int) -> "Scene":
        return Scene((self.instance(instance_id),))

    def with_vertices(self, vertices: np.ndarray) -> "Scene":
        """Replace all instance vertices from one merged (N, 3) array."""
        offsets = self.merged().vertex_offsets
        return Scene(
            tuple(
                mesh.with_vertices(vertices[offsets[k] : offsets[k + 1]])
                for k, mesh in enumerate(self.instances)
            )
        )

    def merged(self) -> MergedScene:
        if not self.instances:
            raise InputError("scene is empty")
        vertex_counts = [mesh.vertex_count for mesh in self.instances]
        face_counts = [mesh.face_count for mesh in self.instances]
        vertex_offsets = np.concatenate([[0], np.cumsum(vertex_counts)]).astype(np.int64)
        face_offsets = np.concatenate([[0], np.cumsum(face_counts)]).astype(np.int64)
        vertices = np.concatenate([mesh.vertices for mesh in self.instances])
        faces = np.concatenate(
            [mesh.faces + vertex_offsets[k] for k, mesh in enumerate(self.instances)]
        )
        face_instance = np.concatenate(
            [
                np.full(mesh.face_count, mesh.instance_id, dtype=np.int64)
                for mesh in self.instances
            ]
        )
        return MergedScene(vertices, faces, face_instance, vertex_offsets, face_offsets)


def _orthonormal(rotation: np.ndarray) -> bool:
    return np.allclose(rotation.T @ rotation, np.eye(3), atol=ORTHONORMAL_TOL)


@dataclass(frozen=True, eq=False)
class Camera:
    """
    Perspective or orthographic camera.

    Perspective intrinsics are focal lengths and principal point in pixels.
    Orthographic intrinsics are `scale` pixels per world unit around the
    principal point, so neighbouring pixel centers are 1/scale apart.
    """

    mode: str
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        if self.mode not in ("perspective", "orthographic"):
            raise InputError(f"unknown camera mode: {self.mode}")
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not _orthonormal(rotation):
            raise InputError("camera rotation is not orthonormal")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InputError(f"bad image size {self.width}x{self.height}")
        if self.mode == "perspective" and (self.fx <= 0 or self.fy <= 0):
            raise InputError("focal lengths must be positive")
        if self.mode == "orthographic" and self.scale <= 0:
            raise InputError("orthographic scale must be positive")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def perspective(cls, rotation, translation, width, height, fx, fy, cx=None, cy=None):
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls("perspective", rotation, translation, width, height,
                   fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy))

    @classmethod
    def orthographic(cls, rotation, translation, width, height, scale, cx=None, cy=None):
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls("orthographic", rotation, translation, width, height,
                   cx=float(cx), cy=float(cy), scale=float(scale))

    @property
    def is_perspective(self) -> bool:
        return self.mode == "perspective"

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction in world coordinates."""
        return self.rotation[2].copy()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def project_camera(self, cam_points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Camera-space points to continuous pixel coordinates and depth."""
        x, y, z = cam_points[:, 0], cam_points[:, 1], cam_points[:, 2]
        if self.is_perspective:
            with np.errstate(divide="ignore", invalid="ignore"):
                u = self.fx * x / z + self.cx
                v = self.fy * y / z + self.cy
        else:
            u = x * self.scale + self.cx
            v = y * self.scale + self.cy
        return np.stack([u, v], axis=1), z.copy()

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.project_camera(self.world_to_camera(points))

    def pixel_rays(self, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Camera-space ray origins and directions (unit depth step) through uv."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        origins = np.zeros((len(uv), 3))
        directions = np.zeros((len(uv), 3))
        directions[:, 2] = 1.0
        if self.is_perspective:
            directions[:, 0] = (uv[:, 0] - self.cx) / self.fx
            directions[:, 1] = (uv[:, 1] - self.cy) / self.fy
        else:
            origins[:, 0] = (uv[:, 0] - self.cx) / self.scale
            origins[:, 1] = (uv[:, 1] - self.cy) / self.scale
        return origins, directions

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates plus depth back to world points."""
        origins, directions = self.pixel_rays(uv)
        cam_points = origins + directions * np.asarray(depth, dtype=np.float64).reshape(-1, 1)
        return self.camera_to_world(cam_points)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Row-major per-pixel data with a declared meaning."""

    data: np.ndarray
    semantic: str

    def __post_init__(self):
        if self.semantic not in SEMANTICS:
            raise InputError(f"unknown buffer semantic: {self.semantic}")
        data = np.asarray(self.data)
        if self.semantic in ("normal", "rgb"):
            if data.ndim != 3 or data.shape[2] != 3:
                raise InputError(f"{self.semantic} buffer must be (H, W, 3), got {data.shape}")
            data = data.astype(np.float64)
        elif data.ndim != 2:
            raise InputError(f"{self.semantic} buffer must be (H, W), got {data.shape}")

        if self.semantic == "mask":
            if data.dtype == bool:
                data = data.astype(np.uint8)
            if not np.isin(data, (0, 1)).all():
                raise InputError("mask buffer must be {0,1}-valued")
            data = data.astype(np.uint8)
        elif self.semantic == "instance":
            if data.size and data.min() < 0:
                raise InputError("instance buffer must be non-negative")
            data = data.astype(np.int64)
        elif self.semantic == "depth":
            data = data.astype(np.float64)
            if not np.all(np.isfinite(data)):
                raise InputError("depth buffer contains non-finite values")
        elif self.semantic == "normal":
            norms = np.linalg.norm(data, axis=2)
            bad = (norms > 1e-6) & (np.abs(norms - 1.0) > NORMAL_TOL)
            if bad.any():
                raise InputError(f"{int(bad.sum())} normal pixels are not unit length")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    def foreground(self) -> np.ndarray:
        if self.semantic == "depth":
            return self.data > 0
        if self.semantic == "normal":
            return np.linalg.norm(self.data, axis=2) > 0.5
        if self.semantic == "mask":
            return self.data == 1
        if self.semantic == "instance":
            return self.data > 0
        return np.any(self.data > 0, axis=2)

    @classmethod
    def depth(cls, data) -> "ImageBuffer":
        return cls(data, "depth")

    @classmethod
    def normal(cls, data) -> "ImageBuffer":
        return cls(data, "normal")

    @classmethod
    def rgb(cls, data) -> "ImageBuffer":
        return cls(data, "rgb")

    @classmethod
    def mask(cls, data) -> "ImageBuffer":
        return cls(np.asarray(data).astype(bool).astype(np.uint8), "mask")

    @classmethod
    def instance(cls, data) -> "ImageBuffer":
        return cls(data, "instance")


@dataclass(frozen=True, eq=False)
class ColoredPointCloud:
    points: np.ndarray
    colors: np.ndarray
    source_pixel: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(points) != len(colors):
            raise InputError(f"{len(points)} points but {len(colors)} colors")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "colors", _frozen(colors))
        if self.source_pixel is not None:
            pixels = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 2)
            if len(pixels) != len(points):
                raise InputError("source_pixel length differs from points")
            object.__setattr__(self, "source_pixel", _frozen(pixels))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep: np.ndarray) -> "ColoredPointCloud":
        pixels = None if self.source_pixel is None else self.source_pixel[keep]
        return ColoredPointCloud(self.points[keep], self.colors[keep], pixels)


class NormalResult(NamedTuple):
    normals: np.ndarray
    flags: np.ndarray


def face_cross_products(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals; their length is twice the face area."""
    a = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - a, vertices[faces[:, 2]] - a)


def accumulate_vertices(values: np.ndarray, faces: np.ndarray, vertex_count: int) -> np.ndarray:
    """Scatter-add a per-face (F, 3) quantity onto each face's three vertices."""
    out = np.zeros((vertex_count, values.shape[1]))
    for corner in range(3):
        for axis in range(values.shape[1]):
            out[:, axis] += np.bincount(
                faces[:, corner], weights=values[:, axis], minlength=vertex_count
            )
    return out


def area_weighted_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (unit normals, raw area-weighted sums); zero where the sum vanishes."""
    sums = accumulate_vertices(face_cross_products(vertices, faces), faces, len(vertices))
    lengths = np.linalg.norm(sums, axis=1, keepdims=True)
    normals = np.divide(sums, lengths, out=np.zeros_like(sums), where=lengths > 1e-300)
    return normals, sums


def compute_face_normals(mesh: Mesh) -> NormalResult:
    """
    Unit face normals by the right-hand rule.

    Returns:
        NormalResult with (F, 3) normals and a boolean flag per degenerate face
    """
    cross = face_cross_products(mesh.vertices, mesh.faces)
    lengths = np.linalg.norm(cross, axis=1)
    degenerate = 0.5 * lengths < DEGENERATE_AREA
    normals = np.zeros_like(cross)
    good = ~degenerate
    normals[good] = cross[good] / lengths[good, None]
    if degenerate.any():
        logging.warning(
            f"instance {mesh.instance_id}: {int(degenerate.sum())} degenerate faces"
        )
    return NormalResult(normals, degenerate)


def compute_vertex_normals(mesh: Mesh) -> NormalResult:
    """Area-weighted vertex normals; isolated vertices get zero and a flag."""
    normals, _ = area_weighted_vertex_normals(mesh.vertices, mesh.faces)
    used = np.zeros(mesh.vertex_count, dtype=bool)
    used[mesh.faces.ravel()] = True
    isolated = ~used
    if isolated.any():
        logging.warning(
            f"instance {mesh.instance_id}: {int(isolated.sum())} isolated vertices"
        )
    return NormalResult(normals, isolated)


def bounding_box(scene: Scene) -> Tuple[np.ndarray, np.ndarray]:
    if not scene.instances or all(m.vertex_count == 0 for m in scene.instances):
        raise InputError("bounding box of an empty scene")
    vertices = np.concatenate([m.vertices for m in scene.instances])
    return vertices.min(axis=0), vertices.max(axis=0)


def as_scene(value) -> Scene:
    if isinstance(value, Scene):
        return value
    if isinstance(value, Mesh):
        return Scene((value,))
    return Scene(tuple(value))


def merge_instances(scene: Scene, instance_id: int = 1) -> Mesh:
    """Collapse a scene into one mesh (colors/labels kept when every instance has them)."""
    merged = scene.merged()
    colors = None
    if all(m.vertex_colors is not None for m in scene.instances):
        colors = np.concatenate([m.vertex_colors for m in scene.instances])
    labels = None
    if all(m.part_labels is not None for m in scene.instances):
        labels = np.concatenate([m.part_labels for m in scene.instances])
    return Mesh(merged.vertices, merged.faces, colors, labels, instance_id)
