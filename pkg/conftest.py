"""Shared pytest fixtures: small meshes, scenes and cameras."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from canonical import look_at  # noqa: E402
from mesh_core import Camera, Mesh, Scene  # noqa: E402


def uv_sphere(center=(0.0, 0.0, 0.0), radius=1.0, rings=12, segments=24, instance_id=1, label=None):
    """Closed UV sphere with outward-facing triangles."""
    center = np.asarray(center, dtype=np.float64)
    vertices = [center + [0.0, radius, 0.0]]
    for r in range(1, rings):
        theta = np.pi * r / rings
        for s in range(segments):
            phi = 2.0 * np.pi * s / segments
            vertices.append(center + radius * np.array([
                np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)
            ]))
    vertices.append(center - [0.0, radius, 0.0])
    bottom = len(vertices) - 1
    faces = []
    for s in range(segments):
        t = (s + 1) % segments
        faces.append([0, 1 + s, 1 + t])
        last = 1 + (rings - 2) * segments
        faces.append([bottom, last + t, last + s])
        for r in range(rings - 2):
            a, b = 1 + r * segments, 1 + (r + 1) * segments
            faces.append([a + s, b + s, a + t])
            faces.append([a + t, b + s, b + t])
    vertices = np.array(vertices)
    labels = None if label is None else np.full(len(vertices), label, dtype=np.int64)
    return Mesh(vertices, np.array(faces), None, labels, instance_id)


@pytest.fixture
def make_sphere():
    return uv_sphere


@pytest.fixture
def quad():
    """Unit square in the z=0 plane, normal +Z, two triangles."""
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    return Mesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


@pytest.fixture
def tetra():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(vertices, faces)


@pytest.fixture
def two_spheres():
    """Two labeled spheres 0.3 apart in x; upper and lower halves carry labels 0 and 1."""
    meshes = []
    for instance_id, x in ((1, -0.35), (2, 0.35)):
        mesh = uv_sphere((x, 0.0, 0.0), 0.3, rings=10, segments=20, instance_id=instance_id)
        labels = (mesh.vertices[:, 1] < 0).astype(np.int64)
        meshes.append(Mesh(mesh.vertices, mesh.faces, None, labels, instance_id))
    return Scene(tuple(meshes))


@pytest.fixture
def front_ortho():
    """Orthographic 64 px camera on +Z looking at the origin, frame spans [-1, 1]."""
    rotation, translation = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0))
    return Camera.orthographic(rotation, translation, 64, 64, scale=32.0)


@pytest.fixture
def front_persp():
    rotation, translation = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0))
    return Camera.perspective(rotation, translation, 64, 64, 80.0, 80.0)
