"""
Spatial queries: exact point-to-triangle distance through an axis-aligned
bounding-volume hierarchy, and KD-tree nearest neighbours between point sets.
"""

from typing import List, NamedTuple, Tuple

import numpy as np
from sklearn.neighbors import KDTree

from mesh_core import InputError

# Closest-feature regions reported by closest_point_on_triangles
REGION_FACE = 0
REGION_EDGE = 1
REGION_VERTEX = 2


def _dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, y)


def closest_point_on_triangles(points, a, b, c) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Closest point on each triangle (a[i], b[i], c[i]) to points[i].

    Voronoi-region walk over the triangle's vertices, edges and face,
    evaluated for all rows at once.

    Returns:
        closest (M, 3), barycentric weights (M, 3), region code (M,)
    """
    points = np.asarray(points, dtype=np.float64)
    ab = b - a
    ac = c - a
    ap = points - a
    bp = points - b
    cp = points - c
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    m = len(points)
    bary = np.zeros((m, 3))
    region = np.full(m, REGION_FACE, dtype=np.int8)

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        safe = denom != 0
        v = np.where(safe, vb / np.where(safe, denom, 1.0), 0.0)
        w = np.where(safe, vc / np.where(safe, denom, 1.0), 0.0)
        bary[:] = np.stack([1.0 - v - w, v, w], axis=1)
        bary[~safe] = (1.0, 0.0, 0.0)

        # Assigned from lowest to highest precedence.
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[on_bc] = np.stack([np.zeros_like(t), 1.0 - t, t], axis=1)[on_bc]
        region[on_bc] = REGION_EDGE

        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        bary[on_ac] = np.stack([1.0 - t, np.zeros_like(t), t], axis=1)[on_ac]
        region[on_ac] = REGION_EDGE

        at_c = (d6 >= 0) & (d5 <= d6)
        bary[at_c] = (0.0, 0.0, 1.0)
        region[at_c] = REGION_VERTEX

        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        bary[on_ab] = np.stack([1.0 - t, t, np.zeros_like(t)], axis=1)[on_ab]
        region[on_ab] = REGION_EDGE

    at_b = (d3 >= 0) & (d4 <= d3)
    bary[at_b] = (0.0, 1.0, 0.0)
    region[at_b] = REGION_VERTEX

    at_a = (d1 <= 0) & (d2 <= 0)
    bary[at_a] = (1.0, 0.0, 0.0)
    region[at_a] = REGION_VERTEX

    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    return closest, bary, region


class ClosestHit(NamedTuple):
    distance: np.ndarray
    face: np.ndarray
    point: np.ndarray
    bary: np.ndarray
    region: np.ndarray


class TriangleBVH:
    """
    Bounding-volume hierarchy over a triangle set.

    Nodes split at the median centroid along the longest axis; leaves hold
    at most `leaf_size` triangles. Queries are exact: they return the same
    distance as testing every triangle.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = 8):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(faces) == 0:
            raise InputError("cannot index an empty triangle set")
        self.leaf_size = max(1, int(leaf_size))
        self._a = vertices[faces[:, 0]]
        self._b = vertices[faces[:, 1]]
        self._c = vertices[faces[:, 2]]
        corners = np.stack([self._a, self._b, self._c], axis=1)
        self._tri_lo = corners.min(axis=1)
        self._tri_hi = corners.max(axis=1)
        self._centroids = corners.mean(axis=1)
        self._order = np.arange(len(faces))

        self._lo: List[np.ndarray] = []
        self._hi: List[np.ndarray] = []
        self._left: List[int] = []
        self._right: List[int] = []
        self._start: List[int] = []
        self._count: List[int] = []
        self._build(0, len(faces))

        self.lo = np.array(self._lo)
        self.hi = np.array(self._hi)
        self.left = np.array(self._left, dtype=np.int64)
        self.right = np.array(self._right, dtype=np.int64)
        self.start = np.array(self._start, dtype=np.int64)
        self.count = np.array(self._count, dtype=np.int64)

        used = np.unique(faces)
        self._vertex_tree = KDTree(vertices[used])

    @property
    def node_count(self) -> int:
        return len(self.lo)

    def _build(self, start: int, stop: int) -> int:
        idx = self._order[start:stop]
        node = len(self._lo)
        self._lo.append(self._tri_lo[idx].min(axis=0))
        self._hi.append(self._tri_hi[idx].max(axis=0))
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(start)
        self._count.append(0)
        if stop - start <= self.leaf_size:
            self._count[node] = stop - start
            return node
        centroids = self._centroids[idx]
        axis = int(np.argmax(centroids.max(axis=0) - centroids.min(axis=0)))
        mid = (start + stop) // 2
        part = np.argpartition(centroids[:, axis], mid - start)
        self._order[start:stop] = idx[part]
        self._left[node] = self._build(start, mid)
        self._right[node] = self._build(mid, stop)
        return node

    def query(self, points: np.ndarray, chunk: int = 4096) -> ClosestHit:
        """Closest surface point for every query point."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        distance = np.empty(n)
        face = np.empty(n, dtype=np.int64)
        closest = np.empty((n, 3))
        bary = np.empty((n, 3))
        region = np.empty(n, dtype=np.int8)
        for begin in range(0, n, chunk):
            sl = slice(begin, min(n, begin + chunk))
            hit = self._query_chunk(points[sl])
            distance[sl], face[sl], closest[sl], bary[sl], region[sl] = hit
        return ClosestHit(distance, face, closest, bary, region)

    def _query_chunk(self, points: np.ndarray) -> ClosestHit:
        n = len(points)
        vertex_dist, _ = self._vertex_tree.query(points, k=1)
        upper = (vertex_dist[:, 0] * (1.0 + 1e-9) + 1e-12) ** 2

        best_d2 = np.full(n, np.inf)
        best_face = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        best_point = np.zeros((n, 3))
        best_bary = np.zeros((n, 3))
        best_region = np.zeros(n, dtype=np.int8)

        pt = np.arange(n)
        nd = np.zeros(n, dtype=np.int64)
        while pt.size:
            p = points[pt]
            gap = np.maximum(self.lo[nd] - p, 0.0) + np.maximum(p - self.hi[nd], 0.0)
            lower = (gap * gap).sum(axis=1)
            bound = np.minimum(upper[pt], best_d2[pt])
            keep = lower <= bound * (1.0 + 1e-12)
            pt, nd = pt[keep], nd[keep]

            leaf = self.count[nd] > 0
            lp, ln = pt[leaf], nd[leaf]
            if lp.size:
                counts = self.count[ln]
                rep = np.repeat(lp, counts)
                offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                tri = self._order[np.repeat(self.start[ln], counts) + offsets]
                q = points[rep]
                near, weights, kind = closest_point_on_triangles(
                    q, self._a[tri], self._b[tri], self._c[tri]
                )
                d2 = ((q - near) ** 2).sum(axis=1)
                order = np.lexsort((tri, d2, rep))
                rep, tri, d2 = rep[order], tri[order], d2[order]
                near, weights, kind = near[order], weights[order], kind[order]
                first = np.ones(len(rep), dtype=bool)
                first[1:] = rep[1:] != rep[:-1]
                rep, tri, d2 = rep[first], tri[first], d2[first]
                better = (d2 < best_d2[rep]) | ((d2 == best_d2[rep]) & (tri < best_face[rep]))
                rep = rep[better]
                best_d2[rep] = d2[better]
                best_face[rep] = tri[better]
                best_point[rep] = near[first][better]
                best_bary[rep] = weights[first][better]
                best_region[rep] = kind[first][better]

            inner = ~leaf
            ip, inode = pt[inner], nd[inner]
            pt = np.concatenate([ip, ip])
            nd = np.concatenate([self.left[inode], self.right[inode]])

        if np.any(best_face == np.iinfo(np.int64).max):
            raise InputError("BVH query failed to reach a triangle")
        return ClosestHit(np.sqrt(best_d2), best_face, best_point, best_bary, best_region)


def nearest_neighbors(queries: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Euclidean distance and index of the nearest reference point for every query."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(reference) == 0 or len(queries) == 0:
        raise InputError("nearest-neighbour query on an empty point set")
    _, index = KDTree(reference).query(queries, k=1)
    index = index[:, 0]
    distance = np.sqrt(((queries - reference[index]) ** 2).sum(axis=1))
    return distance, index


def points_within(queries: np.ndarray, reference: np.ndarray, radius: float) -> List[np.ndarray]:
    """Indices of reference points within `radius` (inclusive) of each query."""
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(reference) == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(len(queries))]
    return list(KDTree(reference).query_radius(np.asarray(queries, dtype=np.float64), r=radius))
