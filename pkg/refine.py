"""
Group/instance geometry refinement.

Free-vertex optimization of every person in a scene against multi-view
normal targets rendered at group level (all people together) and instance
level (one person alone), with an interpenetration barrier between body
parts of different people, an occlusion-aware visibility penalty and
per-vertex learning rates that slow down vertices near hand/face joints.
The module also carries the keypoint and penetration terms used by external
body-model fitters.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from adam import Adam
from canonical import CanonicalRig
from hug_config import resolve_threads
from mesh_core import (
    ImageBuffer,
    InputError,
    Mesh,
    NumericalError,
    Scene,
    area_weighted_vertex_normals,
    face_cross_products,
)
from raster_grad import FrozenView, scatter_corners
from rasterizer import RenderOutput, rasterize
from spatial_index import REGION_FACE, TriangleBVH, nearest_neighbors, points_within

PENETRATION_MODES = ("closest", "vertexwise")
FITTING_TOL = 0.02
FITTING_GAMMA_PEN = 15.0


@dataclass
class OptimizationConfig:
    """Weights and schedule of the refinement; tolerances and radii are in meters."""

    lambda_group: float = 1.0
    lambda_inst: float = 0.2
    lambda_pen: float = 30.0
    lambda_vis: float = 1.0
    tol: float = 5e-4
    iters: int = 200
    base_lr: float = 0.01
    # step size at iteration t is base_lr * 10 ** (-t * lr_decay)
    lr_decay: float = 0.0
    contact_radius: float = 0.02
    printed_sigmoid: bool = False
    penetration_mode: str = "closest"
    signed: bool = True
    vis_surrogate: bool = True
    vis_eps: float = 1e-6
    resolution: Optional[int] = None
    threads: Optional[int] = None
    progress: bool = False

    def __post_init__(self):
        for name in ("lambda_group", "lambda_inst", "lambda_pen", "lambda_vis", "base_lr", "lr_decay",
                     "contact_radius", "vis_eps"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.tol <= 0:
            raise InputError(f"tol must be > 0, got {self.tol}")
        if int(self.iters) < 1:
            raise InputError(f"iters must be >= 1, got {self.iters}")
        self.iters = int(self.iters)
        if self.penetration_mode not in PENETRATION_MODES:
            raise InputError(f"penetration_mode must be one of {PENETRATION_MODES}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OptimizationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown optimization settings: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


PartPair = Tuple[int, int, int, int]


def _canonical_pair(a: int, i: int, b: int, j: int) -> PartPair:
    return (a, i, b, j) if (a, i) <= (b, j) else (b, j, a, i)


@dataclass(frozen=True)
class PartPairSet:
    """(instance_a, part_i, instance_b, part_j) pairs eligible for the penetration barrier."""

    pairs: FrozenSet[PartPair] = field(default_factory=frozenset)

    def __post_init__(self):
        normalized = set()
        for pair in self.pairs:
            a, i, b, j = (int(x) for x in pair)
            if (a, i) == (b, j):
                raise InputError(f"pair relates part {i} of instance {a} to itself")
            normalized.add(_canonical_pair(a, i, b, j))
        object.__setattr__(self, "pairs", frozenset(normalized))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(sorted(self.pairs))

    def to_list(self) -> List[List[int]]:
        return [list(p) for p in sorted(self.pairs)]

    @classmethod
    def from_list(cls, data) -> "PartPairSet":
        return cls(frozenset(tuple(p) for p in data))


@dataclass
class NormalTargets:
    """
    Predicted normal maps in the rig's camera frames.

    group: view index -> normal buffer of all people together (all six views)
    instance: (view index, instance id) -> normal buffer of one person
    """

    group: Dict[int, ImageBuffer]
    instance: Dict[Tuple[int, int], ImageBuffer] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(range(6)) - set(self.group)
        if missing:
            raise InputError(f"group normal targets missing views {sorted(missing)}")


# ---------------------------------------------------------------- contacts

def _require_labels(scene: Scene) -> None:
    for mesh in scene.instances:
        if mesh.part_labels is None:
            raise InputError(f"instance {mesh.instance_id} has no part labels")


def contact_pairs_from_meshes(scene: Scene, contact_radius: float = 0.02) -> PartPairSet:
    """Part pairs of different instances with some vertex pair within contact_radius (inclusive)."""
    _require_labels(scene)
    found = set()
    for a, mesh_a in enumerate(scene.instances):
        for mesh_b in scene.instances[a + 1:]:
            hits = points_within(mesh_a.vertices, mesh_b.vertices, contact_radius)
            for v, neighbours in enumerate(hits):
                if not len(neighbours):
                    continue
                label_a = int(mesh_a.part_labels[v])
                for label_b in np.unique(mesh_b.part_labels[neighbours]):
                    found.add((mesh_a.instance_id, label_a, mesh_b.instance_id, int(label_b)))
    logging.info(f"contact map: {len(found)} part pairs within {contact_radius}")
    return PartPairSet(frozenset(found))


def softplus_barrier(distance, tol: float):
    """T * log(1 + exp((tol - d) / T)) with T = max(tol / 4, 1e-5)."""
    temperature = max(0.25 * tol, 1e-5)
    return temperature * np.logaddexp(0.0, (tol - np.asarray(distance, dtype=np.float64)) / temperature)


def softplus_barrier_grad(distance, tol: float):
    temperature = max(0.25 * tol, 1e-5)
    return -expit((tol - np.asarray(distance, dtype=np.float64)) / temperature)


class _PartIndex:
    """Global vertex and face index sets per (instance, part) of a scene layout."""

    def __init__(self, scene: Scene):
        merged = scene.merged()
        self.faces = merged.faces
        self.vertex_count = len(merged.vertices)
        self.vertices: Dict[Tuple[int, int], np.ndarray] = {}
        self.part_faces: Dict[Tuple[int, int], np.ndarray] = {}
        for k, mesh in enumerate(scene.instances):
            if mesh.part_labels is None:
                continue
            offset = merged.vertex_offsets[k]
            face_labels = mesh.face_part_labels()
            for label in np.unique(mesh.part_labels):
                key = (mesh.instance_id, int(label))
                self.vertices[key] = np.nonzero(mesh.part_labels == label)[0] + offset
                self.part_faces[key] = mesh.faces[face_labels == label] + offset


class ContactSet(NamedTuple):
    """Closest-point correspondences held fixed for one step."""

    vertex: np.ndarray
    corners: np.ndarray
    bary: np.ndarray
    sign: np.ndarray
    normal: np.ndarray
    weight: np.ndarray
    pair: np.ndarray


def _empty_contacts() -> ContactSet:
    return ContactSet(np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)),
                      np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))


def find_contacts(vertices: np.ndarray, index: _PartIndex, pairs: PartPairSet,
                  mode: str = "closest", signed: bool = True) -> ContactSet:
    """
    Closest surface correspondences for every pair.

    A vertex gets a negative distance when it lies on the back side of the
    other part's surface: the face normal decides in a face interior, the
    barycentric blend of vertex normals decides on edges and corners.
    In "closest" mode each pair keeps its single smallest signed distance,
    in "vertexwise" mode it keeps every vertex of both parts.
    """
    if mode not in PENETRATION_MODES:
        raise InputError(f"penetration mode must be one of {PENETRATION_MODES}")
    if not len(pairs):
        return _empty_contacts()
    vertex_normals, _ = area_weighted_vertex_normals(vertices, index.faces)
    trees: Dict[Tuple[int, int], Optional[TriangleBVH]] = {}

    def tree(key):
        if key not in trees:
            faces = index.part_faces.get(key)
            trees[key] = TriangleBVH(vertices, faces) if faces is not None and len(faces) else None
        return trees[key]

    chunks = []
    for pair_id, (a, i, b, j) in enumerate(pairs):
        entries = []
        for src, dst in (((a, i), (b, j)), ((b, j), (a, i))):
            bvh = tree(dst)
            idx = index.vertices.get(src)
            if bvh is None or idx is None or not len(idx):
                continue
            hit = bvh.query(vertices[idx])
            corners = index.part_faces[dst][hit.face]
            face_normal = face_cross_products(vertices, corners)
            face_normal /= np.maximum(np.linalg.norm(face_normal, axis=1, keepdims=True), 1e-300)
            blend = np.einsum("pk,pkd->pd", hit.bary, vertex_normals[corners])
            blend /= np.maximum(np.linalg.norm(blend, axis=1, keepdims=True), 1e-300)
            normal = np.where((hit.region == REGION_FACE)[:, None], face_normal, blend)
            side = np.einsum("pd,pd->p", vertices[idx] - hit.point, normal)
            sign = np.where(signed & (side < 0), -1.0, 1.0)
            entries.append((idx, corners, hit.bary, sign, normal, sign * hit.distance))
        if not entries:
            logging.warning(f"part pair {(a, i, b, j)} has no geometry; skipped")
            continue
        idx, corners, bary, sign, normal, dist = (np.concatenate(x) for x in zip(*entries))
        if mode == "closest":
            keep = np.array([int(np.argmin(dist))])
        else:
            keep = np.arange(len(idx))
        chunks.append((idx[keep], corners[keep], bary[keep], sign[keep], normal[keep],
                       np.full(len(keep), 1.0 / len(keep)), np.full(len(keep), pair_id)))
    if not chunks:
        return _empty_contacts()
    contacts = ContactSet(*(np.concatenate(x) for x in zip(*chunks)))
    return contacts._replace(weight=contacts.weight / len(chunks))


def contact_distances(vertices: np.ndarray, contacts: ContactSet) -> np.ndarray:
    """Signed distances of the frozen correspondences at `vertices`."""
    surface = np.einsum("pk,pkd->pd", contacts.bary, vertices[contacts.corners])
    return contacts.sign * np.linalg.norm(vertices[contacts.vertex] - surface, axis=1)


def penetration_value_and_grad(vertices: np.ndarray, contacts: ContactSet, tol: float,
                               metric_scale: float = 1.0) -> Tuple[float, np.ndarray]:
    """Weighted barrier over frozen correspondences and its vertex gradient."""
    grad = np.zeros_like(vertices)
    if not len(contacts.vertex):
        return 0.0, grad
    surface = np.einsum("pk,pkd->pd", contacts.bary, vertices[contacts.corners])
    diff = vertices[contacts.vertex] - surface
    dist = np.linalg.norm(diff, axis=1)
    meters = contacts.sign * dist * metric_scale
    value = float((contacts.weight * softplus_barrier(meters, tol)).sum())

    safe = dist > 1e-12
    direction = contacts.normal.copy()
    direction[safe] = contacts.sign[safe, None] * diff[safe] / dist[safe, None]
    g = (contacts.weight * softplus_barrier_grad(meters, tol) * metric_scale)[:, None] * direction
    for axis in range(3):
        grad[:, axis] += np.bincount(contacts.vertex, weights=g[:, axis], minlength=len(vertices))
    grad -= scatter_corners(contacts.bary[:, 0:1] * g, contacts.bary[:, 1:2] * g,
                            contacts.bary[:, 2:3] * g, contacts.corners, len(vertices))
    return value, grad


def interpenetration_loss(scene: Scene, pairs: PartPairSet, tol: float = 5e-4, mode: str = "closest",
                          signed: bool = True, metric_scale: float = 1.0) -> float:
    """Mean softplus barrier over the part pairs' signed surface distances (meters)."""
    if not len(pairs):
        logging.warning("interpenetration loss over an empty pair set is 0")
        return 0.0
    _require_labels(scene)
    index = _PartIndex(scene)
    vertices = scene.merged().vertices
    contacts = find_contacts(vertices, index, pairs, mode, signed)
    value, _ = penetration_value_and_grad(vertices, contacts, tol, metric_scale)
    return value


def fitting_interpenetration_loss(scene: Scene, pairs: PartPairSet, tol: float = FITTING_TOL,
                                  gamma_pen: float = FITTING_GAMMA_PEN, signed: bool = True) -> float:
    """Penetration term for body-model fitting: gamma_pen times the barrier at the fitting tolerance."""
    if gamma_pen == 0:
        return 0.0
    return gamma_pen * interpenetration_loss(scene, pairs, tol, "closest", signed)


def min_pair_distance(scene: Scene, pairs: PartPairSet, signed: bool = True) -> float:
    """Smallest signed inter-part surface distance over the pair set (inf when empty)."""
    if not len(pairs):
        return float("inf")
    vertices = scene.merged().vertices
    contacts = find_contacts(vertices, _PartIndex(scene), pairs, "closest", signed)
    if not len(contacts.vertex):
        return float("inf")
    return float(contact_distances(vertices, contacts).min())


# ---------------------------------------------------------------- image terms

def _part_count(gt_part_visibility) -> int:
    return len({label for _, label in gt_part_visibility})


def _bool_mask(mask) -> np.ndarray:
    return mask.data.astype(bool) if isinstance(mask, ImageBuffer) else np.asarray(mask, dtype=bool)


def visibility_loss(render: RenderOutput, gt_part_visibility: Dict[Tuple[int, int], Any],
                    eps: float = 1e-6) -> float:
    """
    (1 / 2B) * sum over (instance k, part b) of E / (M + eps), where M counts
    pixels where part b of k should be visible and E counts those covered by a
    different instance in the render.
    """
    parts = _part_count(gt_part_visibility)
    if parts == 0:
        raise InputError("visibility loss needs at least one body part")
    instance_map = render.instance_map.data
    total = 0.0
    for (k, _), mask in sorted(gt_part_visibility.items()):
        gt = _bool_mask(mask)
        if gt.shape != instance_map.shape:
            raise InputError(f"visibility mask {gt.shape} differs from render {instance_map.shape}")
        visible = int(gt.sum())
        if visible == 0:
            continue
        wrong = int((gt & (instance_map != 0) & (instance_map != k)).sum())
        total += wrong / (visible + eps)
    return total / (2.0 * parts)


def _cosine_term(target: ImageBuffer, rendered: np.ndarray, fg: np.ndarray) -> Optional[float]:
    valid = fg & target.foreground()
    if not valid.any():
        return None
    return float((1.0 - np.einsum("pd,pd->p", target.data[valid], rendered[valid])).mean())


def normal_supervision_loss(render_group: Dict[int, RenderOutput],
                            render_instances: Dict[Tuple[int, int], RenderOutput],
                            targets: NormalTargets, lambda_group: float = 1.0,
                            lambda_inst: float = 0.2) -> float:
    """Per-view mean of 1 - cos(target, rendered), summed over views (and instances), weighted."""
    group_sum, instance_sum, overlaps = 0.0, 0.0, 0
    for view, render in sorted(render_group.items()):
        term = _cosine_term(targets.group[view], render.normal.data, render.foreground)
        if term is not None:
            group_sum += term
            overlaps += 1
    for key, render in sorted(render_instances.items()):
        if key not in targets.instance:
            continue
        term = _cosine_term(targets.instance[key], render.normal.data, render.foreground)
        if term is not None:
            instance_sum += term
            overlaps += 1
    if overlaps == 0:
        raise InputError("normal targets and renders share no foreground pixels in any view")
    return lambda_group * group_sum + lambda_inst * instance_sum


def adaptive_vertex_lr(mesh, joint_positions, base_lr: float, printed_sigmoid: bool = False,
                       metric_scale: float = 1.0) -> np.ndarray:
    """
    Per-vertex step size base_lr * sigmoid(200 d - 10), d = distance (m) to the nearest joint.

    `printed_sigmoid` switches to sigmoid(200 d + 10).
    """
    joints = np.asarray(joint_positions, dtype=np.float64).reshape(-1, 3)
    if len(joints) == 0:
        raise InputError("adaptive learning rates need at least one joint")
    vertices = mesh.vertices if isinstance(mesh, (Mesh,)) else np.asarray(mesh, dtype=np.float64)
    distance, _ = nearest_neighbors(vertices, joints)
    shift = 10.0 if printed_sigmoid else -10.0
    return base_lr * expit(200.0 * distance * metric_scale + shift)


def keypoint_loss(projected, observed, visibility, gamma_std: float = 0.5, gamma_vis: float = 0.5,
                  alpha_occ: float = 0.1) -> float:
    """gamma_std * mean squared 2D error + gamma_vis * the same with occluded joints weighted by alpha_occ."""
    projected = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    observed = np.asarray(observed, dtype=np.float64).reshape(-1, 2)
    visibility = np.asarray(visibility, dtype=bool).reshape(-1)
    if not (len(projected) == len(observed) == len(visibility)):
        raise InputError(f"joint lists differ in length: {len(projected)}, {len(observed)}, {len(visibility)}")
    if len(projected) == 0:
        return 0.0
    error = ((projected - observed) ** 2).sum(axis=1)
    weights = np.where(visibility, 1.0, alpha_occ)
    return float(gamma_std * error.mean() + gamma_vis * (weights * error).mean())


# ---------------------------------------------------------------- optimizer

@dataclass
class FrozenState:
    """Everything held fixed during one optimizer step."""

    group_views: Dict[int, FrozenView]
    instance_views: Dict[Tuple[int, int], FrozenView]
    group_renders: Dict[int, RenderOutput]
    occluders: Dict[int, Tuple[FrozenView, np.ndarray]]
    contacts: ContactSet
    visibility: float


class LossTerms(NamedTuple):
    normal: float
    visibility: float
    penetration: float
    total: float


class TotalLossEvaluator:
    """
    Total refinement loss normal + lambda_vis * visibility + lambda_pen * penetration
    with frozen-coverage gradients.
    """

    def __init__(self, scene: Scene, targets: Optional[NormalTargets], gt_visibility, pairs: PartPairSet,
                 config: OptimizationConfig, rig: CanonicalRig, metric_scale: float = 1.0):
        self.scene = scene
        self.targets = targets
        self.gt_visibility = gt_visibility or {}
        self.pairs = pairs
        self.config = config
        self.rig = rig
        self.metric_scale = float(metric_scale)
        self.merged = scene.merged()
        self.index = _PartIndex(scene) if len(pairs) else None
        self.threads = resolve_threads(config.threads)
        self.use_normals = config.lambda_group > 0 or config.lambda_inst > 0
        if self.use_normals and targets is None:
            raise InputError("normal supervision is weighted but no targets were given")
        self.use_visibility = config.lambda_vis > 0 and bool(self.gt_visibility)
        if targets is not None:
            for view, target in targets.group.items():
                if target.shape != (rig.cameras[view].height, rig.cameras[view].width):
                    raise InputError(f"group target for view {view} does not match the rig resolution")

    def _instance_faces(self, k: int) -> np.ndarray:
        return self.scene.instances[k].faces + self.merged.vertex_offsets[k]

    def _freeze_view(self, view: int, scene: Scene):
        camera = self.rig.cameras[view]
        group_render = rasterize(scene, camera, threads=1)
        group_view = None
        if self.use_normals and self.config.lambda_group > 0:
            group_view = FrozenView(group_render, camera, self.merged.faces, len(self.merged.vertices),
                                    self.targets.group[view].foreground())
        instance_views = {}
        if self.use_normals and self.config.lambda_inst > 0:
            for k, mesh in enumerate(scene.instances):
                target = self.targets.instance.get((view, mesh.instance_id))
                if target is None:
                    continue
                render = rasterize(scene.only(mesh.instance_id), camera, threads=1)
                instance_views[(view, mesh.instance_id)] = FrozenView(
                    render, camera, self._instance_faces(k), len(self.merged.vertices), target.foreground()
                )
        return group_render, group_view, instance_views

    def _occluders(self, view: int, render: RenderOutput):
        """Pixels counted as wrongly occluded plus their per-pixel loss weight."""
        masks = self.gt_visibility.get(view, {})
        parts = _part_count(masks)
        instance_map = render.instance_map.data
        weight = np.zeros(instance_map.shape)
        for (k, _), mask in masks.items():
            gt = _bool_mask(mask)
            visible = int(gt.sum())
            if visible == 0:
                continue
            wrong = gt & (instance_map != 0) & (instance_map != k)
            weight[wrong] += 1.0 / (2.0 * parts * (visible + self.config.vis_eps))
        covered = weight > 0
        if not covered.any():
            return None
        frozen = FrozenView(render, self.rig.cameras[view], self.merged.faces, len(self.merged.vertices), covered)
        return frozen, weight.ravel()[frozen.pixels]

    def freeze(self, vertices: np.ndarray) -> FrozenState:
        scene = self.scene.with_vertices(vertices)
        views = range(len(self.rig.cameras)) if self.use_normals or self.use_visibility else range(0)
        if self.threads > 1 and len(views) > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(self.rig.cameras))) as pool:
                frozen = list(pool.map(lambda v: self._freeze_view(v, scene), views))
        else:
            frozen = [self._freeze_view(v, scene) for v in views]

        group_views, instance_views, renders, occluders = {}, {}, {}, {}
        visibility = 0.0
        for view, (render, group_view, inst) in zip(views, frozen):
            renders[view] = render
            if group_view is not None:
                group_views[view] = group_view
            instance_views.update(inst)
            if self.use_visibility and view in self.gt_visibility:
                visibility += visibility_loss(render, self.gt_visibility[view], self.config.vis_eps)
                if self.config.vis_surrogate:
                    occ = self._occluders(view, render)
                    if occ is not None:
                        occluders[view] = occ
        if self.use_normals and not any(len(v) for v in list(group_views.values()) + list(instance_views.values())):
            raise InputError("normal targets and renders share no foreground pixels in any view")

        contacts = _empty_contacts()
        if self.index is not None and self.config.lambda_pen > 0:
            contacts = find_contacts(vertices, self.index, self.pairs, self.config.penetration_mode, self.config.signed)
        return FrozenState(group_views, instance_views, renders, occluders, contacts, visibility)

    def _normal_term(self, vertices, view: FrozenView, target: ImageBuffer, weight: float, want_grad: bool):
        if not len(view):
            return 0.0, None
        normals = view.normals(vertices)
        target_normals = target.data.reshape(-1, 3)[view.pixels]
        count = len(view)
        value = weight * float((1.0 - np.einsum("pd,pd->p", target_normals, normals)).sum()) / count
        grad = view.normals_backward(vertices, -weight * target_normals / count) if want_grad else None
        return value, grad

    def _terms(self, vertices: np.ndarray, state: FrozenState, want_grad: bool):
        grad = np.zeros_like(vertices)
        jobs = [(view, self.targets.group[key], self.config.lambda_group)
                for key, view in sorted(state.group_views.items())]
        jobs += [(view, self.targets.instance[key], self.config.lambda_inst)
                 for key, view in sorted(state.instance_views.items())]
        normal = 0.0
        if jobs:
            if self.threads > 1 and len(jobs) > 1:
                with ThreadPoolExecutor(max_workers=min(self.threads, len(jobs))) as pool:
                    results = list(pool.map(lambda job: self._normal_term(vertices, *job, want_grad), jobs))
            else:
                results = [self._normal_term(vertices, *job, want_grad) for job in jobs]
            for value, g in results:
                normal += value
                if g is not None:
                    grad += g

        if want_grad and self.use_visibility:
            for view, (frozen, weight) in sorted(state.occluders.items()):
                # pushing occluding surfaces away from the camera lowers the occlusion count
                grad += self.config.lambda_vis * frozen.depth_backward(vertices, -weight)

        penetration = 0.0
        if len(state.contacts.vertex):
            penetration, pen_grad = penetration_value_and_grad(
                vertices, state.contacts, self.config.tol, self.metric_scale
            )
            grad += self.config.lambda_pen * pen_grad

        total = normal + self.config.lambda_vis * state.visibility + self.config.lambda_pen * penetration
        terms = LossTerms(normal, state.visibility, penetration, total)
        for name, value in zip(terms._fields, terms):
            if not np.isfinite(value):
                raise NumericalError(f"{name} loss is not finite ({value})")
        return terms, grad

    def value(self, vertices: np.ndarray, state: FrozenState) -> float:
        terms, _ = self._terms(vertices, state, want_grad=False)
        return terms.total

    def value_and_grad(self, vertices: np.ndarray, state: FrozenState) -> Tuple[LossTerms, np.ndarray]:
        return self._terms(vertices, state, want_grad=True)


class OptimizationResult(NamedTuple):
    scene: Scene
    trace: List[Dict[str, float]]
    best_iteration: int


def _split_visibility(gt_visibility):
    """Accept {view: {(k, b): mask}} or {(view, k, b): mask}."""
    if not gt_visibility:
        return {}
    first = next(iter(gt_visibility))
    if isinstance(first, tuple) and len(first) == 3:
        nested: Dict[int, Dict[Tuple[int, int], ImageBuffer]] = {}
        for (view, k, b), mask in gt_visibility.items():
            nested.setdefault(view, {})[(k, b)] = mask
        return nested
    return gt_visibility


def optimize(scene: Scene, targets: Optional[NormalTargets], gt_visibility, pairs: PartPairSet,
             config: OptimizationConfig, rig: CanonicalRig, joints: Optional[Sequence] = None,
             metric_scale: float = 1.0) -> OptimizationResult:
    """
    Refine all instance vertices jointly.

    Args:
        scene: initial meshes in the rig's (canonical) frame
        targets: normal maps for the six views; may be None when both normal weights are 0
        gt_visibility: {view: {(instance, part): mask}} of ground-truth visible parts
        pairs: part pairs for the penetration barrier
        config: weights and schedule
        rig: the six canonical cameras
        joints: optional (J, 3) hand/face joints for per-vertex learning rates
        metric_scale: meters per scene unit

    Returns:
        OptimizationResult with the lowest-loss scene and one trace row per iteration
    """
    if metric_scale <= 0:
        raise InputError(f"metric_scale must be positive, got {metric_scale}")
    evaluator = TotalLossEvaluator(scene, targets, _split_visibility(gt_visibility), pairs, config, rig, metric_scale)
    vertices = np.array(scene.merged().vertices)
    if joints is not None and len(joints):
        lr = adaptive_vertex_lr(vertices, joints, config.base_lr, config.printed_sigmoid, metric_scale)[:, None]
    else:
        lr = config.base_lr
    optimizer = Adam(vertices.shape, lr=lr)

    trace: List[Dict[str, float]] = []
    best_vertices, best_total, best_iteration = vertices.copy(), np.inf, 0
    for step in tqdm(range(config.iters + 1), desc="refine", disable=not config.progress):
        state = evaluator.freeze(vertices)
        terms, grad = evaluator.value_and_grad(vertices, state)
        row = {"iteration": step, "L_normal": terms.normal, "L_vis": terms.visibility,
               "L_pen": terms.penetration, "L_total": terms.total}
        if len(pairs):
            row["min_distance"] = (float(contact_distances(vertices, state.contacts).min()) * metric_scale
                                   if len(state.contacts.vertex) else float("inf"))
        trace.append(row)
        if terms.total < best_total:
            best_total, best_vertices, best_iteration = terms.total, vertices.copy(), step
        if step == config.iters:
            break
        optimizer.lr = np.asarray(lr) * 10.0 ** (-step * config.lr_decay)
        vertices = optimizer.step(vertices, grad)
        if not np.all(np.isfinite(vertices)):
            raise NumericalError(f"non-finite vertices after iteration {step}")
        logging.debug(f"iteration {step}: total {terms.total:.6g}")

    logging.info(f"refinement loss {trace[0]['L_total']:.6g} -> {best_total:.6g} (iteration {best_iteration})")
    return OptimizationResult(scene.with_vertices(best_vertices), trace, best_iteration)
