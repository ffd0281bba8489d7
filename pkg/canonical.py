"""
Canonical space: scene normalization into [-1, 1]^3, the fixed six-view
orthographic rig, look-at poses, and synthetic occlusion masks used to
exercise the latent and inpainting operators.

Silhouette occluders are drawn from built-in capsule figures
(`SILHOUETTE_TEMPLATES`) instead of shipped PNG assets. Pass
`template_dir` to `simulate_occlusion_mask` to sample from a folder of
PNG silhouettes.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

import mesh_io
from mesh_core import Camera, ImageBuffer, InputError, Scene, bounding_box

RIG_AZIMUTHS = (0.0, 45.0, 90.0, 180.0, 270.0, 315.0)
EVAL_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)
PARTIAL_VIEW_INDICES = (0, 1, 5)
RIG_DISTANCE = 3.0
DEFAULT_PADDING = 0.05
# occluder dilation: 61 px at a 768 px frame
OCCLUDER_KERNEL_FRACTION = 61.0 / 768.0


@dataclass(frozen=True, eq=False)
class CanonicalRig:
    cameras: Tuple[Camera, ...]
    azimuths: Tuple[float, ...]
    center: np.ndarray
    scale: float

    def __post_init__(self):
        if len(self.cameras) != len(RIG_AZIMUTHS) or tuple(self.azimuths) != RIG_AZIMUTHS:
            raise InputError("a canonical rig has exactly the six fixed azimuths")
        if any(cam.is_perspective for cam in self.cameras):
            raise InputError("canonical rig cameras are orthographic")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def __len__(self) -> int:
        return len(self.cameras)

    def view(self, azimuth: float) -> Camera:
        return self.cameras[self.azimuths.index(float(azimuth))]

    @property
    def resolution(self) -> int:
        return self.cameras[0].width


def normalize_scene(scene: Scene, padding: float = DEFAULT_PADDING, jitter: float = 0.0,
                    seed: Optional[int] = None) -> Tuple[Scene, np.ndarray, float]:
    """
    Map the scene into the canonical cube: v' = (v - c) / (s / 2).

    Args:
        scene: non-empty scene
        padding: box growth ratio, s = max extent * (1 + padding)
        jitter: optional uniform XY offset of the center (fraction of s), for dataset synthesis
        seed: RNG seed for the jitter

    Returns:
        (normalized scene, center c, scale s)
    """
    lo, hi = bounding_box(scene)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise InputError("cannot normalize a zero-extent scene")
    if padding < 0:
        raise InputError(f"padding must be >= 0, got {padding}")
    center = (lo + hi) / 2.0
    scale = extent * (1.0 + padding)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        center = center + np.array([*rng.uniform(-jitter, jitter, 2) * scale, 0.0])
    return transform_scene(scene, center, scale), center, scale


def transform_scene(scene: Scene, center: np.ndarray, scale: float) -> Scene:
    half = scale / 2.0
    return Scene(tuple(m.with_vertices((m.vertices - center) / half) for m in scene.instances))


def denormalize_points(points: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(points) * (scale / 2.0) + center


def denormalize_scene(scene: Scene, center: np.ndarray, scale: float) -> Scene:
    return Scene(tuple(
        m.with_vertices(denormalize_points(m.vertices, center, scale)) for m in scene.instances
    ))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pose for a camera at `eye` looking at `target`.

    Rows of R are the camera's right, down and forward axes in world
    coordinates, so R @ (target - eye) points along +Z and world `up` maps to
    negative image rows.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InputError("eye and target coincide")
    forward /= norm
    right = np.cross(forward, up)
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-9 * max(np.linalg.norm(up), 1e-300):
        raise InputError("up vector is parallel to the viewing direction")
    right /= right_norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ eye


def orbit_cameras(azimuths: Sequence[float], distance: float = RIG_DISTANCE,
                  image_size: int = 768, elevation_deg: float = 0.0) -> List[Camera]:
    """Orthographic look-at cameras on a ring about +Y; azimuth 0 sits on +Z."""
    if distance <= 0:
        raise InputError(f"camera distance must be positive, got {distance}")
    cameras = []
    elevation = np.radians(elevation_deg)
    for azimuth in azimuths:
        a = np.radians(azimuth)
        eye = distance * np.array([
            np.sin(a) * np.cos(elevation),
            np.sin(elevation),
            np.cos(a) * np.cos(elevation),
        ])
        rotation, translation = look_at(eye, np.zeros(3))
        # the frame spans [-1, 1] world units across the image
        cameras.append(Camera.orthographic(rotation, translation, image_size, image_size,
                                           scale=image_size / 2.0))
    return cameras


def build_rig(distance: float = RIG_DISTANCE, image_size: int = 768,
              center=(0.0, 0.0, 0.0), scale: float = 2.0) -> CanonicalRig:
    cameras = orbit_cameras(RIG_AZIMUTHS, distance, image_size)
    return CanonicalRig(tuple(cameras), RIG_AZIMUTHS, np.asarray(center, dtype=np.float64), scale)


def rig_to_json(rig: CanonicalRig) -> list:
    entries = []
    for camera, azimuth in zip(rig.cameras, rig.azimuths):
        entry = mesh_io.camera_to_dict(camera, azimuth)
        entry["normalization"] = {"center": [float(x) for x in rig.center], "scale": rig.scale}
        entries.append(entry)
    return entries


def save_rig(rig: CanonicalRig, path) -> None:
    mesh_io.save_json(rig_to_json(rig), path)


def load_rig(path) -> CanonicalRig:
    entries = mesh_io.load_json(path)
    if not isinstance(entries, list) or len(entries) != len(RIG_AZIMUTHS):
        raise InputError(f"{path}: a rig file holds six cameras")
    cameras = tuple(mesh_io.camera_from_dict(e) for e in entries)
    azimuths = tuple(float(e.get("azimuth_deg", a)) for e, a in zip(entries, RIG_AZIMUTHS))
    norm = entries[0].get("normalization", {})
    return CanonicalRig(cameras, azimuths, norm.get("center", (0.0, 0.0, 0.0)), norm.get("scale", 2.0))


# ---------------------------------------------------------------- masks

def _check_kernel(kernel_size: int) -> int:
    kernel_size = int(kernel_size)
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InputError(f"kernel size must be odd and >= 1, got {kernel_size}")
    return kernel_size


def _as_bool(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, ImageBuffer) else np.asarray(mask)
    return data.astype(bool)


def dilate(mask, kernel_size: int) -> np.ndarray:
    kernel_size = _check_kernel(kernel_size)
    data = _as_bool(mask)
    if kernel_size == 1:
        return data.copy()
    return ndimage.binary_dilation(data, structure=np.ones((kernel_size, kernel_size), dtype=bool))


def erode(mask, kernel_size: int) -> np.ndarray:
    kernel_size = _check_kernel(kernel_size)
    data = _as_bool(mask)
    if kernel_size == 1:
        return data.copy()
    return ndimage.binary_erosion(data, structure=np.ones((kernel_size, kernel_size), dtype=bool))


def dilate_mask(mask, kernel_size: int) -> ImageBuffer:
    """Square-element dilation; kernel must be odd."""
    return ImageBuffer.mask(dilate(mask, kernel_size))


def erode_mask(mask, kernel_size: int) -> ImageBuffer:
    return ImageBuffer.mask(erode(mask, kernel_size))


def fill_mask_holes(mask) -> ImageBuffer:
    return ImageBuffer.mask(ndimage.binary_fill_holes(_as_bool(mask)))


# Figure templates in a unit-height frame (x right, y down, origin at the
# figure's center). Entries are capsules (x0, y0, x1, y1, radius); a zero-length
# capsule is a disc.
_STANDING = [
    (0.0, -0.43, 0.0, -0.43, 0.065),
    (0.0, -0.30, 0.0, 0.02, 0.10),
    (-0.05, 0.04, -0.06, 0.48, 0.045),
    (0.05, 0.04, 0.06, 0.48, 0.045),
    (-0.12, -0.30, -0.17, 0.02, 0.035),
    (0.12, -0.30, 0.17, 0.02, 0.035),
]
_ARMS_UP = [
    (0.0, -0.38, 0.0, -0.38, 0.065),
    (0.0, -0.26, 0.0, 0.06, 0.10),
    (-0.05, 0.08, -0.07, 0.50, 0.045),
    (0.05, 0.08, 0.07, 0.50, 0.045),
    (-0.11, -0.25, -0.22, -0.50, 0.035),
    (0.11, -0.25, 0.22, -0.50, 0.035),
]
_WALKING = [
    (0.02, -0.43, 0.02, -0.43, 0.065),
    (0.01, -0.30, 0.0, 0.02, 0.10),
    (-0.02, 0.04, -0.15, 0.48, 0.045),
    (0.03, 0.04, 0.14, 0.47, 0.045),
    (-0.08, -0.28, -0.18, 0.0, 0.035),
    (0.09, -0.28, 0.20, -0.02, 0.035),
]
_SITTING = [
    (0.0, -0.40, 0.0, -0.40, 0.07),
    (0.0, -0.27, 0.0, 0.08, 0.11),
    (-0.05, 0.10, -0.30, 0.14, 0.05),
    (0.05, 0.10, -0.26, 0.18, 0.05),
    (-0.30, 0.14, -0.32, 0.48, 0.045),
    (-0.26, 0.18, -0.22, 0.48, 0.045),
    (0.12, -0.25, 0.05, 0.05, 0.038),
]
_ARMS_OUT = [
    (0.0, -0.43, 0.0, -0.43, 0.065),
    (0.0, -0.30, 0.0, 0.02, 0.10),
    (-0.06, 0.04, -0.12, 0.48, 0.045),
    (0.06, 0.04, 0.12, 0.48, 0.045),
    (-0.10, -0.28, -0.42, -0.24, 0.035),
    (0.10, -0.28, 0.42, -0.24, 0.035),
]
_PAIR = [
    (-0.14, -0.43, -0.14, -0.43, 0.06),
    (-0.14, -0.31, -0.14, 0.02, 0.09),
    (-0.18, 0.04, -0.19, 0.48, 0.04),
    (-0.10, 0.04, -0.09, 0.48, 0.04),
    (0.15, -0.38, 0.15, -0.38, 0.055),
    (0.15, -0.27, 0.15, 0.05, 0.085),
    (0.11, 0.07, 0.10, 0.48, 0.04),
    (0.19, 0.07, 0.20, 0.48, 0.04),
    (-0.06, -0.24, 0.07, -0.20, 0.03),
]
SILHOUETTE_TEMPLATES = {
    "standing": _STANDING,
    "arms_up": _ARMS_UP,
    "walking": _WALKING,
    "sitting": _SITTING,
    "arms_out": _ARMS_OUT,
    "pair": _PAIR,
}


def _draw_capsules(canvas: np.ndarray, capsules, center_x: float, center_y: float,
                   scale: float, mirror: bool = False) -> None:
    height, width = canvas.shape
    ys, xs = np.mgrid[0:height, 0:width]
    xs = xs + 0.5
    ys = ys + 0.5
    for x0, y0, x1, y1, radius in capsules:
        if mirror:
            x0, x1 = -x0, -x1
        a = np.array([center_x + x0 * scale, center_y + y0 * scale])
        b = np.array([center_x + x1 * scale, center_y + y1 * scale])
        r = radius * scale
        lo = np.floor(np.minimum(a, b) - r - 1).astype(int)
        hi = np.ceil(np.maximum(a, b) + r + 1).astype(int)
        c0, c1 = max(lo[0], 0), min(hi[0], width)
        r0, r1 = max(lo[1], 0), min(hi[1], height)
        if c0 >= c1 or r0 >= r1:
            continue
        px = xs[r0:r1, c0:c1]
        py = ys[r0:r1, c0:c1]
        d = b - a
        length2 = float(d @ d)
        if length2 > 0:
            t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / length2, 0.0, 1.0)
        else:
            t = 0.0
        qx = a[0] + t * d[0] - px
        qy = a[1] + t * d[1] - py
        canvas[r0:r1, c0:c1] |= qx * qx + qy * qy <= r * r


def _load_template_pngs(template_dir) -> List[np.ndarray]:
    paths = sorted(Path(template_dir).glob("*.png"))
    return [mesh_io.read_mask(p).data.astype(bool) for p in paths]


def _paste_template(canvas: np.ndarray, template: np.ndarray, center_x: float,
                    center_y: float, scale: float) -> None:
    height, width = canvas.shape
    target_h = max(1, int(round(scale)))
    target_w = max(1, int(round(scale * template.shape[1] / template.shape[0])))
    zoom = (target_h / template.shape[0], target_w / template.shape[1])
    resized = ndimage.zoom(template.astype(np.float64), zoom, order=0) > 0.5
    top = int(round(center_y - resized.shape[0] / 2))
    left = int(round(center_x - resized.shape[1] / 2))
    r0, c0 = max(top, 0), max(left, 0)
    r1 = min(top + resized.shape[0], height)
    c1 = min(left + resized.shape[1], width)
    if r0 < r1 and c0 < c1:
        canvas[r0:r1, c0:c1] |= resized[r0 - top:r1 - top, c0 - left:c1 - left]


def simulate_occlusion_mask(image_size, kind: str = "silhouette", rng_seed: int = 0,
                            scale: Optional[float] = None, template_dir=None,
                            dilate_kernel: Optional[int] = None) -> ImageBuffer:
    """
    Synthetic occluder mask.

    Args:
        image_size: int or (height, width)
        kind: "silhouette" (human-figure template) or "freeform" (brush strokes)
        rng_seed: seed; identical seeds give identical masks
        scale: figure height as a fraction of the image height, clamped to [0.4, 1.0];
            drawn at random when None
        template_dir: optional folder of PNG silhouettes used instead of the built-ins
        dilate_kernel: silhouette dilation; defaults to 61 px scaled to the image

    Returns:
        binary mask ImageBuffer
    """
    if isinstance(image_size, (tuple, list)):
        height, width = int(image_size[0]), int(image_size[1])
    else:
        height = width = int(image_size)
    if height < 1 or width < 1:
        raise InputError(f"bad mask size {height}x{width}")
    rng = np.random.default_rng(rng_seed)
    canvas = np.zeros((height, width), dtype=bool)

    if kind == "silhouette":
        drawn = rng.uniform(0.4, 1.0)
        fraction = float(np.clip(drawn if scale is None else scale, 0.4, 1.0))
        figure = fraction * height
        center_x = width / 2.0 + rng.uniform(-0.15, 0.15) * width
        center_y = height / 2.0 + rng.uniform(-0.15, 0.15) * height
        mirror = bool(rng.integers(0, 2))
        custom = _load_template_pngs(template_dir) if template_dir else []
        if custom:
            template = custom[int(rng.integers(0, len(custom)))]
            if mirror:
                template = template[:, ::-1]
            _paste_template(canvas, template, center_x, center_y, figure)
        else:
            names = sorted(SILHOUETTE_TEMPLATES)
            name = names[int(rng.integers(0, len(names)))]
            _draw_capsules(canvas, SILHOUETTE_TEMPLATES[name], center_x, center_y, figure, mirror)
        if dilate_kernel is None:
            dilate_kernel = int(round(OCCLUDER_KERNEL_FRACTION * min(height, width)))
            dilate_kernel += 1 - dilate_kernel % 2
        canvas = dilate(canvas, max(1, dilate_kernel))
    elif kind == "freeform":
        size = min(height, width)
        strokes = int(rng.integers(1, 5))
        for _ in range(strokes):
            points = int(rng.integers(4, 13))
            x, y = rng.uniform(0.2, 0.8) * width, rng.uniform(0.2, 0.8) * height
            brush = rng.uniform(max(2.5, size / 100.0), max(3.0, size / 20.0))
            path = []
            for _ in range(points):
                angle = rng.uniform(0, 2 * np.pi)
                step = rng.uniform(size / 32.0, size / 8.0)
                nx = float(np.clip(x + step * np.cos(angle), 0, width))
                ny = float(np.clip(y + step * np.sin(angle), 0, height))
                path.append((x, y, nx, ny, brush))
                x, y = nx, ny
            _draw_capsules(canvas, path, 0.0, 0.0, 1.0)
    else:
        raise InputError(f"unknown occlusion mask kind: {kind}")

    if not canvas.any():
        logging.warning(f"occlusion mask for seed {rng_seed} is empty")
    return ImageBuffer.mask(canvas)
