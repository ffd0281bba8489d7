"""
Latent-grid blending used around a multi-view denoiser: instance-to-group
composition and partial-RGB injection, plus pixel-mask pooling to latent
resolution. Plain array arithmetic, no network.
"""

from dataclasses import dataclass, replace
from typing import Iterable, Sequence, Tuple

import numpy as np

from mesh_core import ImageBuffer, InputError

DEFAULT_ALPHA = 0.8
OVERLAP_MODES = ("priority", "sum")


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """(height, width, channels) latent for one view; timestep is bookkeeping only."""

    data: np.ndarray
    view_index: int = 0
    timestep: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise InputError(f"latent must be (h, w, c), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InputError("latent contains non-finite values")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "LatentGrid":
        return replace(self, data=data)


@dataclass(frozen=True, eq=False)
class RegionMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise InputError(f"region mask must be (h, w), got {data.shape}")
        if data.dtype != bool and not np.isin(data, (0, 1)).all():
            raise InputError("region mask must be {0,1}-valued")
        data = data.astype(bool)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def _check_shapes(reference: LatentGrid, grid: LatentGrid = None, mask: RegionMask = None) -> None:
    if grid is not None and grid.data.shape != reference.data.shape:
        raise InputError(f"latent shape {grid.data.shape} differs from {reference.data.shape}")
    if mask is not None and mask.shape != reference.data.shape[:2]:
        raise InputError(f"mask shape {mask.shape} differs from latent {reference.data.shape[:2]}")


def compose_instance_to_group(group: LatentGrid, instances: Sequence[Tuple[LatentGrid, RegionMask]],
                              alpha: float = DEFAULT_ALPHA, overlap: str = "priority") -> LatentGrid:
    """
    Blend instance latents into the group latent inside each instance's region.

    Inside a single region the result is alpha * instance + (1 - alpha) * group;
    outside every region the group cell is kept.

    Args:
        group: group latent
        instances: (instance latent, region) pairs
        alpha: blend factor in [0, 1]
        overlap: "priority" applies instances in order so later ones win where
            regions overlap; "sum" adds every instance's blend term literally

    Returns:
        new LatentGrid with the group's view index and timestep
    """
    alpha = _check_alpha(alpha)
    if overlap not in OVERLAP_MODES:
        raise InputError(f"overlap must be one of {OVERLAP_MODES}, got {overlap}")
    for grid, mask in instances:
        _check_shapes(group, grid, mask)

    base = group.data
    if overlap == "priority":
        out = base.copy()
        for grid, mask in instances:
            m = mask.data
            out[m] = alpha * grid.data[m] + (1.0 - alpha) * base[m]
        return group.with_data(out)

    covered = np.zeros(base.shape[:2], dtype=bool)
    out = np.zeros_like(base)
    for grid, mask in instances:
        m = mask.data[:, :, None]
        out += m * (alpha * grid.data + (1.0 - alpha) * base)
        covered |= mask.data
    out[~covered] = base[~covered]
    return group.with_data(out)


def inject_partial_rgb(current: LatentGrid, raw_noisy: LatentGrid, mask: RegionMask,
                       alpha_pcd: float = DEFAULT_ALPHA) -> LatentGrid:
    """m * (alpha * raw + (1 - alpha) * current) + (1 - m) * current."""
    alpha_pcd = _check_alpha(alpha_pcd)
    _check_shapes(current, raw_noisy, mask)
    m = mask.data
    out = current.data.copy()
    out[m] = alpha_pcd * raw_noisy.data[m] + (1.0 - alpha_pcd) * current.data[m]
    return current.with_data(out)


def downsample_mask_to_latent(mask, latent_shape) -> RegionMask:
    """Block-max pooling of a pixel mask down to (h, w) latent cells."""
    data = mask.data if isinstance(mask, ImageBuffer) else np.asarray(mask)
    data = data.astype(bool)
    h, w = int(latent_shape[0]), int(latent_shape[1])
    if h < 1 or w < 1:
        raise InputError(f"bad latent shape {latent_shape}")
    height, width = data.shape
    if height % h or width % w:
        raise InputError(f"mask {height}x{width} is not an integer multiple of latent {h}x{w}")
    fy, fx = height // h, width // w
    return RegionMask(data.reshape(h, fy, w, fx).any(axis=(1, 3)))


def stack_instances(grids: Iterable[LatentGrid], masks: Iterable[RegionMask]):
    """Pair instance latents with their regions; the counts must agree."""
    grids, masks = list(grids), list(masks)
    if len(grids) != len(masks):
        raise InputError(f"{len(grids)} instance latents but {len(masks)} masks")
    return list(zip(grids, masks))
