"""
Pipeline configuration: one JSON file plus command-line overrides.

Relative paths in the JSON resolve against the JSON file's folder; paths
given as flags resolve against the working directory. Every input path is
checked when the configuration is built.
"""

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import mesh_io
from canonical import RIG_DISTANCE
from hug_config import default_resolution
from mesh_core import InputError
from refine import OptimizationConfig

PATH_FIELDS = ("image", "depth", "normal", "camera", "targets", "views", "normalization", "joints")
LIST_PATH_FIELDS = ("meshes", "gt_meshes")


@dataclass
class PipelineConfig:
    """
    Inputs, outputs and settings of one pipeline run.

    Args:
        image, depth, normal, camera: perspective observation (PNG, PFM, PFM, JSON)
        meshes: initialization (or refined) meshes, one file per person
        gt_meshes: ground-truth meshes for evaluation
        targets: folder with canonical normal / RGB / part-visibility targets
        views: folder with per-view RGB used for texture fusion (defaults to targets)
        normalization: JSON with the canonical center and scale
        joints: JSON with hand and face joint positions (meters)
        out: output folder
    """

    image: Optional[Path] = None
    depth: Optional[Path] = None
    normal: Optional[Path] = None
    camera: Optional[Path] = None
    meshes: List[Path] = field(default_factory=list)
    gt_meshes: List[Path] = field(default_factory=list)
    targets: Optional[Path] = None
    views: Optional[Path] = None
    normalization: Optional[Path] = None
    joints: Optional[Path] = None
    out: Path = Path("out")
    seed: int = 0
    resolution: Optional[int] = None
    threads: Optional[int] = None
    samples: int = 100_000
    tau: float = 0.02
    alpha: float = 0.8
    refine_partial: bool = False
    partial_iters: int = 200
    partial_lr: float = 0.02
    rig_distance: float = RIG_DISTANCE
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)

    def __post_init__(self):
        if self.samples < 1:
            raise InputError(f"samples must be positive, got {self.samples}")
        if self.resolution is not None and int(self.resolution) < 1:
            raise InputError(f"resolution must be positive, got {self.resolution}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def render_resolution(self) -> int:
        return int(self.resolution) if self.resolution else default_resolution()

    def validate(self) -> "PipelineConfig":
        """Raise InputError naming the first referenced path that does not exist."""
        for name in PATH_FIELDS:
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise InputError(f"{name} path not found: {path}")
        for name in LIST_PATH_FIELDS:
            for path in getattr(self, name):
                if not Path(path).exists():
                    raise InputError(f"{name} path not found: {path}")
        return self

    def require(self, *names: str) -> None:
        for name in names:
            value = getattr(self, name)
            if value is None or (isinstance(value, list) and not value):
                raise InputError(f"missing required input: {name} (set it in the config or with a flag)")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Path = Path(".")) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(data)
        for name in PATH_FIELDS + ("out",):
            if values.get(name) is not None:
                values[name] = _resolve(values[name], base_dir)
        for name in LIST_PATH_FIELDS:
            if name in values:
                if isinstance(values[name], (str, Path)):
                    values[name] = [values[name]]
                values[name] = [_resolve(p, base_dir) for p in values[name]]
        if "optimization" in values:
            values["optimization"] = OptimizationConfig.from_dict(values["optimization"] or {})
        try:
            return cls(**values)
        except TypeError as e:
            raise InputError(f"invalid config: {e}") from e

    @classmethod
    def load(cls, path=None, overrides: Optional[Dict[str, Any]] = None) -> "PipelineConfig":
        """Read `path` (optional), apply non-None `overrides` and validate every path."""
        data: Dict[str, Any] = {}
        base_dir = Path(".")
        if path is not None:
            path = Path(path)
            data = mesh_io.load_json(path)
            if not isinstance(data, dict):
                raise InputError(f"{path}: config must be a JSON object")
            base_dir = path.parent
            logging.info(f"Loaded pipeline config from {path}")
        config = cls.from_dict(data, base_dir)
        for key, value in (overrides or {}).items():
            if value is None or (isinstance(value, list) and not value):
                continue
            if key in PATH_FIELDS or key == "out":
                value = Path(value)
            elif key in LIST_PATH_FIELDS:
                value = [Path(p) for p in value]
            elif key in ("iters", "progress"):
                setattr(config.optimization, key, value)
                continue
            elif not hasattr(config, key):
                raise InputError(f"unknown override: {key}")
            setattr(config, key, value)
        config.optimization = OptimizationConfig.from_dict(config.optimization.to_dict())
        if config.threads is not None:
            config.optimization.threads = config.threads
        if config.optimization.resolution is None:
            config.optimization.resolution = config.render_resolution
        config.__post_init__()
        return config.validate()

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Path):
                value = str(value)
            elif f.name in LIST_PATH_FIELDS:
                value = [str(p) for p in value]
            elif isinstance(value, OptimizationConfig):
                value = value.to_dict()
            data[f.name] = value
        return data

    def save(self, path) -> None:
        mesh_io.save_json(self.to_dict(), path)


def _resolve(value, base_dir: Path) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base_dir / path
