"""
File formats used by the pipeline: OBJ and binary PLY meshes, PFM float
maps, 8/16-bit PNG, raw integer grids and latent grids, and the camera/rig
JSON files. Every writer goes through `atomic_write` so an interrupted run
never leaves a truncated file behind.
"""

import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from mesh_core import Camera, ImageBuffer, InputError, Mesh

PathLike = Any


@contextmanager
def atomic_write(path: PathLike, mode: str = "wb"):
    """Write to a temp file in the destination folder, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        encoding = None if "b" in mode else "utf-8"
        with os.fdopen(fd, mode, encoding=encoding) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _require(path: PathLike) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    return path


# ---------------------------------------------------------------- JSON

def save_json(data: Any, path: PathLike) -> None:
    with atomic_write(path, "w") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)


def load_json(path: PathLike) -> Any:
    path = _require(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON in {path}: {e}") from e


# ---------------------------------------------------------------- OBJ

def load_obj(path: PathLike, instance_id: int = 1) -> Mesh:
    """Read `v x y z [r g b]` and `f` lines; polygons are fan-triangulated."""
    path = _require(path)
    vertices: List[List[float]] = []
    colors: List[List[float]] = []
    faces: List[List[int]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                    if len(parts) >= 7:
                        colors.append([float(x) for x in parts[4:7]])
                elif parts[0] == "f":
                    idx = [int(token.split("/")[0]) for token in parts[1:]]
                    idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as e:
                raise InputError(f"{path}:{lineno}: malformed line: {line.strip()}") from e
    if colors and len(colors) != len(vertices):
        raise InputError(f"{path}: only some vertices carry colors")
    return Mesh(
        np.array(vertices, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(colors) if colors else None,
        None,
        instance_id,
    )


def save_obj(mesh: Mesh, path: PathLike) -> None:
    with atomic_write(path, "w") as f:
        f.write(f"# instance {mesh.instance_id}\n")
        for k, v in enumerate(mesh.vertices):
            if mesh.vertex_colors is not None:
                r, g, b = mesh.vertex_colors[k]
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {r:.6g} {g:.6g} {b:.6g}\n")
            else:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def _parse_ply_header(handle) -> Tuple[List[Dict[str, Any]], bool]:
    if handle.readline().strip() != b"ply":
        raise InputError("not a PLY file")
    elements: List[Dict[str, Any]] = []
    binary = False
    while True:
        raw = handle.readline()
        if not raw:
            raise InputError("PLY header is truncated")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise InputError(f"unsupported PLY format: {parts[1]}")
            binary = True
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise InputError("PLY property before any element")
            if parts[1] == "list":
                elements[-1]["props"].append(("list", parts[4], parts[2], parts[3]))
            else:
                elements[-1]["props"].append(("scalar", parts[2], parts[1]))
        elif parts[0] == "end_header":
            return elements, binary


def load_ply(path: PathLike, instance_id: int = 1) -> Mesh:
    """Binary little-endian PLY with optional colors and `part_label`."""
    path = _require(path)
    with open(path, "rb") as handle:
        elements, binary = _parse_ply_header(handle)
        if not binary:
            raise InputError(f"{path}: missing format line")
        body = handle.read()

    offset = 0
    vertex_data = None
    faces = np.zeros((0, 3), dtype=np.int64)
    try:
        for element in elements:
            props = element["props"]
            if all(p[0] == "scalar" for p in props):
                dtype = np.dtype([(p[1], _PLY_TYPES[p[2]]) for p in props])
                data = np.frombuffer(body, dtype=dtype, count=element["count"], offset=offset)
                offset += dtype.itemsize * element["count"]
                if element["name"] == "vertex":
                    vertex_data = data
                continue
            if element["name"] != "face" or len(props) != 1:
                raise InputError(f"{path}: unsupported list element {element['name']}")
            _, _, count_type, index_type = props[0]
            count_dtype = np.dtype(_PLY_TYPES[count_type])
            index_dtype = np.dtype(_PLY_TYPES[index_type])
            row = np.dtype([("n", count_dtype), ("idx", index_dtype, (3,))])
            first_count = np.frombuffer(body, dtype=count_dtype, count=1, offset=offset)
            if element["count"] and first_count[0] == 3:
                data = np.frombuffer(body, dtype=row, count=element["count"], offset=offset)
                if np.all(data["n"] == 3):
                    faces = data["idx"].astype(np.int64)
                    offset += row.itemsize * element["count"]
                    continue
            polys: List[List[int]] = []
            for _ in range(element["count"]):
                n = int(np.frombuffer(body, dtype=count_dtype, count=1, offset=offset)[0])
                offset += count_dtype.itemsize
                idx = np.frombuffer(body, dtype=index_dtype, count=n, offset=offset)
                offset += index_dtype.itemsize * n
                polys.extend([int(idx[0]), int(idx[k]), int(idx[k + 1])] for k in range(1, n - 1))
            faces = np.array(polys, dtype=np.int64).reshape(-1, 3)
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}: corrupt PLY body ({e})") from e

    if vertex_data is None:
        raise InputError(f"{path}: no vertex element")
    names = vertex_data.dtype.names
    vertices = np.stack([vertex_data[a].astype(np.float64) for a in ("x", "y", "z")], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([vertex_data[c] for c in ("red", "green", "blue")], axis=1)
        colors = colors.astype(np.float64) / 255.0
    labels = vertex_data["part_label"].astype(np.int64) if "part_label" in names else None
    return Mesh(vertices, faces, colors, labels, instance_id)


def save_ply(mesh: Mesh, path: PathLike) -> None:
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment instance {mesh.instance_id}",
        f"element vertex {mesh.vertex_count}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if mesh.vertex_colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if mesh.part_labels is not None:
        fields.append(("part_label", "<i4"))
        header.append("property int part_label")
    header += [
        f"element face {mesh.face_count}",
        "property list uchar int vertex_indices",
        "end_header",
    ]

    vertex_rows = np.zeros(mesh.vertex_count, dtype=np.dtype(fields))
    for axis, name in enumerate("xyz"):
        vertex_rows[name] = mesh.vertices[:, axis]
    if mesh.vertex_colors is not None:
        quantized = np.clip(np.round(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
        for axis, name in enumerate(("red", "green", "blue")):
            vertex_rows[name] = quantized[:, axis]
    if mesh.part_labels is not None:
        vertex_rows["part_label"] = mesh.part_labels

    face_rows = np.zeros(mesh.face_count, dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
    face_rows["n"] = 3
    face_rows["idx"] = mesh.faces

    with atomic_write(path) as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vertex_rows.tobytes())
        f.write(face_rows.tobytes())


def load_mesh(path: PathLike, instance_id: int = 1) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path, instance_id)
    if suffix == ".ply":
        return load_ply(path, instance_id)
    raise InputError(f"unsupported mesh format: {path}")


def save_mesh(mesh: Mesh, path: PathLike) -> None:
    if Path(path).suffix.lower() == ".obj":
        save_obj(mesh, path)
    else:
        save_ply(mesh, path)


# ---------------------------------------------------------------- PFM

def read_pfm(path: PathLike) -> np.ndarray:
    """Portable float map; returns (H, W) or (H, W, 3) float64, top row first."""
    path = _require(path)
    with open(path, "rb") as f:
        try:
            kind = f.readline().strip()
            dims = f.readline().split()
            scale = float(f.readline().strip())
            width, height = int(dims[0]), int(dims[1])
        except (ValueError, IndexError) as e:
            raise InputError(f"{path}: corrupt PFM header") from e
        if kind not in (b"PF", b"Pf") or width < 1 or height < 1 or scale == 0:
            raise InputError(f"{path}: corrupt PFM header")
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size < count:
        raise InputError(f"{path}: PFM body is truncated")
    data = data[:count].astype(np.float64)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).copy()


def write_pfm(path: PathLike, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3 and data.shape[2] == 3:
        kind = "PF"
    elif data.ndim == 2:
        kind = "Pf"
    else:
        raise InputError(f"PFM needs (H, W) or (H, W, 3), got {data.shape}")
    height, width = data.shape[:2]
    with atomic_write(path) as f:
        f.write(f"{kind}\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_depth(path: PathLike) -> ImageBuffer:
    depth = read_pfm(path)
    if depth.ndim != 2:
        raise InputError(f"{path}: depth map must have one channel")
    return ImageBuffer.depth(np.where(np.isfinite(depth), depth, -1.0))


def load_normal(path: PathLike) -> ImageBuffer:
    """Normal PFM; pixels shorter than 0.5 are background, the rest are renormalized."""
    normal = read_pfm(path)
    if normal.ndim != 3:
        raise InputError(f"{path}: normal map must have three channels")
    normal = np.where(np.isfinite(normal), normal, 0.0)
    length = np.linalg.norm(normal, axis=2, keepdims=True)
    fg = length > 0.5
    normal = np.where(fg, normal / np.where(fg, length, 1.0), 0.0)
    return ImageBuffer.normal(normal)


# ---------------------------------------------------------------- PNG

def read_rgb(path: PathLike) -> ImageBuffer:
    path = _require(path)
    try:
        image = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise InputError(f"{path}: unreadable image ({e})") from e
    return ImageBuffer.rgb(image)


def read_mask(path: PathLike) -> ImageBuffer:
    path = _require(path)
    try:
        image = np.asarray(Image.open(path).convert("L"))
    except OSError as e:
        raise InputError(f"{path}: unreadable image ({e})") from e
    return ImageBuffer.mask(image > 127)


def write_rgb(path: PathLike, image) -> None:
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image)
    quantized = np.clip(np.round(data * 255.0), 0, 255).astype(np.uint8)
    with atomic_write(path) as f:
        Image.fromarray(quantized).save(f, format="PNG")


def write_mask(path: PathLike, mask) -> None:
    data = mask.data if isinstance(mask, ImageBuffer) else np.asarray(mask)
    with atomic_write(path) as f:
        Image.fromarray((data > 0).astype(np.uint8) * 255).save(f, format="PNG")


def write_png16(path: PathLike, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.size and (data.min() < 0 or data.max() > 65535):
        raise InputError("16-bit PNG values must lie in [0, 65535]")
    with atomic_write(path) as f:
        Image.fromarray(data.astype(np.uint16)).save(f, format="PNG")


def read_png16(path: PathLike) -> np.ndarray:
    path = _require(path)
    return np.asarray(Image.open(path)).astype(np.int64)


# ---------------------------------------------------------------- raw grids

def write_int_grid(path: PathLike, grid: np.ndarray) -> None:
    """int32 grid behind an 8-byte little-endian (width, height) header."""
    grid = np.asarray(grid)
    height, width = grid.shape
    with atomic_write(path) as f:
        f.write(np.array([width, height], dtype="<u4").tobytes())
        f.write(grid.astype("<i4").tobytes())


def read_int_grid(path: PathLike) -> np.ndarray:
    raw = _require(path).read_bytes()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated grid header")
    width, height = np.frombuffer(raw[:8], dtype="<u4")
    body = np.frombuffer(raw[8:], dtype="<i4")
    if body.size != int(width) * int(height):
        raise InputError(f"{path}: grid size does not match its header")
    return body.reshape(int(height), int(width)).astype(np.int64)


def write_latent(path: PathLike, data: np.ndarray) -> None:
    """float32 (h, w, c) grid behind a 12-byte little-endian header."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    with atomic_write(path) as f:
        f.write(np.array([h, w, c], dtype="<u4").tobytes())
        f.write(data.astype("<f4").tobytes())


def read_latent(path: PathLike) -> np.ndarray:
    raw = _require(path).read_bytes()
    if len(raw) < 12:
        raise InputError(f"{path}: truncated latent header")
    h, w, c = (int(x) for x in np.frombuffer(raw[:12], dtype="<u4"))
    body = np.frombuffer(raw[12:], dtype="<f4")
    if body.size != h * w * c:
        raise InputError(f"{path}: latent size does not match its header")
    return body.reshape(h, w, c).astype(np.float64)


# ---------------------------------------------------------------- cameras

def camera_to_dict(camera: Camera, azimuth_deg: Optional[float] = None) -> Dict[str, Any]:
    entry: Dict[str, Any] = {
        "mode": camera.mode,
        "rotation": [float(x) for x in camera.rotation.ravel()],
        "translation": [float(x) for x in camera.translation],
        "width": camera.width,
        "height": camera.height,
        "cx": camera.cx,
        "cy": camera.cy,
    }
    if azimuth_deg is not None:
        entry["azimuth_deg"] = float(azimuth_deg)
    if camera.is_perspective:
        entry.update({"fx": camera.fx, "fy": camera.fy})
    else:
        entry["scale"] = camera.scale
    return entry


def camera_from_dict(entry: Dict[str, Any]) -> Camera:
    try:
        rotation = np.array(entry["rotation"], dtype=np.float64).reshape(3, 3)
        translation = np.array(entry["translation"], dtype=np.float64)
        width, height = int(entry["width"]), int(entry["height"])
        if entry["mode"] == "perspective":
            return Camera.perspective(rotation, translation, width, height,
                                      entry["fx"], entry["fy"], entry.get("cx"), entry.get("cy"))
        return Camera.orthographic(rotation, translation, width, height,
                                   entry["scale"], entry.get("cx"), entry.get("cy"))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"invalid camera entry: {e}") from e


def load_camera(path: PathLike) -> Camera:
    data = load_json(path)
    if isinstance(data, list):
        if not data:
            raise InputError(f"{path}: empty camera list")
        data = data[0]
    return camera_from_dict(data)


def save_camera(camera: Camera, path: PathLike) -> None:
    save_json(camera_to_dict(camera), path)
