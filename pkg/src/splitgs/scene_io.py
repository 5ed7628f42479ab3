"""Point clouds, cameras, images and masks.

Cameras use a world-to-camera convention: ``x_cam = R @ x + t`` with the
camera looking down +z, image ``u`` growing to the right and ``v`` downward.
Pixel ``(row, col)`` sits at continuous coordinate ``(v, u) = (row, col)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

NEAR_PLANE = 0.01


class PLYError(ValueError):
    """Raised for malformed or unsupported PLY input."""


class SceneError(ValueError):
    """Raised for invalid camera / frame / mask input."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Camera:
    image_width: int
    image_height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    id: int = 0
    role: str = "train"

    def __post_init__(self):
        rot = _frozen(self.rotation).reshape(3, 3)
        trans = _frozen(self.translation).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-6:
            raise SceneError(f"camera {self.id}: rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"camera {self.id}: focal lengths must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise SceneError(f"camera {self.id}: principal point outside image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "role": self.role,
            "width": int(self.image_width),
            "height": int(self.image_height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(
                image_width=int(d["width"]),
                image_height=int(d["height"]),
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["t"], dtype=np.float64).reshape(3),
                id=int(d.get("id", 0)),
                role=str(d.get("role", "train")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SceneError):
                raise
            raise SceneError(f"bad camera entry: {exc}") from exc


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    Image v points along world ``-up`` so that ``up`` appears at the top.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(pos) < 1:
            raise ValueError("point cloud must contain at least one point")
        if len(col) != len(pos):
            raise ValueError("positions and colors disagree in length")
        if not np.isfinite(pos).all():
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "colors", _frozen(np.clip(col, 0.0, 1.0)))

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.positions[index], self.colors[index])


# --------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_COLOR_NAMES = (("red", "green", "blue"), ("r", "g", "b"))


def _parse_header(raw: bytes):
    if not raw.startswith(b"ply"):
        raise PLYError("line 1: missing 'ply' magic")
    end = raw.find(b"end_header")
    if end < 0:
        raise PLYError("header has no end_header line")
    nl = raw.find(b"\n", end)
    body_offset = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[dict] = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PLYError(f"line {lineno}: unsupported format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PLYError(f"line {lineno}: bad element line {line!r}")
            elements.append({"name": parts[1], "count": int(parts[2]), "props": [], "line": lineno})
        elif parts[0] == "property":
            if not elements:
                raise PLYError(f"line {lineno}: property before any element")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise PLYError(f"line {lineno}: bad list property {line!r}")
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise PLYError(f"line {lineno}: bad property {line!r}")
                elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PLYError(f"line {lineno}: unexpected header keyword {parts[0]!r}")
    if fmt is None:
        raise PLYError("header has no format line")
    header_lines = len(lines) + 1
    return fmt, elements, body_offset, header_lines


def load_point_cloud(path) -> PointCloud:
    """Read an ASCII or binary PLY file holding at least ``x, y, z`` vertex properties."""
    raw = Path(path).read_bytes()
    fmt, elements, offset, header_lines = _parse_header(raw)
    vidx = next((i for i, e in enumerate(elements) if e["name"] == "vertex"), None)
    if vidx is None:
        raise PLYError("no vertex element in header")
    vertex = elements[vidx]
    names = [p[0] for p in vertex["props"]]
    for axis in "xyz":
        if axis not in names:
            raise PLYError(f"line {vertex['line']}: vertex element lacks property {axis!r}")
    if any(p[1] == "list" for p in vertex["props"]):
        raise PLYError(f"line {vertex['line']}: list properties on vertices are not supported")
    n = vertex["count"]
    if n < 1:
        raise PLYError(f"line {vertex['line']}: vertex count must be at least 1")

    if fmt == "ascii":
        text = raw[offset:].decode("ascii", errors="replace").splitlines()
        skip = sum(e["count"] for e in elements[:vidx])
        rows = text[skip : skip + n]
        if len(rows) < n:
            raise PLYError(f"line {header_lines + skip + len(rows) + 1}: file ends after {len(rows)} of {n} vertices")
        table = np.empty((n, len(names)), dtype=np.float64)
        for i, row in enumerate(rows):
            lineno = header_lines + skip + i + 1
            parts = row.split()
            if len(parts) < len(names):
                raise PLYError(f"line {lineno}: expected {len(names)} values, got {len(parts)}")
            try:
                table[i] = [float(v) for v in parts[: len(names)]]
            except ValueError as exc:
                raise PLYError(f"line {lineno}: {exc}") from exc
            if not np.isfinite(table[i, [names.index(a) for a in "xyz"]]).all():
                raise PLYError(f"line {lineno}: non-finite vertex coordinate")
        columns = {name: table[:, k] for k, name in enumerate(names)}
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        for e in elements[:vidx]:
            if any(p[1] == "list" for p in e["props"]):
                raise PLYError(f"line {e['line']}: cannot skip list-valued element {e['name']!r} in binary file")
            offset += e["count"] * np.dtype([(p[0], endian + p[1]) for p in e["props"]]).itemsize
        dtype = np.dtype([(p[0], endian + p[1]) for p in vertex["props"]])
        need = n * dtype.itemsize
        if len(raw) - offset < need:
            raise PLYError(f"byte {len(raw)}: truncated vertex data, need {need} bytes from offset {offset}")
        data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
        columns = {name: data[name].astype(np.float64) for name in names}
        xyz = np.stack([columns[a] for a in "xyz"], axis=1)
        bad = np.flatnonzero(~np.isfinite(xyz).all(axis=1))
        if len(bad):
            raise PLYError(f"byte {offset + int(bad[0]) * dtype.itemsize}: non-finite vertex coordinate")

    positions = np.stack([columns[a] for a in "xyz"], axis=1)
    colors = np.full((n, 3), 0.5)
    for triple in _COLOR_NAMES:
        if all(c in columns for c in triple):
            ctype = dict((p[0], p[1]) for p in vertex["props"])[triple[0]]
            rgb = np.stack([columns[c] for c in triple], axis=1)
            colors = rgb / 255.0 if ctype.startswith(("u", "i")) else rgb
            break
    return PointCloud(positions, colors)


def save_point_cloud(path, pc: PointCloud, binary: bool = True) -> None:
    n = len(pc)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rgb = np.clip(np.rint(pc.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                     ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            for k, a in enumerate("xyz"):
                rec[a] = pc.positions[:, k]
            rec["red"], rec["green"], rec["blue"] = rgb.T
            fh.write(rec.tobytes())
        else:
            for p, c in zip(pc.positions, rgb):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))


# -------------------------------------------------------------- projection

def project_point(cam: Camera, x) -> tuple[float, float, float, bool]:
    """Pinhole projection of one world point: ``(u, v, depth, in_frustum)``."""
    u, v, depth, ok = project_points(cam, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return float(u[0]), float(v[0]), float(depth[0]), bool(ok[0])


def project_points(cam: Camera, x: np.ndarray):
    x_cam = cam.to_camera(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    z = x_cam[:, 2]
    ok = z > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x_cam[:, 0] / z + cam.cx
        v = cam.fy * x_cam[:, 1] / z + cam.cy
    return u, v, z, ok


def projection_jacobian(cam: Camera, x_cam) -> np.ndarray:
    """2x3 Jacobian of the pinhole map evaluated at a camera-space point."""
    x, y, z = np.asarray(x_cam, dtype=np.float64).reshape(3)
    if z <= NEAR_PLANE:
        raise ValueError(f"depth {z} is not beyond the near plane {NEAR_PLANE}")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def unproject(cam: Camera, u, v, depth) -> np.ndarray:
    """Camera-space point for pixel coordinates at the given depth."""
    return np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])


# ---------------------------------------------------------- images / masks

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_mask(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Binary mask from an 8-bit grayscale or RGB PNG (``> 127`` is foreground)."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    if shape is not None and gray.shape != tuple(shape):
        raise SceneError(
            f"mask {path} is {gray.shape[0]}x{gray.shape[1]} (HxW) but camera expects {shape[0]}x{shape[1]}"
        )
    return (gray > 127).astype(np.uint8)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


# ----------------------------------------------------------------- scenes

@dataclass
class Frame:
    t: float
    image: str
    mask: str | None = None
    eval_mask: str | None = None


@dataclass
class Scene:
    """A camera rig plus per-camera frame sequences, loaded from ``cameras.json``.

    Images are decoded lazily and memoised; synthetic scenes are tiny.
    """

    root: Path
    cameras: list[Camera]
    frames: dict[int, list[Frame]]
    point_cloud_path: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def train_cameras(self) -> list[Camera]:
        return [c for c in self.cameras if c.role != "test"]

    @property
    def test_cameras(self) -> list[Camera]:
        return [c for c in self.cameras if c.role == "test"]

    def camera(self, cam_id: int) -> Camera:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise SceneError(f"unknown camera id {cam_id}")

    def times(self, cam_id: int) -> list[float]:
        return [f.t for f in self.frames[cam_id]]

    def _get(self, kind: str, cam_id: int, k: int):
        key = (kind, cam_id, k)
        if key not in self._cache:
            cam = self.camera(cam_id)
            fr = self.frames[cam_id][k]
            rel = getattr(fr, kind)
            if rel is None:
                raise SceneError(f"camera {cam_id} frame {k} has no {kind}")
            path = self.root / rel
            if kind == "image":
                img = load_image(path)
                if img.shape[:2] != cam.shape:
                    raise SceneError(f"image {path} is {img.shape[0]}x{img.shape[1]} but camera expects {cam.shape[0]}x{cam.shape[1]}")
                self._cache[key] = img
            else:
                self._cache[key] = load_mask(path, cam.shape)
        return self._cache[key]

    def image(self, cam_id: int, k: int) -> np.ndarray:
        return self._get("image", cam_id, k)

    def mask0(self, cam_id: int) -> np.ndarray:
        frames = self.frames[cam_id]
        if not frames or frames[0].t != 0.0 or frames[0].mask is None:
            raise SceneError(f"camera {cam_id} has no mask at t=0")
        return self._get("mask", cam_id, 0)

    def eval_mask(self, cam_id: int, k: int) -> np.ndarray:
        fr = self.frames[cam_id][k]
        if fr.eval_mask is not None:
            return self._get("eval_mask", cam_id, k)
        return self.mask0(cam_id)

    def point_cloud(self) -> PointCloud:
        if self.point_cloud_path is None:
            raise SceneError("scene has no point cloud")
        return load_point_cloud(self.point_cloud_path)


def _check_frames(cam_id: int, frames: Sequence[Frame]) -> None:
    times = [f.t for f in frames]
    if any(not (0.0 <= t <= 1.0) for t in times):
        raise SceneError(f"camera {cam_id}: frame times must lie in [0, 1]")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise SceneError(f"camera {cam_id}: frame times must be strictly increasing")
    for f in frames:
        if f.mask is not None and f.t != 0.0:
            raise SceneError(f"camera {cam_id}: masks are only valid at t=0 (got one at t={f.t})")


def load_scene(root) -> Scene:
    """Load ``<root>/cameras.json``; ``<root>/points.ply`` is picked up when present."""
    root = Path(root)
    path = root / "cameras.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: {exc}") from exc
    if not isinstance(doc, list) or not doc:
        raise SceneError(f"{path}: expected a non-empty array of cameras")
    cameras, frames = [], {}
    for entry in doc:
        cam = Camera.from_dict(entry)
        if cam.id in frames:
            raise SceneError(f"duplicate camera id {cam.id}")
        fl = [Frame(t=float(f["t"]), image=f["image"], mask=f.get("mask"), eval_mask=f.get("eval_mask"))
              for f in entry.get("frames", [])]
        _check_frames(cam.id, fl)
        cameras.append(cam)
        frames[cam.id] = fl
    ply = root / "points.ply"
    return Scene(root=root, cameras=cameras, frames=frames, point_cloud_path=ply if ply.exists() else None)


def write_scene_json(root, cameras: Sequence[Camera], frames: dict[int, list[Frame]]) -> Path:
    doc = []
    for cam in cameras:
        entry = cam.to_dict()
        fl = []
        for f in frames.get(cam.id, []):
            d = {"t": f.t, "image": f.image}
            if f.mask is not None:
                d["mask"] = f.mask
            if f.eval_mask is not None:
                d["eval_mask"] = f.eval_mask
            fl.append(d)
        entry["frames"] = fl
        doc.append(entry)
    path = Path(root) / "cameras.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, path)
    return path


def scene_extent(cameras: Sequence[Camera]) -> float:
    """Radius of the camera rig, padded by 10% (used to scale position steps)."""
    centers = np.stack([c.center for c in cameras])
    radius = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return 1.1 * float(radius) if radius > 0 else 1.0


def fov_focal(width: int, fov_degrees: float) -> float:
    return 0.5 * width / math.tan(math.radians(fov_degrees) / 2)
