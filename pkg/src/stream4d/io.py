"""File formats: D4RG grids, PGM images, PLY clouds and JSON manifests.

D4RG layout (all little-endian)::

    b"D4RG" | u32 version | u32 height | u32 width | u32 channels
    float32[height * width * channels]   row-major, channels last
    u8[height * width]                   validity (0 or 1)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from .errors import BadMagic, ConfigError, MalformedManifest, TruncatedFile
from .geometry import Intrinsics, SE3Pose

GRID_MAGIC = b"D4RG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIII")


# --------------------------------------------------------------------------
# D4RG grids


@dataclass(eq=False)
class Grid:
    data: np.ndarray  # H x W x C float32
    valid: np.ndarray  # H x W bool

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def squeeze(self) -> np.ndarray:
        """Single-channel grids as ``H x W``; others unchanged."""
        return self.data[..., 0] if self.channels == 1 else self.data


def encode_grid(data: np.ndarray, valid: np.ndarray | None = None) -> bytes:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[..., None]
    if data.ndim != 3:
        raise ValueError(f"grid data must be H x W or H x W x C, got {data.shape}")
    h, w, c = data.shape
    if valid is None:
        valid = np.ones((h, w), bool)
    valid = np.asarray(valid, bool)
    if valid.shape != (h, w):
        raise ValueError("validity mask shape does not match the grid")
    body = np.ascontiguousarray(data, dtype="<f4").tobytes()
    return _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, h, w, c) + body + valid.astype(np.uint8).tobytes()


def decode_grid(blob: bytes, source: str = "<bytes>") -> Grid:
    if len(blob) < 4 or blob[:4] != GRID_MAGIC:
        raise BadMagic(f"{source}: not a D4RG grid")
    if len(blob) < _GRID_HEADER.size:
        raise TruncatedFile(f"{source}: truncated D4RG header")
    _, version, h, w, c = _GRID_HEADER.unpack_from(blob)
    if version != GRID_VERSION:
        raise BadMagic(f"{source}: unsupported D4RG version {version}")
    n = h * w * c
    need = _GRID_HEADER.size + 4 * n + h * w
    if len(blob) < need:
        raise TruncatedFile(f"{source}: expected {need} bytes, found {len(blob)}")
    off = _GRID_HEADER.size
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(h, w, c).copy()
    valid = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off + 4 * n).reshape(h, w) != 0
    return Grid(data, valid)


def write_grid(path, data: np.ndarray, valid: np.ndarray | None = None) -> None:
    _write_bytes(path, encode_grid(data, valid))


def read_grid(path) -> Grid:
    path = Path(path)
    return decode_grid(path.read_bytes(), str(path))


def _write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


# --------------------------------------------------------------------------
# PGM (binary, 8 bit)


def write_pgm(path, image: np.ndarray) -> None:
    """Grey image in ``[0, 1]`` (floats) or ``uint8``/``bool`` to P5."""
    image = np.asarray(image)
    if image.dtype == bool:
        image = image.astype(np.uint8) * 255
    elif image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = image.shape
    _write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    """P5 image as ``uint8`` ``H x W``."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] != b"P5":
        raise BadMagic(f"{path}: not a binary PGM")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile(f"{path}: truncated PGM header")
        tokens.append(int(blob[start:pos]))
    w, h, maxval = tokens
    if maxval > 255:
        raise BadMagic(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    if len(blob) < pos + w * h:
        raise TruncatedFile(f"{path}: expected {w * h} pixels")
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


# --------------------------------------------------------------------------
# PLY


PLY_FIELDS = (("x", "f4"), ("y", "f4"), ("z", "f4"), ("confidence", "f4"), ("sensor", "i4"), ("time_index", "i4"))
_PLY_TYPES = {"f4": "float", "i4": "int"}


def write_ply(path, points: np.ndarray, confidence: np.ndarray, sensor: np.ndarray, time_index: np.ndarray,
              *, binary: bool = True) -> None:
    n = len(points)
    rec = np.zeros(n, dtype=[(name, "<" + t) for name, t in PLY_FIELDS])
    rec["x"], rec["y"], rec["z"] = np.asarray(points, float).T if n else (0, 0, 0)
    rec["confidence"] = confidence
    rec["sensor"] = sensor
    rec["time_index"] = time_index
    fmt = "binary_little_endian" if binary else "ascii"
    head = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    head += [f"property {_PLY_TYPES[t]} {name}" for name, t in PLY_FIELDS]
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        body = rec.tobytes()
    else:
        lines = [" ".join([*(repr(float(r[k])) for k in ("x", "y", "z", "confidence")),
                           str(int(r["sensor"])), str(int(r["time_index"]))]) for r in rec]
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    _write_bytes(path, header + body)


def read_ply(path) -> np.ndarray:
    """Structured array with the fields written by :func:`write_ply`."""
    path = Path(path)
    blob = path.read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise BadMagic(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii").splitlines()
    fmt = header[1].split()[1]
    n = next(int(line.split()[2]) for line in header if line.startswith("element vertex"))
    dtype = [(name, "<" + t) for name, t in PLY_FIELDS]
    body = blob[end + len(b"end_header\n"):]
    if fmt == "binary_little_endian":
        if len(body) < n * np.dtype(dtype).itemsize:
            raise TruncatedFile(f"{path}: expected {n} vertices")
        return np.frombuffer(body, dtype=dtype, count=n).copy()
    rows = body.decode("ascii").split("\n")[:n]
    if len(rows) < n or (n and not rows[-1]):
        raise TruncatedFile(f"{path}: expected {n} vertices")
    out = np.zeros(n, dtype=dtype)
    for i, row in enumerate(rows):
        vals = row.split()
        for j, (name, t) in enumerate(PLY_FIELDS):
            out[name][i] = float(vals[j]) if t == "f4" else int(vals[j])
    return out


# --------------------------------------------------------------------------
# JSON helpers


def write_json(path, obj: Any) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    _write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise MalformedManifest(f"{path}: file not found") from None
    except json.JSONDecodeError as e:
        raise MalformedManifest(f"{path}: invalid JSON ({e})") from None


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class SensorInfo:
    id: int
    intrinsics: Intrinsics
    rig: SE3Pose


@dataclass(frozen=True)
class FrameRecord:
    time_index: int
    sensor: int
    image: Path
    pose: SE3Pose  # camera-to-world
    depth: Path | None = None
    mask: Path | None = None  # ground-truth dynamic mask
    flow_forward: Path | None = None  # to time_index + 1
    flow_backward: Path | None = None  # from time_index + 1 back to time_index


@dataclass
class Manifest:
    root: Path
    sensors: list[SensorInfo]
    timestamps: list[float]
    frames: dict[tuple[int, int], FrameRecord]
    stage: str = "temporal"

    @property
    def num_sensors(self) -> int:
        return len(self.sensors)

    def frame(self, ti: int, c: int) -> FrameRecord:
        return self.frames[(ti, c)]


_FRAME_PATHS = ("image", "depth", "mask", "flow_forward", "flow_backward")


def manifest_dict(root_rel: str, sensors: list[SensorInfo], timestamps: list[float],
                  frames: list[dict], stage: str = "temporal") -> dict:
    return {
        "version": 1,
        "root": root_rel,
        "stage": stage,
        "timestamps": [float(t) for t in timestamps],
        "sensors": [{"id": s.id, "intrinsics": s.intrinsics.to_dict(), "rig": s.rig.to_dict()} for s in sensors],
        "frames": frames,
    }


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest; every referenced file must exist."""
    path = Path(path)
    d = read_json(path)

    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise MalformedManifest(f"{path}: missing '{key}' in {where}")
        return obj[key]

    root = (path.parent / d.get("root", ".")).resolve()
    stage = d.get("stage", "temporal")
    if stage not in ("temporal", "spatial"):
        raise MalformedManifest(f"{path}: unknown stage {stage!r}")
    timestamps = [float(t) for t in need(d, "timestamps", "manifest")]
    if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
        raise MalformedManifest(f"{path}: timestamps must be strictly increasing")
    try:
        sensors = [SensorInfo(int(need(s, "id", "sensor")), Intrinsics.from_dict(need(s, "intrinsics", "sensor")),
                              SE3Pose.from_dict(need(s, "rig", "sensor")))
                   for s in need(d, "sensors", "manifest")]
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, MalformedManifest):
            raise
        raise MalformedManifest(f"{path}: bad sensor entry ({e})") from None
    ids = [s.id for s in sensors]
    if len(set(ids)) != len(ids):
        raise MalformedManifest(f"{path}: duplicate sensor ids")
    if ids != list(range(len(ids))):
        raise MalformedManifest(f"{path}: sensor ids must be 0..{len(ids) - 1} in order")
    frames = {}
    for i, fr in enumerate(need(d, "frames", "manifest")):
        where = f"frames[{i}]"
        ti, c = int(need(fr, "time_index", where)), int(need(fr, "sensor", where))
        if not (0 <= ti < len(timestamps) and 0 <= c < len(sensors)):
            raise MalformedManifest(f"{path}: {where} refers to unknown (t={ti}, sensor={c})")
        if (ti, c) in frames:
            raise MalformedManifest(f"{path}: duplicate frame (t={ti}, sensor={c})")
        paths = {}
        for key in _FRAME_PATHS:
            rel = fr.get(key)
            if key == "image" and rel is None:
                raise MalformedManifest(f"{path}: missing 'image' in {where}")
            if rel is None:
                paths[key] = None
                continue
            p = root / rel
            if not p.is_file():
                raise MalformedManifest(f"{path}: {where} references missing file {p}")
            paths[key] = p
        try:
            pose = SE3Pose.from_dict(need(fr, "pose", where))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, MalformedManifest):
                raise
            raise MalformedManifest(f"{path}: bad pose in {where} ({e})") from None
        frames[(ti, c)] = FrameRecord(ti, c, pose=pose, **paths)
    missing = [(t, c) for t in range(len(timestamps)) for c in range(len(sensors)) if (t, c) not in frames]
    if missing:
        raise MalformedManifest(f"{path}: no frame for (t, sensor) = {missing[0]}")
    return Manifest(root, sensors, timestamps, frames, stage)


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    working_frames: int = 5
    capacity: int = 4096
    sim_threshold: float = 0.95
    related_timestamps: int = 4
    feature_dim: int = 64
    tau: float = 1.5
    gamma: float = 1.5
    alpha: float = 0.5
    backbone: str = "oracle"  # oracle | toy
    flow: str = "files"  # files | zero
    refiner: str = "region"  # region | identity
    cameras: str = "estimated"  # estimated | gt
    ransac: bool = False
    stage: str = "temporal"  # temporal | spatial
    seed: int = 0

    _CHOICES = {"backbone": ("oracle", "toy"), "flow": ("files", "zero"), "refiner": ("region", "identity"),
                "cameras": ("estimated", "gt"), "stage": ("temporal", "spatial")}

    def __post_init__(self):
        for name in ("working_frames", "capacity", "related_timestamps", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("sim_threshold", "tau", "gamma", "alpha"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be positive")
        for name, allowed in self._CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


def relpath(path, start) -> str:
    return Path(os.path.relpath(path, start)).as_posix()
