"""Procedural toy datasets and the DDAT tensor container.

DDAT layout (all little-endian)::

    0  4 bytes  magic b"DDAT"
    4  u8       version (1)
    5  u8       dtype code: 1=float32 2=float64 3=uint8 4=uint32
    6  u8       rank
    7  u8       reserved (0)
    8  rank*u64 dims
    .. payload  row-major
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ndgrad import Tensor

MAGIC = b"DDAT"
VERSION = 1
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<u4")}

SHAPE_CLASSES = ("disk", "ring", "cross", "bar_h", "bar_v", "triangle")


class DDATError(ValueError):
    pass


# -- DDAT ------------------------------------------------------------------------

def _dtype_code(dt: np.dtype) -> int:
    for code, ref in _CODES.items():
        if dt.kind == ref.kind and dt.itemsize == ref.itemsize:
            return code
    raise TypeError(f"DDAT cannot store dtype {dt}; supported: float32, float64, uint8, uint32")


def encode_ddat(array) -> bytes:
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    code = _dtype_code(arr.dtype)
    if arr.ndim > 255:
        raise DDATError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return header + payload


def decode_ddat(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DDATError(f"truncated header: {len(buf)} bytes, need 8 at offset 0")
    if buf[:4] != MAGIC:
        raise DDATError(f"bad magic {buf[:4]!r} at offset 0")
    version, code, rank, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise DDATError(f"unsupported version {version} at offset 4")
    if code not in _CODES:
        raise DDATError(f"unknown dtype code {code} at offset 5")
    dims_end = 8 + 8 * rank
    if len(buf) < dims_end:
        raise DDATError(f"truncated dims: need {dims_end} bytes, file has {len(buf)} (offset 8)")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dt = _CODES[code]
    expected = int(np.prod(dims, dtype=np.uint64)) * dt.itemsize
    got = len(buf) - dims_end
    if got != expected:
        raise DDATError(f"payload length {got} != expected {expected} at offset {dims_end}")
    arr = np.frombuffer(buf, dtype=dt, offset=dims_end, count=expected // dt.itemsize)
    return arr.reshape(dims).astype(dt.newbyteorder("="), copy=True)


def write_ddat(path, array) -> None:
    Path(path).write_bytes(encode_ddat(array))


def read_ddat(path) -> np.ndarray:
    return decode_ddat(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- named tensor checkpoints ----------------------------------------------------

def save_tensors(directory, tensors: dict[str, np.ndarray], descriptor: dict | None = None) -> Path:
    """Write a manifest of named DDAT tensors (plus an optional JSON descriptor)."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        fname = f"tensors/{name}.ddt"
        write_ddat(directory / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "sha256": sha256_file(directory / fname)})
    manifest = {"format": "DDAT-manifest", "tensors": entries}
    if descriptor is not None:
        manifest["architecture"] = descriptor
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict | None]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    out = {}
    for entry in manifest["tensors"]:
        try:
            out[entry["name"]] = read_ddat(directory / entry["file"])
        except DDATError as exc:
            raise DDATError(f"{entry['file']}: {exc}") from exc
    return out, manifest.get("architecture")


# -- datasets --------------------------------------------------------------------

@dataclass
class ShapeSetSpec:
    num_classes: int = 6
    per_class: int = 100
    resolution: int = 16
    # +/-3 px at R=16 drops raw-pixel nearest-centroid accuracy below 60%
    position_jitter: float = 1.0
    size_range: tuple = (0.6, 1.0)
    rotation_deg: float = 20.0
    intensity_range: tuple = (0.6, 1.0)
    noise_sigma: float = 0.05
    seed: int = 0


def _inside(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if kind == "disk":
        return u * u + v * v <= r * r
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.65 * r) ** 2)
    w = 0.22 * r
    if kind == "cross":
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if kind == "bar_h":
        return (np.abs(u) <= r) & (np.abs(v) <= w)
    if kind == "bar_v":
        return (np.abs(u) <= w) & (np.abs(v) <= r)
    if kind == "triangle":
        angles = np.deg2rad([90.0, 210.0, 330.0])
        px, py = r * np.cos(angles), r * np.sin(angles)
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            ax, ay, bx, by = px[k], py[k], px[(k + 1) % 3], py[(k + 1) % 3]
            inside &= (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0
        return inside
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind: str, resolution: int, cx: float, cy: float, size: float,
                 angle_deg: float, supersample: int = 4) -> np.ndarray:
    """Anti-aliased coverage map in [0, 1] for one shape."""
    n = resolution * supersample
    coords = (np.arange(n) + 0.5) / supersample
    x, y = np.meshgrid(coords, coords)
    th = np.deg2rad(angle_deg)
    dx, dy = x - cx, -(y - cy)
    u = np.cos(th) * dx + np.sin(th) * dy
    v = -np.sin(th) * dx + np.cos(th) * dy
    mask = _inside(kind, u, v, size * 0.4 * resolution).astype(np.float64)
    return mask.reshape(resolution, supersample, resolution, supersample).mean(axis=(1, 3))


def synth_shapes(spec: ShapeSetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Balanced ShapeSet images ``[N, 1, R, R]`` in [-1, 1] and labels ``[N]``."""
    if spec.resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {spec.resolution}")
    if not 1 <= spec.num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"num_classes must be in 1..{len(SHAPE_CLASSES)}")
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    labels = labels[rng.permutation(labels.size)]
    images = np.empty((labels.size, 1, res, res), dtype=np.float32)
    for i, lab in enumerate(labels):
        cx, cy = res / 2 + rng.uniform(-spec.position_jitter, spec.position_jitter, size=2)
        size = rng.uniform(*spec.size_range)
        angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
        level = rng.uniform(*spec.intensity_range)
        cover = render_shape(SHAPE_CLASSES[lab], res, cx, cy, size, angle)
        img = -1.0 + 2.0 * level * cover + rng.normal(0.0, spec.noise_sigma, size=(res, res))
        images[i, 0] = np.clip(img, -1.0, 1.0)
    return images, labels.astype(np.uint32)


def gauss2d(num_classes: int = 4, per_class: int = 100, radius: float = 3.0, std: float = 0.5,
            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs on a circle; raw ``[N, 2]`` points and labels."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(num_classes), per_class)
    points = centers[labels] + rng.normal(0.0, std, size=(labels.size, 2))
    return points.astype(np.float32), labels.astype(np.uint32)


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    tx = train_x.reshape(len(train_x), -1)
    classes = np.unique(train_y)
    cents = np.stack([tx[train_y == c].mean(axis=0) for c in classes])
    q = test_x.reshape(len(test_x), -1)
    d = ((q[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((classes[d.argmin(1)] == test_y).mean())


def write_dataset(directory, name: str, images: np.ndarray, labels: np.ndarray | None,
                  extra: dict | None = None, label_file: str = "labels.ddt") -> dict:
    """Store images (and labels) as DDAT files with a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ddat(directory / "images.ddt", np.asarray(images, dtype=np.float32))
    files = {"images": "images.ddt"}
    manifest = {"name": name, "n": int(len(images))}
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint32)
        write_ddat(directory / label_file, labels)
        files["labels"] = label_file
        classes, counts = np.unique(labels, return_counts=True)
        manifest["classes"] = int(classes.max()) + 1 if classes.size else 0
        manifest["counts"] = {int(c): int(k) for c, k in zip(classes, counts)}
    manifest["files"] = files
    manifest["sha256"] = {k: sha256_file(directory / v) for k, v in files.items()}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset(directory) -> tuple[np.ndarray, np.ndarray | None, dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest missing: {mpath}")
    manifest = json.loads(mpath.read_text())
    images = read_ddat(directory / manifest["files"]["images"])
    labels = None
    if "labels" in manifest["files"]:
        labels = read_ddat(directory / manifest["files"]["labels"])
    return images, labels, manifest


def spec_dict(spec: ShapeSetSpec) -> dict:
    d = asdict(spec)
    d["classes"] = list(SHAPE_CLASSES[: spec.num_classes])
    return d


def default_output_root() -> Path:
    return Path(os.environ.get("DREAMDA_OUT", "runs"))
