"""Datasets: the 2-D ring of Gaussians and IDX (MNIST-style) images."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "OTASSIGN_DATA_DIR"

# third byte of the IDX magic number -> dtype (big-endian where it matters)
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    points: np.ndarray
    name: str = "dataset"
    image_shape: tuple | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset contains non-finite values")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if self.image_shape[0] * self.image_shape[1] != self.points.shape[1]:
                raise ValueError("image_shape does not match the point dimension")
        if self.labels is not None and len(self.labels) != len(self.points):
            raise ValueError("labels and points differ in length")

    @property
    def m(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def bounds(self):
        """Per-coordinate box: [0, 1] for images, the data range otherwise."""
        if self.image_shape is not None:
            return np.zeros(self.d), np.ones(self.d)
        return self.points.min(axis=0), self.points.max(axis=0)


def data_dir(default=None):
    return Path(os.environ.get(DATA_DIR_ENV, default or Path.home() / ".cache" / "otassign"))


def ring_of_gaussians(n_modes=10, n_points=2000, radius=1.0, sigma=0.02, seed=0):
    if n_modes < 1 or n_points < 1:
        raise ValueError("need at least one mode and one point")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_modes) / n_modes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    modes = np.arange(n_points) % n_modes
    points = centers[modes] + sigma * rng.standard_normal((n_points, 2))
    return Dataset(points, name=f"ring{n_modes}", labels=modes)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path):
    """Parse any IDX file into a numpy array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise IdxFormatError(f"{path}: bad magic number 0x{struct.unpack('>I', raw[:4])[0]:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[dtype_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    body = raw[header:]
    if len(body) < expected:
        raise IdxFormatError(f"{path}: truncated data ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise IdxFormatError(f"{path}: {len(body) - expected} trailing bytes")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    code = next((c for c, dt in _IDX_TYPES.items() if dt.newbyteorder("=") == native), None)
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body = array.astype(_IDX_TYPES[code], copy=False).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + body)


def _magic(arr_path):
    with _open(arr_path) as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise IdxFormatError(f"{arr_path}: truncated header")
    return struct.unpack(">I", head)[0]


def load_idx(images_path, labels_path=None, name=None):
    """Load ubyte images (magic 0x803) and optional labels (0x801), pixels scaled to [0, 1]."""
    if _magic(images_path) != IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: expected image magic 0x{IMAGES_MAGIC:08x}")
    images = read_idx(images_path)
    labels = None
    if labels_path is not None:
        if _magic(labels_path) != LABELS_MAGIC:
            raise IdxFormatError(f"{labels_path}: expected label magic 0x{LABELS_MAGIC:08x}")
        labels = read_idx(labels_path).astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise IdxFormatError(
                f"{images.shape[0]} images but {labels.shape[0]} labels"
            )
    n, h, w = images.shape
    points = images.reshape(n, h * w).astype(np.float64) / 255.0
    return Dataset(points, name=name or Path(images_path).name, image_shape=(h, w), labels=labels)


def _bilinear_matrix(n_in, n_out):
    """Row-stochastic ``(n_out, n_in)`` resampling matrix, half-pixel centres."""
    out = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    out[np.arange(n_out), lo] += 1 - frac
    out[np.arange(n_out), hi] += frac
    return out


def resize_bilinear(images, target):
    """Resize a stack ``(n, H, W)`` to ``target`` with bilinear interpolation."""
    _, h, w = images.shape
    rows = _bilinear_matrix(h, target[0])
    cols = _bilinear_matrix(w, target[1])
    return rows @ images @ cols.T


def preprocess(ds, subset=5000, target=(32, 32), seed=None):
    """Keep ``subset`` images (after a seeded shuffle when ``seed`` is given) and upscale them."""
    if ds.image_shape is None:
        raise ValueError("preprocess expects an image dataset")
    if subset > ds.m:
        raise ValueError(f"subset {subset} larger than dataset ({ds.m})")
    order = np.arange(ds.m)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(ds.m)
    keep = order[:subset]
    images = ds.points[keep].reshape(-1, *ds.image_shape)
    if target is not None and tuple(target) != ds.image_shape:
        images = np.clip(resize_bilinear(images, target), 0.0, 1.0)
        shape = tuple(target)
    else:
        shape = ds.image_shape
    labels = ds.labels[keep] if ds.labels is not None else None
    return Dataset(images.reshape(subset, -1), name=ds.name, image_shape=shape, labels=labels)
