"""3D volumes, label volumes, slicing and the RVOL on-disk format.

RVOL is a JSON header sidecar next to a little-endian raw payload::

    {"dims": [nx, ny, nz], "spacing": [sx, sy, sz], "dtype": "f32",
     "order": "x-fastest", "raw": "case01.img.raw"}

In memory, grids are numpy arrays of shape ``(nz, ny, nx)`` so that C order
matches the x-fastest, z-slowest payload byte for byte.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    GeometryMismatchError,
    HeaderParseError,
    IndexOutOfRangeError,
    IoFailureError,
    MissingFileError,
    NonFiniteDataError,
    SizeMismatchError,
)

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "u16": np.dtype("<u2")}


class SliceAxis(str, enum.Enum):
    X = "X"
    Y = "Y"
    Z = "Z"

    @classmethod
    def parse(cls, value: "SliceAxis | str") -> "SliceAxis":
        return value if isinstance(value, SliceAxis) else cls(str(value).upper())


def _check_geometry(dims, spacing, shape) -> tuple[tuple[int, int, int], tuple[float, float, float]]:
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    nx, ny, nz = dims
    if tuple(shape) != (nz, ny, nx):
        raise ValueError(f"array shape {tuple(shape)} does not match dims {dims} (expected (nz, ny, nx))")
    return dims, spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar grid with float32 samples stored as ``data[z, y, x]``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        _check_geometry(data.shape[::-1], self.spacing, data.shape)
        if not np.isfinite(data).all():
            raise NonFiniteDataError("volume contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def extent(self, axis: SliceAxis | str = SliceAxis.Z) -> int:
        return self.dims["XYZ".index(SliceAxis.parse(axis).value)]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label grid; 0 is background.

    ``dtype`` records the on-disk width ("u8" or "u16") so that files round
    trip unchanged. Labels are always held as uint16 in memory.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype: str = "u16"

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.dtype.kind not in "ui" and raw.size and not np.array_equal(raw, np.round(raw)):
            raise ValueError("labels must be integers")
        if raw.size and (raw.min() < 0 or raw.max() > 65535):
            raise ValueError("labels must fit in 16 bits")
        if self.dtype not in ("u8", "u16"):
            raise ValueError(f"label dtype must be u8 or u16, got {self.dtype!r}")
        labels = np.ascontiguousarray(raw, dtype=np.uint16)
        if self.dtype == "u8" and labels.size and labels.max() > 255:
            raise ValueError("u8 label volume holds a label above 255")
        _check_geometry(labels.shape[::-1], self.spacing, labels.shape)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)

    @property
    def label_set(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unique(self.labels) if v != 0)

    def extent(self, axis: SliceAxis | str = SliceAxis.Z) -> int:
        return self.dims["XYZ".index(SliceAxis.parse(axis).value)]

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.dtype == other.dtype
            and np.array_equal(self.labels, other.labels)
        )


def check_pair(image: Volume, labels: LabelVolume) -> None:
    """Raise unless ``labels`` can serve as the mask of ``image``."""
    if image.dims != labels.dims:
        raise GeometryMismatchError(f"image dims {image.dims} != label dims {labels.dims}")
    if not np.allclose(image.spacing, labels.spacing, rtol=1e-6, atol=0):
        raise GeometryMismatchError(f"image spacing {image.spacing} != label spacing {labels.spacing}")


def _grid(v: Volume | LabelVolume) -> np.ndarray:
    return v.data if isinstance(v, Volume) else v.labels


def extract_slice(v: Volume | LabelVolume, axis: SliceAxis | str, i: int) -> np.ndarray:
    """Return a copy of plane ``i`` along ``axis``.

    Z slices are ``(ny, nx)``, Y slices ``(nz, nx)`` and X slices ``(nz, ny)``.
    """
    axis = SliceAxis.parse(axis)
    n = v.extent(axis)
    if not 0 <= i < n:
        raise IndexOutOfRangeError(f"slice {i} outside [0, {n}) along {axis.value}")
    grid = _grid(v)
    if axis is SliceAxis.Z:
        plane = grid[i]
    elif axis is SliceAxis.Y:
        plane = grid[:, i, :]
    else:
        plane = grid[:, :, i]
    return np.array(plane, copy=True)


def stack_slices(planes, axis: SliceAxis | str) -> np.ndarray:
    """Inverse of :func:`extract_slice` over every index; returns a ``(nz, ny, nx)`` array."""
    axis = SliceAxis.parse(axis)
    return np.stack(list(planes), axis={SliceAxis.Z: 0, SliceAxis.Y: 1, SliceAxis.X: 2}[axis])


def checksum(v: Volume | LabelVolume) -> str:
    """SHA-256 of the raw payload exactly as it is written to disk."""
    return hashlib.sha256(_payload(v)).hexdigest()


def _dtype_name(v: Volume | LabelVolume) -> str:
    return "f32" if isinstance(v, Volume) else v.dtype


def _payload(v: Volume | LabelVolume) -> bytes:
    return np.ascontiguousarray(_grid(v), dtype=DTYPES[_dtype_name(v)]).tobytes()


def _raw_path(header_path: Path) -> Path:
    name = header_path.name
    stem = name[: -len(".json")] if name.endswith(".json") else name
    return header_path.with_name(stem + ".raw")


def save_volume(v: Volume | LabelVolume, header_path: str | os.PathLike) -> None:
    """Write ``v`` as an RVOL header plus raw payload next to it."""
    header_path = Path(header_path)
    raw_path = _raw_path(header_path)
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": _dtype_name(v),
        "order": "x-fastest",
        "raw": raw_path.name,
    }
    try:
        raw_path.write_bytes(_payload(v))
        header_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"cannot write {header_path}: {exc}") from exc


def load_volume(header_path: str | os.PathLike) -> Volume | LabelVolume:
    """Read an RVOL header and its payload.

    ``f32`` payloads give a :class:`Volume`; ``u8`` and ``u16`` give a
    :class:`LabelVolume`.
    """
    header_path = Path(header_path)
    if not header_path.is_file():
        raise MissingFileError(f"no such header: {header_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header.get("spacing", [1.0, 1.0, 1.0])]
        dtype = header["dtype"]
        raw_name = header["raw"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise HeaderParseError(f"{header_path}: {exc}") from exc
    if dtype not in DTYPES:
        raise HeaderParseError(f"{header_path}: unknown dtype {dtype!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise HeaderParseError(f"{header_path}: unsupported order {header['order']!r}")
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise HeaderParseError(f"{header_path}: bad dims {dims}")
    if len(spacing) != 3 or not all(s > 0 for s in spacing):
        raise HeaderParseError(f"{header_path}: bad spacing {spacing}")

    raw_path = header_path.parent / raw_name
    if not raw_path.is_file():
        raise MissingFileError(f"{header_path}: payload {raw_path} not found")
    payload = raw_path.read_bytes()
    nx, ny, nz = dims
    expected = nx * ny * nz * DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{raw_path}: {len(payload)} bytes, expected {expected} for dims {dims} dtype {dtype}"
        )
    grid = np.frombuffer(payload, dtype=DTYPES[dtype]).reshape(nz, ny, nx)
    if dtype == "f32":
        if not np.isfinite(grid).all():
            raise NonFiniteDataError(f"{raw_path}: NaN or Inf in payload")
        return Volume(grid.astype(np.float32), tuple(spacing))
    return LabelVolume(grid.astype(np.uint16), tuple(spacing), dtype=dtype)
