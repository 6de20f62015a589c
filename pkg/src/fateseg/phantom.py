"""Synthetic phantoms with analytic ground truth.

Voxel ``(x, y, z)`` sits at integer coordinates, so a sphere of radius ``r``
centred on a voxel labels exactly the lattice points with
``dx² + dy² + dz² <= r²``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import OverlapPolicyViolationError
from .rng import stream
from .volume import LabelVolume, Volume

SHAPES = ("sphere", "ellipsoid", "box", "shell")


@dataclass(frozen=True)
class PhantomObject:
    """One labelled solid.

    ``size`` depends on ``shape``: ``[r]`` for a sphere, ``[rx, ry, rz]`` for
    an ellipsoid, ``[hx, hy, hz]`` half-widths for a box and
    ``[radius, thickness]`` for a shell. A shell is the part of a spherical
    shell whose direction from the centre lies within ``cap_deg`` of ``axis``.
    """

    shape: str
    label: int
    intensity: float
    center: tuple[float, float, float]
    size: tuple[float, ...]
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    cap_deg: float = 60.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if not 1 <= int(self.label) <= 65535:
            raise ValueError("object labels must be in 1..65535")
        want = {"sphere": 1, "ellipsoid": 3, "box": 3, "shell": 2}[self.shape]
        if len(self.size) != want or any(s <= 0 for s in self.size):
            raise ValueError(f"{self.shape} needs {want} positive size values, got {self.size}")

    def interior(self, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        cx, cy, cz = self.center
        dx, dy, dz = x - cx, y - cy, z - cz
        if self.shape == "sphere":
            (r,) = self.size
            return dx * dx + dy * dy + dz * dz <= r * r
        if self.shape == "ellipsoid":
            rx, ry, rz = self.size
            return (dx / rx) ** 2 + (dy / ry) ** 2 + (dz / rz) ** 2 <= 1.0
        if self.shape == "box":
            hx, hy, hz = self.size
            return (np.abs(dx) <= hx) & (np.abs(dy) <= hy) & (np.abs(dz) <= hz)
        radius, thickness = self.size
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        ax = np.asarray(self.axis, dtype=float)
        ax = ax / np.linalg.norm(ax)
        along = dx * ax[0] + dy * ax[1] + dz * ax[2]
        in_cap = along >= np.cos(np.deg2rad(self.cap_deg)) * dist
        return (np.abs(dist - radius) <= thickness / 2.0) & in_cap

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "label": int(self.label),
            "intensity": float(self.intensity),
            "center": list(self.center),
            "size": list(self.size),
            "axis": list(self.axis),
            "cap_deg": float(self.cap_deg),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PhantomObject":
        return cls(
            shape=d["shape"],
            label=int(d["label"]),
            intensity=float(d["intensity"]),
            center=tuple(float(c) for c in d["center"]),
            size=tuple(float(s) for s in d["size"]),
            axis=tuple(float(a) for a in d.get("axis", (0.0, 0.0, 1.0))),
            cap_deg=float(d.get("cap_deg", 60.0)),
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, intensities and noise for one phantom family.

    ``jitter`` is only consulted by :func:`make_dataset`, which shifts every
    object centre by an integer offset in ``[-jitter, jitter]`` per axis.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    objects: tuple[PhantomObject, ...] = ()
    background: float = 0.0
    noise_sigma: float = 0.0
    allow_overlap: bool = False
    jitter: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "background": self.background,
            "noise_sigma": self.noise_sigma,
            "allow_overlap": self.allow_overlap,
            "jitter": self.jitter,
            "objects": [o.to_json() for o in self.objects],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        return cls(
            dims=tuple(int(n) for n in d.get("dims", (64, 64, 64))),
            spacing=tuple(float(s) for s in d.get("spacing", (1.0, 1.0, 1.0))),
            objects=tuple(PhantomObject.from_json(o) for o in d.get("objects", ())),
            background=float(d.get("background", 0.0)),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            allow_overlap=bool(d.get("allow_overlap", False)),
            jitter=int(d.get("jitter", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PhantomSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def make_phantom(spec: PhantomSpec, seed: int) -> tuple[Volume, LabelVolume]:
    """Render ``spec``; ``seed`` only drives the additive Gaussian noise."""
    nx, ny, nz = spec.dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    labels = np.zeros((nz, ny, nx), dtype=np.uint16)
    image = np.full((nz, ny, nx), spec.background, dtype=np.float64)
    for obj in spec.objects:
        inside = obj.interior(x, y, z)
        if not spec.allow_overlap:
            clash = inside & (labels != 0)
            if clash.any():
                other = int(labels[clash][0])
                raise OverlapPolicyViolationError(
                    f"object with label {obj.label} overlaps label {other} in {int(clash.sum())} voxels"
                )
        labels[inside] = obj.label
        image[inside] = spec.background + obj.intensity
    if spec.noise_sigma > 0:
        image += spec.noise_sigma * stream("phantom.noise", seed).standard_normal(image.shape)
    return Volume(image.astype(np.float32), spec.spacing), LabelVolume(labels, spec.spacing)


def jittered(spec: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    if spec.jitter == 0:
        return spec
    objects = []
    for obj in spec.objects:
        shift = rng.integers(-spec.jitter, spec.jitter + 1, size=3)
        objects.append(replace(obj, center=tuple(float(c + s) for c, s in zip(obj.center, shift))))
    return replace(spec, objects=tuple(objects))


def make_dataset(
    spec: PhantomSpec, n: int, seed: int
) -> list[tuple[str, Volume, LabelVolume]]:
    """``n`` phantoms named ``case000``...; object centres jittered per volume."""
    cases = []
    for k in range(n):
        local = jittered(spec, stream(f"phantom.jitter.{k}", seed))
        image, labels = make_phantom(local, seed * 100003 + k)
        cases.append((f"case{k:03d}", image, labels))
    return cases


def default_spec(dims: Sequence[int] = (64, 64, 64), noise_sigma: float = 0.02, jitter: int = 2) -> PhantomSpec:
    """Three spheres of distinct intensity plus a thin curved shell.

    Laid out on a 64-voxel reference grid and scaled to ``dims``; objects keep
    enough clearance that per-object jitter up to 2 never makes them touch.
    """
    sx, sy, sz = (n / 64.0 for n in dims)
    r = min(sx, sy, sz)

    def at(x, y, z):
        return (x * sx, y * sy, z * sz)

    objects = (
        PhantomObject("sphere", 1, 0.9, at(19, 19, 22), (11 * r,)),
        PhantomObject("sphere", 2, 0.6, at(46, 20, 40), (10 * r,)),
        PhantomObject("sphere", 3, 0.35, at(43, 46, 22), (12 * r,)),
        PhantomObject("shell", 4, 0.75, at(22, 42, 42), (14 * r, 2.0 * r), axis=(-0.6, 0.6, 0.5), cap_deg=55.0),
    )
    return PhantomSpec(
        dims=tuple(int(n) for n in dims), objects=objects, background=0.1, noise_sigma=noise_sigma, jitter=jitter
    )
