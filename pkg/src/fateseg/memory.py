"""Memory encoding (mask + embedding -> memory tokens) and memory fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EmbeddingMap
from .errors import (
    EmptyAnatomicalSetError,
    GridLargerThanMaskError,
    HeterogeneousShapesError,
    ShapeMismatchError,
)
from .rng import stream, truncated_normal

ANATOMICAL = "anatomical"
VOLUMETRIC = "volumetric"
MEMORY_WEIGHT_STD = 1e-3


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Area-weighted occupancy of ``mask`` in each cell of a ``gh x gw`` grid.

    Cell edges sit at ``k * h / gh``; pixels straddling an edge contribute
    their overlapping fraction to both cells. Returns ``gh*gw`` values,
    row-major.
    """
    m = np.asarray(mask, dtype=np.float64)
    gh, gw = grid
    h, w = m.shape
    if gh > h or gw > w:
        raise GridLargerThanMaskError(f"grid {grid} larger than mask {m.shape}")
    wy = _overlap_weights(h, gh)
    wx = _overlap_weights(w, gw)
    return (wy @ m @ wx.T).ravel()


def _overlap_weights(n: int, g: int) -> np.ndarray:
    """``(g, n)`` matrix: fraction of cell k covered by pixel i, rows sum to 1."""
    if n % g == 0:
        s = n // g
        out = np.zeros((g, n))
        for k in range(g):
            out[k, k * s : (k + 1) * s] = 1.0 / s
        return out
    edges = np.arange(g + 1) * (n / g)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / (n / g)


@dataclass(frozen=True, eq=False)
class MemoryEmbedding:
    """Memory tokens with the mask that produced them.

    ``mask_values`` is the per-token occupancy; ``mask`` keeps the binary mask
    at slice resolution so decoders can transfer sub-token detail.
    """

    tokens: np.ndarray
    mask_values: np.ndarray
    kind: str
    grid: tuple[int, int]
    mask: np.ndarray | None = None
    provenance: tuple = ()

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


class MemoryEncoder:
    """Two 3x3 convolutions (1 -> d -> d, ReLU between) over the token grid.

    Weights are seeded truncated normals with standard deviation ``std``;
    biases are zero unless ``random_bias`` is set. The default std is small
    so memory features shift key similarities far less than slice content
    does.
    """

    def __init__(self, dim: int, seed: int = 0, random_bias: bool = False, std: float = MEMORY_WEIGHT_STD):
        self.dim = dim
        self.seed = seed
        rng = stream("memory.conv1", seed)
        self.w1 = truncated_normal(rng, (dim, 1, 3, 3), std=std)
        self.b1 = truncated_normal(rng, (dim,), std=std) if random_bias else np.zeros(dim)
        rng = stream("memory.conv2", seed)
        self.w2 = truncated_normal(rng, (dim, dim, 3, 3), std=std)
        self.b2 = truncated_normal(rng, (dim,), std=std) if random_bias else np.zeros(dim)

    def conv_stack(self, occupancy: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        """``(T,)`` occupancy -> ``(T, d)`` memory features."""
        gh, gw = grid
        x = np.asarray(occupancy, dtype=np.float64).reshape(1, gh, gw)
        hidden = np.maximum(_conv3x3(x, self.w1, self.b1), 0.0)
        out = _conv3x3(hidden, self.w2, self.b2)
        return out.reshape(self.dim, gh * gw).T

    def encode(
        self, mask: np.ndarray, f: EmbeddingMap, kind: str = ANATOMICAL, slice_dims: tuple[int, int] | None = None,
        provenance: tuple = (),
    ) -> MemoryEmbedding:
        mask = np.asarray(mask).astype(bool)
        if slice_dims is not None and mask.shape != tuple(slice_dims):
            raise ShapeMismatchError(f"mask {mask.shape} does not match slice {tuple(slice_dims)}")
        if f.channels != self.dim:
            raise ShapeMismatchError(f"embedding has {f.channels} channels, memory encoder {self.dim}")
        occupancy = downsample_mask(mask, f.grid)
        tokens = self.conv_stack(occupancy, f.grid) + f.tokens
        return MemoryEmbedding(tokens, occupancy, kind, f.grid, mask, provenance)


def encode_memory(
    mask: np.ndarray, f: EmbeddingMap, kind: str = ANATOMICAL, encoder: MemoryEncoder | None = None
) -> MemoryEmbedding:
    """Memory tokens for ``mask`` on top of ``f`` with a default-seeded encoder."""
    encoder = encoder or MemoryEncoder(f.channels)
    return encoder.encode(mask, f, kind)


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 convolution, ``x`` is ``(c_in, h, w)``, ``w`` is ``(c_out, c_in, 3, 3)``."""
    c_in, h, wd = x.shape
    padded = np.zeros((c_in, h + 2, wd + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((w.shape[0], h, wd))
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", w[:, :, dy, dx], padded[:, dy : dy + h, dx : dx + wd])
    return out + b[:, None, None]


@dataclass(frozen=True, eq=False)
class UnifiedMemory:
    blocks: tuple[MemoryEmbedding, ...] = field(default_factory=tuple)

    @property
    def total_tokens(self) -> int:
        return sum(b.n_tokens for b in self.blocks)

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([b.tokens for b in self.blocks], axis=0)

    @property
    def mask_values(self) -> np.ndarray:
        return np.concatenate([b.mask_values for b in self.blocks])

    @property
    def has_volumetric(self) -> bool:
        return any(b.kind == VOLUMETRIC for b in self.blocks)


def zero_block(like: MemoryEmbedding) -> MemoryEmbedding:
    """All-zero volumetric block standing in for a missing adjacent prediction."""
    mask = None if like.mask is None else np.zeros_like(like.mask, dtype=bool)
    return MemoryEmbedding(
        np.zeros_like(like.tokens), np.zeros_like(like.mask_values), VOLUMETRIC, like.grid, mask, ("zero",)
    )


def fuse_memories(
    anatomical: Sequence[MemoryEmbedding],
    volumetric: MemoryEmbedding | Sequence[MemoryEmbedding] | None = None,
    zero_block_mode: str = "omit",
) -> UnifiedMemory:
    """Concatenate memories along the token axis, anatomical first.

    With no volumetric memory, ``zero_block_mode="omit"`` leaves it out and
    ``"materialize"`` appends an all-zero block of the same shape.
    """
    anatomical = list(anatomical)
    if not anatomical:
        raise EmptyAnatomicalSetError("need at least one anatomical memory")
    if volumetric is None:
        vol = []
    elif isinstance(volumetric, MemoryEmbedding):
        vol = [volumetric]
    else:
        vol = list(volumetric)
    if not vol:
        if zero_block_mode == "materialize":
            vol = [zero_block(anatomical[0])]
        elif zero_block_mode != "omit":
            raise ValueError(f"unknown zero_block_mode {zero_block_mode!r}")
    blocks = tuple(anatomical + vol)
    shape = (blocks[0].n_tokens, blocks[0].channels)
    for b in blocks:
        if (b.n_tokens, b.channels) != shape:
            raise HeterogeneousShapesError(f"block shape {(b.n_tokens, b.channels)} != {shape}")
    return UnifiedMemory(blocks)
