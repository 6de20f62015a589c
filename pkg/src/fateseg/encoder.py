"""Slice encoders producing token-grid embeddings.

Two backends share one contract: a 2D slice is resized to ``S x S``, cut into
``p x p`` patches and mapped to a ``(S/p)² x d`` token matrix.

``PatchMean`` tokens are hand-built patch statistics, so their behaviour can
be predicted exactly. ``ToyViT`` is a small pre-norm transformer whose weights
come from seeded streams and are never trained.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from .errors import NonFiniteInputError, ShapeMismatchError
from .rng import stream, truncated_normal

N_STATS = 8
ANCHOR_SCALE = 0.5
LN_EPS = 1e-6


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "PatchMean"
    input_size: int = 64
    patch: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 4
    weight_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("PatchMean", "ToyViT"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.input_size <= 0 or self.patch <= 0 or self.dim <= 0:
            raise ValueError("input_size, patch and dim must be positive")
        if self.input_size % self.patch:
            raise ValueError(f"input_size {self.input_size} not divisible by patch {self.patch}")
        if self.kind == "ToyViT" and (self.heads <= 0 or self.dim % self.heads):
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.input_size // self.patch
        return (g, g)

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EncoderSpec":
        return cls(**d)

    @property
    def fingerprint(self) -> str:
        """Stable digest identifying the embedding space of this spec."""
        d = self.to_json()
        if self.kind == "PatchMean":
            # depth/heads/seed do not affect PatchMean output
            d = {k: d[k] for k in ("kind", "input_size", "patch", "dim")}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Weight-size presets standing in for the tiny/small/base+/large checkpoints.
ENCODER_PRESETS = {
    "tiny": dict(kind="ToyViT", dim=16, depth=1, heads=2),
    "small": dict(kind="ToyViT", dim=32, depth=2, heads=4),
    "base_plus": dict(kind="ToyViT", dim=48, depth=3, heads=4),
    "large": dict(kind="ToyViT", dim=64, depth=4, heads=4),
}


@dataclass(frozen=True, eq=False)
class EmbeddingMap:
    """``tokens`` is ``(gh*gw, d)``, row-major over the token grid."""

    tokens: np.ndarray
    grid: tuple[int, int]
    source: tuple[str, int] = ("", -1)

    def __post_init__(self):
        tokens = np.ascontiguousarray(self.tokens, dtype=np.float64)
        gh, gw = self.grid
        if tokens.ndim != 2 or tokens.shape[0] != gh * gw or gh * gw == 0:
            raise ShapeMismatchError(f"tokens {tokens.shape} do not fit grid {self.grid}")
        if not np.isfinite(tokens).all():
            raise NonFiniteInputError("embedding has non-finite entries")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "grid", (int(gh), int(gw)))

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def flat(self) -> np.ndarray:
        return self.tokens.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMap):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.tokens, other.tokens)


def resize_slice(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Returns a float64 copy; an input already at the target size comes back
    unchanged.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ShapeMismatchError(f"expected a non-empty 2D grid, got shape {img.shape}")
    oh, ow = (size, size) if np.isscalar(size) else size
    if oh <= 0 or ow <= 0:
        raise ValueError("target size must be positive")
    h, w = img.shape
    if (h, w) == (oh, ow):
        return img.copy()
    y0, y1, wy = _bilinear_taps(h, oh)
    x0, x1, wx = _bilinear_taps(w, ow)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def _bilinear_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _patch_statistics(img: np.ndarray, p: int) -> np.ndarray:
    """``(gh*gw, 8)`` statistics: mean, std, 4 quadrant means, mean x/y gradient."""
    S = img.shape[0]
    g = S // p
    patches = img.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p, p)
    mean = patches.mean(axis=(1, 2))
    std = patches.std(axis=(1, 2))
    h = max(p // 2, 1)
    if p >= 2:
        quads = [
            patches[:, :h, :h].mean(axis=(1, 2)),
            patches[:, :h, h:].mean(axis=(1, 2)),
            patches[:, h:, :h].mean(axis=(1, 2)),
            patches[:, h:, h:].mean(axis=(1, 2)),
        ]
        gx = np.diff(patches, axis=2).mean(axis=(1, 2))
        gy = np.diff(patches, axis=1).mean(axis=(1, 2))
    else:
        quads = [mean] * 4
        gx = gy = np.zeros_like(mean)
    return np.stack([mean, std, *quads, gx, gy], axis=1)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Encoder:
    """Immutable encoder instance; build once per spec and share freely."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        if spec.kind == "ToyViT":
            self._init_vit()

    def _init_vit(self):
        s = self.spec
        d, p = s.dim, s.patch
        rng = stream("encoder.toyvit.embed", s.weight_seed)
        self.w_patch = truncated_normal(rng, (p * p, d))
        self.b_patch = np.zeros(d)
        self.pos = truncated_normal(rng, (s.tokens, d))
        self.blocks = []
        for layer in range(s.depth):
            rng = stream(f"encoder.toyvit.layer{layer}", s.weight_seed)
            self.blocks.append(
                {
                    "qkv": truncated_normal(rng, (d, 3 * d)),
                    "proj": truncated_normal(rng, (d, d)),
                    "fc1": truncated_normal(rng, (d, 4 * d)),
                    "fc2": truncated_normal(rng, (4 * d, d)),
                }
            )

    @cached_property
    def anchor(self) -> np.ndarray:
        return ANCHOR_SCALE * np.linspace(-1.0, 1.0, self.spec.dim)

    def prepare(self, slice2d: np.ndarray) -> np.ndarray:
        """Validate and resize a slice to the encoder's square input."""
        img = np.asarray(slice2d, dtype=np.float64)
        if img.ndim != 2 or img.size == 0:
            raise ShapeMismatchError(f"expected a non-empty 2D slice, got shape {img.shape}")
        if not np.isfinite(img).all():
            raise NonFiniteInputError("slice contains NaN or Inf")
        return resize_slice(img, self.spec.input_size)

    def encode(self, slice2d: np.ndarray, source: tuple[str, int] = ("", -1)) -> EmbeddingMap:
        img = self.prepare(slice2d)
        if self.spec.kind == "PatchMean":
            tokens = self._patch_mean(img)
        else:
            tokens = self._vit(img)
        return EmbeddingMap(tokens, self.spec.grid, source)

    def _patch_mean(self, img: np.ndarray) -> np.ndarray:
        stats = _patch_statistics(img, self.spec.patch)
        # d=32 repeats the 8 statistics four times; d<8 truncates
        tiled = np.tile(stats, (1, -(-self.spec.dim // N_STATS)))[:, : self.spec.dim]
        tiled = tiled + self.anchor
        centred = tiled - tiled.mean(axis=1, keepdims=True)
        scale = centred.std(axis=1, keepdims=True)
        return centred / np.where(scale > 0, scale, 1.0)

    def _vit(self, img: np.ndarray) -> np.ndarray:
        s = self.spec
        g, p, d, h = s.grid[0], s.patch, s.dim, s.heads
        patches = img.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p)
        x = patches @ self.w_patch + self.b_patch + self.pos
        hd = d // h
        for blk in self.blocks:
            qkv = _layer_norm(x) @ blk["qkv"]
            q, k, v = (qkv[:, i * d : (i + 1) * d].reshape(-1, h, hd).transpose(1, 0, 2) for i in range(3))
            att = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(hd))
            mixed = (att @ v).transpose(1, 0, 2).reshape(-1, d)
            x = x + mixed @ blk["proj"]
            hidden = np.maximum(_layer_norm(x) @ blk["fc1"], 0.0)
            x = x + hidden @ blk["fc2"]
        return _layer_norm(x)


_CACHE: dict[EncoderSpec, Encoder] = {}


def get_encoder(spec: EncoderSpec) -> Encoder:
    enc = _CACHE.get(spec)
    if enc is None:
        enc = _CACHE.setdefault(spec, Encoder(spec))
    return enc


def encode(spec: EncoderSpec, slice2d: np.ndarray, source: tuple[str, int] = ("", -1)) -> EmbeddingMap:
    """Encode one slice with the (cached) backend for ``spec``."""
    return get_encoder(spec).encode(slice2d, source)
