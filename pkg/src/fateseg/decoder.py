"""Mask decoders turning memory-guided tokens into a slice mask."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionOutput
from .encoder import resize_slice
from .errors import MissingAttnError, ShapeMismatchError
from .memory import UnifiedMemory
from .rng import stream, truncated_normal


@dataclass(frozen=True)
class DecoderSpec:
    """``kind`` is "AttentionLabelTransfer" or "LinearSeeded".

    For label transfer, ``transfer="patch"`` carries each attended memory
    token's mask pixels (at the matching offset inside its cell) to the test
    pixel, and ``"token"`` carries the token occupancy then upsamples.
    """

    kind: str = "AttentionLabelTransfer"
    threshold: float = 0.0
    seed: int = 0
    transfer: str = "patch"
    patch: int = 8

    def __post_init__(self):
        if self.kind not in ("AttentionLabelTransfer", "LinearSeeded"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.transfer not in ("patch", "token"):
            raise ValueError(f"unknown transfer mode {self.transfer!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SliceMask:
    logits: np.ndarray
    binary: np.ndarray


def decode(
    spec: DecoderSpec,
    out: AttentionOutput,
    mem: UnifiedMemory,
    target_dims: tuple[int, int],
) -> SliceMask:
    if not mem.blocks:
        raise ShapeMismatchError("memory is empty")
    grid = mem.blocks[0].grid
    h, w = (int(n) for n in target_dims)
    gh, gw = grid
    if h < gh or w < gw:
        raise ShapeMismatchError(f"target {target_dims} smaller than token grid {grid}")
    if out.tokens.shape[0] != gh * gw:
        raise ShapeMismatchError(f"decoder expects {gh * gw} test tokens, got {out.tokens.shape[0]}")
    if spec.kind == "LinearSeeded":
        logits = _linear(spec, out.tokens, grid, (h, w))
    else:
        if out.attn is None:
            raise MissingAttnError("label transfer needs the cross-attention matrix")
        if out.attn.shape != (gh * gw, mem.total_tokens):
            raise ShapeMismatchError(f"attn {out.attn.shape} vs {gh * gw} x {mem.total_tokens}")
        if spec.transfer == "token":
            token_logits = out.attn @ (2.0 * mem.mask_values - 1.0)
            logits = resize_slice(token_logits.reshape(gh, gw), (h, w))
        else:
            logits = _patch_transfer(out.attn, mem, (h, w))
    return SliceMask(logits, logits > spec.threshold)


def _linear(spec: DecoderSpec, tokens: np.ndarray, grid, target) -> np.ndarray:
    gh, gw = grid
    p, d = spec.patch, tokens.shape[1]
    weight = truncated_normal(stream("decoder.linear", spec.seed), (d, p * p))
    per_token = (tokens @ weight).reshape(gh, gw, p, p)
    full = per_token.transpose(0, 2, 1, 3).reshape(gh * p, gw * p)
    return resize_slice(full, target)


def _cell_offsets(n_target: int, g: int, n_source: int) -> np.ndarray:
    """``(g, n_target)`` source rows: cell ``k`` sampled at each target pixel's in-cell offset."""
    y = np.arange(n_target)
    cell = (y * g) // n_target
    within = y * g - cell * n_target  # offset inside the cell, in units of 1/(g * n_target)
    k = np.arange(g)[:, None]
    return ((k * n_target + within[None, :]) * n_source) // (g * n_target)


def _patch_transfer(attn: np.ndarray, mem: UnifiedMemory, target) -> np.ndarray:
    h, w = target
    gh, gw = mem.blocks[0].grid
    signs = []
    for block in mem.blocks:
        if block.mask is None:
            cellwise = np.repeat(block.mask_values[:, None], h * w, axis=1)
            signs.append(2.0 * cellwise - 1.0)
            continue
        H, W = block.mask.shape
        sy = _cell_offsets(h, gh, H)
        sx = _cell_offsets(w, gw, W)
        vals = block.mask[sy[:, None, :, None], sx[None, :, None, :]]  # (gh, gw, h, w)
        signs.append(np.where(vals, 1.0, -1.0).reshape(gh * gw, h * w))
    sign = np.concatenate(signs, axis=0)  # (K, h*w)
    rows = ((np.arange(h) * gh) // h)[:, None] * gw + ((np.arange(w) * gw) // w)[None, :]
    per_pixel = attn[rows.ravel()]  # (h*w, K)
    return np.einsum("pk,kp->p", per_pixel, sign).reshape(h, w)
