"""Single-head self/cross attention with value residuals, and memory attention.

Both attention forms add the value projection back onto the attended output::

    SA(v)      = softmax(Q K^T / sqrt(d)) V + V
    CA(v1, v2) = softmax(Q1 K2^T / sqrt(d)) V2 + R

where the cross-attention residual ``R`` is ``v1 Wv`` (``residual_mode="query"``)
or ``V2`` (``"memory"``, only defined when both sides have the same
token count).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EmbeddingMap
from .errors import NonFiniteInputError, ResidualModeInvalidError, ShapeMismatchError
from .memory import UnifiedMemory
from .rng import stream, truncated_normal


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    layers: int = 1
    seed: int = 0

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (d, d):
                raise ShapeMismatchError(f"{name} must be {d}x{d}, got {m.shape}")
            if not np.isfinite(m).all():
                raise NonFiniteInputError(f"{name} has non-finite entries")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def random(cls, dim: int, seed: int = 0, layers: int = 1, std: float = 0.02) -> "AttentionWeights":
        rng = stream("attention.qkv", seed)
        wq, wk, wv = (truncated_normal(rng, (dim, dim), std=std) for _ in range(3))
        return cls(wq, wk, wv, layers, seed)

    @classmethod
    def identity(cls, dim: int, gain: float = 1.0, layers: int = 1, seed: int = 0) -> "AttentionWeights":
        """Wq = gain·I, Wk = Wv = I: logits are scaled token dot products."""
        eye = np.eye(dim)
        return cls(gain * eye, eye.copy(), eye.copy(), layers, seed)

    @classmethod
    def create(cls, dim: int, init: str = "identity", gain: float = 1.0, layers: int = 1, seed: int = 0):
        if init == "identity":
            return cls.identity(dim, gain, layers, seed)
        if init == "random":
            return cls.random(dim, seed, layers)
        raise ValueError(f"unknown attention init {init!r}")


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    tokens: np.ndarray
    attn: np.ndarray | None


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check(x: np.ndarray, w: AttentionWeights, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.dim or x.shape[0] < 1:
        raise ShapeMismatchError(f"{name} must be (n>=1, {w.dim}), got {x.shape}")
    if not np.isfinite(x).all():
        raise NonFiniteInputError(f"{name} has non-finite entries")
    return x


def self_attention(v: np.ndarray, w: AttentionWeights) -> np.ndarray:
    v = _check(v, w, "v")
    q, k, val = v @ w.wq, v @ w.wk, v @ w.wv
    attn = softmax_rows(q @ k.T / np.sqrt(w.dim))
    return attn @ val + val


def cross_attention(
    v1: np.ndarray, v2: np.ndarray, w: AttentionWeights, residual_mode: str = "query"
) -> tuple[np.ndarray, np.ndarray]:
    """Attend from ``v1`` (queries) to ``v2`` (keys/values).

    Returns the output tokens and the pre-residual attention matrix.
    """
    v1 = _check(v1, w, "v1")
    v2 = _check(v2, w, "v2")
    q1, k2, val2 = v1 @ w.wq, v2 @ w.wk, v2 @ w.wv
    attn = softmax_rows(q1 @ k2.T / np.sqrt(w.dim))
    if residual_mode == "query":
        residual = v1 @ w.wv
    elif residual_mode == "memory":
        if v1.shape[0] != v2.shape[0]:
            raise ResidualModeInvalidError(
                f"memory-side residual needs equal token counts, got {v1.shape[0]} vs {v2.shape[0]}"
            )
        residual = val2
    else:
        raise ValueError(f"unknown residual_mode {residual_mode!r}")
    return attn @ val2 + residual, attn


def memory_attention(
    mem: UnifiedMemory,
    f: EmbeddingMap | np.ndarray,
    w: AttentionWeights,
    residual_mode: str = "query",
    ca_arg_order: str = "memory_kv",
) -> AttentionOutput:
    """Self-attend the test tokens, then cross-attend them against memory.

    ``ca_arg_order="memory_kv"`` keeps test tokens as queries for every one of
    ``w.layers`` cross-attention rounds, so the output has one token per test
    token. ``"memory_query"`` makes memory the query side instead (one round);
    its output has one token per memory token.
    """
    tokens = f.tokens if isinstance(f, EmbeddingMap) else f
    if not mem.blocks:
        raise ShapeMismatchError("memory is empty")
    memory = mem.tokens
    x = self_attention(tokens, w)
    if ca_arg_order == "memory_kv":
        attn = None
        for _ in range(w.layers):
            x, attn = cross_attention(x, memory, w, residual_mode)
        return AttentionOutput(x, attn)
    if ca_arg_order == "memory_query":
        out, attn = cross_attention(memory, x, w, residual_mode)
        return AttentionOutput(out, attn)
    raise ValueError(f"unknown ca_arg_order {ca_arg_order!r}")
