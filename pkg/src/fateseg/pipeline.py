"""End-to-end few-shot volume segmentation.

For every object the engine starts at one slice, segments it from retrieved
support examples alone, then sweeps forward and backward. Each later slice
also sees the adjacent slice's own prediction as volumetric memory.
Test-slice embeddings and retrievals are computed once and shared by all
objects; memory encoding, attention and decoding run per object.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .attention import AttentionWeights, memory_attention
from .decoder import DecoderSpec, SliceMask, decode
from .encoder import EmbeddingMap, EncoderSpec, get_encoder
from .errors import ConfigError, EmptyLibraryError, FingerprintMismatchError, IndexOutOfRangeError, LabelUnknownError
from .memory import ANATOMICAL, VOLUMETRIC, MemoryEmbedding, MemoryEncoder, fuse_memories
from .retrieval import SimilarityMetric, SupportLibrary, retrieve_scored
from .volume import LabelVolume, SliceAxis, Volume, extract_slice, stack_slices

INITIAL_STRATEGIES = ("first", "q1", "center", "q3", "last")


def parse_initial(strategy: str | int) -> str | int:
    """Normalise "Center", "Q1", "index:5" or 5 into a strategy name or an index."""
    if isinstance(strategy, (int, np.integer)) and not isinstance(strategy, bool):
        return int(strategy)
    s = str(strategy).strip().lower()
    if s in INITIAL_STRATEGIES:
        return s
    if s.startswith("index:") or s.startswith("index(") or s.isdigit():
        digits = s.removeprefix("index:").removeprefix("index(").rstrip(")")
        try:
            return int(digits)
        except ValueError:
            pass
    raise ConfigError(f"unknown initial slice strategy {strategy!r}")


def initial_slice_index(strategy: str | int, n: int) -> int:
    """First -> 0, Q1 -> floor(n/4), Center -> floor(n/2), Q3 -> floor(3n/4), Last -> n-1."""
    if n < 1:
        raise IndexOutOfRangeError("volume has no slices")
    s = parse_initial(strategy)
    if isinstance(s, int):
        if not 0 <= s < n:
            raise IndexOutOfRangeError(f"initial slice {s} outside [0, {n})")
        return s
    return {"first": 0, "q1": n // 4, "center": n // 2, "q3": (3 * n) // 4, "last": n - 1}[s]


@dataclass(frozen=True)
class PipelineConfig:
    j: int = 3
    metric: str = "CS"
    embedding_norm: str = "raw"
    initial_slice: str | int = "center"
    volumetric_consistency: bool = True
    volumetric_window: int = 1
    zero_block_mode: str = "omit"
    axis: str = "Z"
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    attention_init: str = "identity"
    attention_gain: float = 1e4
    attention_layers: int = 1
    attention_seed: int = 0
    residual_mode: str = "query"
    ca_arg_order: str = "memory_kv"
    memory_seed: int = 0
    memory_random_bias: bool = False
    memory_weight_std: float = 1e-3
    merge_rule: str = "max_logit"

    def __post_init__(self):
        if self.j < 1:
            raise ConfigError("j must be >= 1")
        if self.volumetric_window < 1:
            raise ConfigError("volumetric_window must be >= 1")
        try:
            SimilarityMetric(self.metric)
            SliceAxis.parse(self.axis)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        parse_initial(self.initial_slice)
        checks = {
            "embedding_norm": ("raw", "l2"),
            "zero_block_mode": ("omit", "materialize"),
            "attention_init": ("identity", "random"),
            "residual_mode": ("query", "memory"),
            "ca_arg_order": ("memory_kv", "memory_query"),
            "merge_rule": ("max_logit",),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    # flat JSON form: nested specs become encoder_* / decoder_* keys
    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in ("encoder", "decoder"):
                for k, v in dataclasses.asdict(value).items():
                    out[f"{f.name}_{k}"] = v
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "PipelineConfig":
        if not isinstance(flat, dict):
            raise ConfigError("config must be a JSON object")
        top, enc, dec = {}, {}, {}
        enc_fields = {f.name for f in dataclasses.fields(EncoderSpec)}
        dec_fields = {f.name for f in dataclasses.fields(DecoderSpec)}
        own = {f.name for f in dataclasses.fields(cls)} - {"encoder", "decoder"}
        for key, value in flat.items():
            if key.startswith("encoder_") and key[8:] in enc_fields:
                enc[key[8:]] = value
            elif key.startswith("decoder_") and key[8:] in dec_fields:
                dec[key[8:]] = value
            elif key in own:
                top[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            encoder = EncoderSpec(**enc)
            dec.setdefault("patch", encoder.patch)
            return cls(encoder=encoder, decoder=DecoderSpec(**dec), **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class SegmentationResult:
    labels: LabelVolume
    per_object_logits: dict[int, np.ndarray]
    trace: dict[str, Any]


class _SharedContext:
    """Test-slice embeddings and retrievals, computed once per volume."""

    def __init__(self, test: Volume, lib: SupportLibrary, cfg: PipelineConfig):
        if cfg.encoder.fingerprint != lib.fingerprint:
            raise FingerprintMismatchError(
                f"config encoder {cfg.encoder.fingerprint} != library {lib.fingerprint}"
            )
        self.lib = lib
        self.cfg = cfg
        self.axis = SliceAxis.parse(cfg.axis)
        self.n = test.extent(self.axis)
        encoder = get_encoder(lib.encoder_spec)
        self.slices = [extract_slice(test, self.axis, i) for i in range(self.n)]
        self.embeddings = [encoder.encode(s, source=("test", i)) for i, s in enumerate(self.slices)]
        metric = SimilarityMetric(cfg.metric)
        self.retrievals = []
        for i in range(self.n):
            query = encoder.prepare(self.slices[i]) if metric.level == "image" else self.embeddings[i]
            self.retrievals.append(retrieve_scored(lib, query, cfg.j, metric, cfg.embedding_norm))
        self.memory_encoder = MemoryEncoder(
            cfg.encoder.dim, cfg.memory_seed, cfg.memory_random_bias, cfg.memory_weight_std
        )
        self.weights = AttentionWeights.create(
            cfg.encoder.dim, cfg.attention_init, cfg.attention_gain, cfg.attention_layers, cfg.attention_seed
        )


class _ObjectRun:
    def __init__(self, ctx: _SharedContext, label: int):
        self.ctx = ctx
        self.label = label
        self._anatomical: dict[int, MemoryEmbedding] = {}

    def anatomical(self, k: int) -> MemoryEmbedding:
        mem = self._anatomical.get(k)
        if mem is None:
            entry = self.ctx.lib.entries[k]
            mem = self.ctx.memory_encoder.encode(
                entry.masks[self.label], entry.embedding, ANATOMICAL, provenance=entry.provenance
            )
            self._anatomical[k] = mem
        return mem

    def predict(self, i: int, previous: Sequence[tuple[EmbeddingMap, np.ndarray, int]]) -> SliceMask:
        ctx, cfg = self.ctx, self.ctx.cfg
        anatomical = [self.anatomical(k) for k, _ in ctx.retrievals[i]]
        volumetric = [
            ctx.memory_encoder.encode(mask, emb, VOLUMETRIC, provenance=("test", src))
            for emb, mask, src in previous
        ]
        mem = fuse_memories(anatomical, volumetric or None, cfg.zero_block_mode)
        out = memory_attention(mem, ctx.embeddings[i], ctx.weights, cfg.residual_mode, cfg.ca_arg_order)
        return decode(cfg.decoder, out, mem, ctx.slices[i].shape)


def _trace_row(ctx: _SharedContext, i: int, direction: str, step: int, sources: list[int]) -> dict:
    return {
        "slice": i,
        "direction": direction,
        "step": step,
        "retrieved": [
            [ctx.lib.volume_ids[ctx.lib.entries[k].provenance[0]], ctx.lib.entries[k].provenance[1], score]
            for k, score in ctx.retrievals[i]
        ],
        "volumetric_memory": "present" if sources else "absent",
        "volumetric_sources": sources,
    }


def _run_object(ctx: _SharedContext, label: int, order: Sequence[int] | None = None):
    cfg, n = ctx.cfg, ctx.n
    run = _ObjectRun(ctx, label)
    masks: list[SliceMask | None] = [None] * n
    trace: list[dict] = []

    if not cfg.volumetric_consistency:
        schedule = list(range(n)) if order is None else [int(i) for i in order]
        if sorted(schedule) != list(range(n)):
            raise ValueError("order must be a permutation of the slice indices")
        for step, i in enumerate(schedule):
            masks[i] = run.predict(i, [])
            trace.append(_trace_row(ctx, i, "independent", step, []))
        trace.sort(key=lambda r: r["slice"])
        return masks, trace
    if order is not None:
        raise ValueError("a custom order is only allowed with volumetric consistency off")

    i0 = initial_slice_index(cfg.initial_slice, n)
    masks[i0] = run.predict(i0, [])
    trace.append(_trace_row(ctx, i0, "initial", 0, []))
    for direction, sweep in (("forward", range(i0 + 1, n)), ("backward", range(i0 - 1, -1, -1))):
        prev = [i0]  # nearest first
        for step, i in enumerate(sweep, start=1):
            window = prev[: cfg.volumetric_window]
            previous = [(ctx.embeddings[s], masks[s].binary, s) for s in window]
            masks[i] = run.predict(i, previous)
            trace.append(_trace_row(ctx, i, direction, step, window))
            prev.insert(0, i)
    trace.sort(key=lambda r: r["slice"])
    return masks, trace


def segment_object(
    test: Volume,
    lib: SupportLibrary,
    label: int,
    cfg: PipelineConfig,
    order: Sequence[int] | None = None,
    context: _SharedContext | None = None,
) -> tuple[list[SliceMask], list[dict]]:
    """Per-slice masks for one object plus the per-slice trace.

    ``order`` reorders slice processing and is only accepted when volumetric
    consistency is off (slices are then independent).
    """
    if int(label) not in lib.object_labels:
        raise LabelUnknownError(f"label {label} not in library labels {lib.object_labels}")
    ctx = context or _SharedContext(test, lib, cfg)
    return _run_object(ctx, int(label), order)


def merge_objects(logits: dict[int, np.ndarray], threshold: float) -> np.ndarray:
    """Per voxel, the positive object with the highest logit; 0 where none is positive.

    Equal logits go to the smaller label.
    """
    labels = sorted(logits)
    if not labels:
        raise ValueError("nothing to merge")
    stack = np.stack([logits[l] for l in labels])
    positive = stack > threshold
    best = np.argmax(np.where(positive, stack, -np.inf), axis=0)
    out = np.asarray(labels, dtype=np.uint16)[best]
    out[~positive.any(axis=0)] = 0
    return out


def segment_volume(
    test: Volume,
    lib: SupportLibrary,
    cfg: PipelineConfig,
    threads: int = 1,
    labels: Sequence[int] | None = None,
) -> SegmentationResult:
    """Segment every library object (or ``labels``) in ``test`` and merge."""
    if len(lib) == 0:
        raise EmptyLibraryError("support library has no entries")
    ctx = _SharedContext(test, lib, cfg)
    wanted = list(lib.object_labels if labels is None else labels)
    for label in wanted:
        if int(label) not in lib.object_labels:
            raise LabelUnknownError(f"label {label} not in library labels {lib.object_labels}")

    def one(label):
        return _run_object(ctx, int(label))

    if threads > 1 and len(wanted) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(one, wanted))
    else:
        runs = [one(label) for label in wanted]

    per_object = {}
    trace_objects = {}
    for label, (masks, rows) in zip(wanted, runs):
        per_object[int(label)] = stack_slices([m.logits for m in masks], ctx.axis)
        trace_objects[str(label)] = rows
    if per_object:
        merged = merge_objects(per_object, cfg.decoder.threshold)
    else:
        merged = np.zeros(test.data.shape, dtype=np.uint16)
    trace = {
        "axis": ctx.axis.value,
        "n_slices": ctx.n,
        "initial_slice": initial_slice_index(cfg.initial_slice, ctx.n) if cfg.volumetric_consistency else None,
        "merge_rule": cfg.merge_rule,
        "objects": trace_objects,
    }
    return SegmentationResult(
        LabelVolume(merged, test.spacing),
        {k: v.astype(np.float32) for k, v in per_object.items()},
        trace,
    )
