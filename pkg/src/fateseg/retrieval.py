"""Support library construction and top-j similarity retrieval."""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EmbeddingMap, EncoderSpec, get_encoder
from .errors import (
    EmptyLibraryError,
    EmptySupportSetError,
    FingerprintMismatchError,
    JTooLargeError,
    LengthMismatchError,
    LibraryFormatError,
    ZeroVectorError,
)
from .volume import LabelVolume, SliceAxis, Volume, check_pair, extract_slice

FEATURE_METRICS = ("CS", "MD", "ED", "PCC")
IMAGE_METRICS = ("MSE", "NCC")
METRICS = ("CS", "MSE", "NCC", "MD", "ED", "PCC")
LARGER_IS_BETTER = {"CS": True, "NCC": True, "PCC": True, "MSE": False, "MD": False, "ED": False}


@dataclass(frozen=True)
class SimilarityMetric:
    kind: str = "CS"

    def __post_init__(self):
        kind = str(self.kind).upper()
        if kind not in METRICS:
            raise ValueError(f"unknown metric {self.kind!r}; expected one of {METRICS}")
        object.__setattr__(self, "kind", kind)

    @property
    def level(self) -> str:
        return "image" if self.kind in IMAGE_METRICS else "feature"

    @property
    def larger_is_better(self) -> bool:
        return LARGER_IS_BETTER[self.kind]


def _as_metric(metric) -> SimilarityMetric:
    return metric if isinstance(metric, SimilarityMetric) else SimilarityMetric(metric)


def similarity(metric: SimilarityMetric | str, a, b) -> float:
    """Score two equal-length vectors.

    CS, NCC and PCC grow with similarity; MSE, MD and ED are distances.
    NCC of a constant vector is 0.0 (no correlation structure to match), while
    CS on a zero vector and PCC on a constant vector raise ``ZeroVectorError``.
    """
    kind = _as_metric(metric).kind
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatchError(f"lengths differ: {a.size} vs {b.size}")
    if kind == "CS":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ZeroVectorError("cosine similarity of a zero vector")
        return float(np.dot(a, b) / (na * nb))
    if kind == "MSE":
        return float(np.mean((a - b) ** 2))
    if kind == "MD":
        return float(np.sum(np.abs(a - b)))
    if kind == "ED":
        return float(np.linalg.norm(a - b))
    ca, cb = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(ca), np.linalg.norm(cb)
    if na == 0 or nb == 0:
        if kind == "PCC":
            raise ZeroVectorError("Pearson correlation of a constant vector")
        return 0.0
    return float(np.dot(ca, cb) / (na * nb))


def _row_dot(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    # elementwise product then a per-row reduction: identical rows always get
    # identical scores, which BLAS matrix-vector products do not guarantee
    return np.sum(rows * q, axis=1)


def score_matrix(metric: SimilarityMetric | str, query: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Vectorised :func:`similarity` of ``query`` against every row of ``rows``."""
    kind = _as_metric(metric).kind
    q = np.asarray(query, dtype=np.float64).ravel()
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != q.size:
        raise LengthMismatchError(f"query length {q.size} vs library rows {rows.shape}")
    if kind == "CS":
        nq = np.linalg.norm(q)
        nr = np.linalg.norm(rows, axis=1)
        if nq == 0 or (nr == 0).any():
            raise ZeroVectorError("cosine similarity of a zero vector")
        return _row_dot(rows, q) / (nr * nq)
    diff = rows - q
    if kind == "MSE":
        return np.mean(diff**2, axis=1)
    if kind == "MD":
        return np.sum(np.abs(diff), axis=1)
    if kind == "ED":
        return np.linalg.norm(diff, axis=1)
    cq = q - q.mean()
    cr = rows - rows.mean(axis=1, keepdims=True)
    nq = np.linalg.norm(cq)
    nr = np.linalg.norm(cr, axis=1)
    degenerate = (nr == 0) | (nq == 0)
    if kind == "PCC" and degenerate.any():
        raise ZeroVectorError("Pearson correlation of a constant vector")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _row_dot(cr, cq) / (nr * nq)
    return np.where(degenerate, 0.0, out)


@dataclass(frozen=True, eq=False)
class SupportEntry:
    """One support slice: embedding, per-object masks and provenance.

    ``image`` is the slice resized to the encoder input, used by image-level
    metrics. ``provenance`` is ``(volume index, slice index)``.
    """

    embedding: EmbeddingMap
    masks: dict[int, np.ndarray]
    provenance: tuple[int, int]
    image: np.ndarray

    @property
    def slice_dims(self) -> tuple[int, int]:
        return next(iter(self.masks.values())).shape if self.masks else (0, 0)


class SupportLibrary:
    """Immutable collection of support entries sharing one encoder spec."""

    def __init__(
        self,
        entries: Sequence[SupportEntry],
        encoder_spec: EncoderSpec,
        object_labels: Sequence[int],
        volume_ids: Sequence[str],
        axis: SliceAxis | str = SliceAxis.Z,
    ):
        self.entries = tuple(entries)
        self.encoder_spec = encoder_spec
        self.object_labels = tuple(sorted(int(l) for l in object_labels))
        self.volume_ids = tuple(volume_ids)
        self.axis = SliceAxis.parse(axis)
        fp = encoder_spec.fingerprint
        for e in self.entries:
            if e.embedding.grid != encoder_spec.grid or e.embedding.channels != encoder_spec.dim:
                raise FingerprintMismatchError(f"entry {e.provenance} does not match encoder {fp}")

    @property
    def fingerprint(self) -> str:
        return self.encoder_spec.fingerprint

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding.flat() for e in self.entries])

    @cached_property
    def image_matrix(self) -> np.ndarray:
        return np.stack([e.image.ravel() for e in self.entries])

    @cached_property
    def _tiebreak(self) -> tuple[np.ndarray, np.ndarray]:
        prov = np.array([e.provenance for e in self.entries], dtype=np.int64).reshape(-1, 2)
        return prov[:, 0], prov[:, 1]

    def select_volumes(self, keep: Sequence[int]) -> "SupportLibrary":
        """Library restricted to the given volume indices; provenance unchanged."""
        keep = set(int(k) for k in keep)
        return SupportLibrary(
            [e for e in self.entries if e.provenance[0] in keep],
            self.encoder_spec,
            self.object_labels,
            self.volume_ids,
            self.axis,
        )

    def scores(self, query, metric: SimilarityMetric | str, normalize: str = "raw") -> np.ndarray:
        metric = _as_metric(metric)
        if metric.level == "image":
            img = query if not isinstance(query, EmbeddingMap) else None
            if img is None:
                raise ValueError("image-level metrics need the raw query slice")
            vec = np.asarray(img, dtype=np.float64)
            rows = self.image_matrix
        else:
            if not isinstance(query, EmbeddingMap):
                raise ValueError("feature-level metrics need an EmbeddingMap query")
            if query.grid != self.encoder_spec.grid or query.channels != self.encoder_spec.dim:
                raise FingerprintMismatchError("query embedding shape does not match the library")
            vec = query.flat()
            rows = self.embedding_matrix
            if normalize == "l2":
                vec = vec / np.linalg.norm(vec)
                rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            elif normalize != "raw":
                raise ValueError(f"unknown embedding normalisation {normalize!r}")
        return score_matrix(metric, vec, rows)

    def rank(self, scores: np.ndarray, metric: SimilarityMetric | str) -> np.ndarray:
        """Entry indices, best first; ties by (volume index, slice index)."""
        metric = _as_metric(metric)
        key = -scores if metric.larger_is_better else scores
        vol, sl = self._tiebreak
        return np.lexsort((sl, vol, key))


def build_library(
    support: Sequence[tuple[Volume, LabelVolume]] | Sequence[tuple[str, Volume, LabelVolume]],
    spec: EncoderSpec,
    axis: SliceAxis | str = SliceAxis.Z,
    threads: int = 1,
) -> SupportLibrary:
    """Encode every slice of every support volume.

    ``support`` holds ``(image, labels)`` or ``(id, image, labels)`` tuples.
    Entries are ordered by (volume index, slice index) whatever ``threads`` is.
    """
    if not support:
        raise EmptySupportSetError("support set is empty")
    axis = SliceAxis.parse(axis)
    cases = []
    for k, item in enumerate(support):
        if len(item) == 3:
            vid, image, labels = item
        else:
            (image, labels), vid = item, f"vol{k:03d}"
        check_pair(image, labels)
        cases.append((str(vid), image, labels))
    object_labels = sorted(set().union(*(lab.label_set for _, _, lab in cases)))
    encoder = get_encoder(spec)

    def encode_case(k: int) -> list[SupportEntry]:
        vid, image, labels = cases[k]
        out = []
        for i in range(image.extent(axis)):
            plane = extract_slice(image, axis, i)
            lab = extract_slice(labels, axis, i)
            masks = {int(l): lab == l for l in object_labels}
            emb = encoder.encode(plane, source=(vid, i))
            out.append(SupportEntry(emb, masks, (k, i), encoder.prepare(plane)))
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_case = list(pool.map(encode_case, range(len(cases))))
    else:
        per_case = [encode_case(k) for k in range(len(cases))]
    entries = [e for chunk in per_case for e in chunk]
    return SupportLibrary(entries, spec, object_labels, [c[0] for c in cases], axis)


def retrieve_top_j(
    lib: SupportLibrary,
    query,
    j: int,
    metric: SimilarityMetric | str = "CS",
    normalize: str = "raw",
) -> list[SupportEntry]:
    """The ``j`` entries most similar to ``query``, best first."""
    return [lib.entries[k] for k, _ in retrieve_scored(lib, query, j, metric, normalize)]


def retrieve_scored(
    lib: SupportLibrary, query, j: int, metric: SimilarityMetric | str = "CS", normalize: str = "raw"
) -> list[tuple[int, float]]:
    """Like :func:`retrieve_top_j` but returns ``(entry index, score)`` pairs."""
    if len(lib) == 0:
        raise EmptyLibraryError("support library has no entries")
    if not 1 <= j <= len(lib):
        raise JTooLargeError(f"j={j} outside [1, {len(lib)}]")
    metric = _as_metric(metric)
    scores = lib.scores(query, metric, normalize)
    order = lib.rank(scores, metric)[:j]
    return [(int(k), float(scores[k])) for k in order]


# -- persistence ------------------------------------------------------------

MAGIC = b"FSLIB\x00\x01\x00"


def save_library(lib: SupportLibrary, path: str | os.PathLike) -> None:
    """Write the library as magic + JSON header + packed little-endian arrays."""
    header = {
        "count": len(lib),
        "fingerprint": lib.fingerprint,
        "encoder": lib.encoder_spec.to_json(),
        "object_labels": list(lib.object_labels),
        "volume_ids": list(lib.volume_ids),
        "axis": lib.axis.value,
        "grid": list(lib.encoder_spec.grid),
        "dim": lib.encoder_spec.dim,
        "image_size": lib.encoder_spec.input_size,
        "entries": [
            {"provenance": list(e.provenance), "source": list(e.embedding.source), "mask_dims": list(e.slice_dims)}
            for e in lib.entries
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for e in lib.entries:
            fh.write(e.embedding.tokens.astype("<f8").tobytes())
            fh.write(e.image.astype("<f8").tobytes())
            for label in lib.object_labels:
                fh.write(np.packbits(e.masks[label].ravel()).tobytes())


def load_library(path: str | os.PathLike) -> SupportLibrary:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise LibraryFormatError(f"{path}: not a support library file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except ValueError as exc:
        raise LibraryFormatError(f"{path}: corrupt header") from exc
    pos += hlen
    spec = EncoderSpec.from_json(header["encoder"])
    if spec.fingerprint != header["fingerprint"]:
        raise LibraryFormatError(f"{path}: fingerprint does not match encoder spec")
    gh, gw = header["grid"]
    d, S = header["dim"], header["image_size"]
    labels = header["object_labels"]
    entries = []

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise LibraryFormatError(f"{path}: truncated payload")
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    for meta in header["entries"]:
        tokens = np.frombuffer(take(gh * gw * d * 8), dtype="<f8").reshape(gh * gw, d)
        image = np.frombuffer(take(S * S * 8), dtype="<f8").reshape(S, S).copy()
        h, w = meta["mask_dims"]
        masks = {}
        for label in labels:
            nbytes = (h * w + 7) // 8
            bits = np.unpackbits(np.frombuffer(take(nbytes), dtype=np.uint8), count=h * w)
            masks[int(label)] = bits.reshape(h, w).astype(bool)
        source = (str(meta["source"][0]), int(meta["source"][1]))
        entries.append(SupportEntry(EmbeddingMap(tokens, (gh, gw), source), masks, tuple(meta["provenance"]), image))
    if pos != len(data):
        raise LibraryFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return SupportLibrary(entries, spec, labels, header["volume_ids"], header["axis"])
