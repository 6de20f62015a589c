"""Dice scoring, support/test splits and the ablation runner."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .encoder import ENCODER_PRESETS, EncoderSpec
from .errors import DimMismatchError, InvalidAxisValueError, TooFewVolumesError
from .pipeline import PipelineConfig, parse_initial, segment_volume
from .retrieval import METRICS, build_library
from .rng import stream
from .volume import LabelVolume, SliceAxis, Volume, extract_slice, stack_slices

STD_CONVENTION = "population std (ddof=0) across test volumes"
EMPTY_CONVENTION = "dice(empty, empty) = 1.0"


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|), or 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def split_support_test(
    volume_ids: Sequence[str], fraction: float = 0.1, seed: int = 0
) -> tuple[list[str], list[str]]:
    """Seeded shuffle, then the first ``round(fraction * N)`` ids (at least 1) are support."""
    ids = list(volume_ids)
    if len(ids) < 2:
        raise TooFewVolumesError(f"need at least 2 volumes, got {len(ids)}")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n_support = int(np.floor(fraction * len(ids) + 0.5))
    n_support = min(max(n_support, 1), len(ids) - 1)
    perm = stream("eval.split", seed).permutation(len(ids))
    shuffled = [ids[k] for k in perm]
    return shuffled[:n_support], shuffled[n_support:]


@dataclass
class DiceReport:
    """Volume-level Dice rows and their per-object mean ± std."""

    rows: list[tuple[str, int, float]] = field(default_factory=list)

    def add(self, volume_id: str, label: int, score: float) -> None:
        self.rows.append((volume_id, int(label), float(score)))

    @property
    def labels(self) -> list[int]:
        return sorted({label for _, label, _ in self.rows})

    @property
    def per_object(self) -> dict[int, tuple[float, float, int]]:
        out = {}
        for label in self.labels:
            scores = np.array([s for _, l, s in self.rows if l == label])
            out[label] = (float(scores.mean()), float(scores.std()), int(scores.size))
        return out

    @property
    def overall(self) -> float:
        per = self.per_object
        return float(np.mean([m for m, _, _ in per.values()])) if per else float("nan")

    def to_json(self) -> dict:
        return {
            "per_object": {str(k): {"mean": m, "std": s, "n_volumes": n} for k, (m, s, n) in self.per_object.items()},
            "overall_mean": self.overall,
            "volumes": [{"volume": v, "object_label": l, "dice": s} for v, l, s in self.rows],
            "std_convention": STD_CONVENTION,
            "empty_convention": EMPTY_CONVENTION,
        }


def evaluate_labels(
    pred: LabelVolume, truth: LabelVolume, labels: Iterable[int] | None = None
) -> dict[int, float]:
    if pred.dims != truth.dims:
        raise DimMismatchError(f"prediction dims {pred.dims} != ground truth dims {truth.dims}")
    wanted = sorted(set(truth.label_set) | set(pred.label_set)) if labels is None else list(labels)
    return {int(l): dice(pred.labels == l, truth.labels == l) for l in wanted}


def nearest_slice_transfer(
    test: Volume, support: Sequence[tuple[Volume, LabelVolume]], axis: SliceAxis | str = "Z"
) -> np.ndarray:
    """Brute-force baseline: copy the labels of the support slice with the smallest pixel MSE.

    Slices must share dimensions. Ties go to the earliest (volume, slice).
    """
    axis = SliceAxis.parse(axis)
    planes, labs = [], []
    for image, labels in support:
        for i in range(image.extent(axis)):
            planes.append(extract_slice(image, axis, i).astype(np.float64))
            labs.append(extract_slice(labels, axis, i))
    out = []
    for i in range(test.extent(axis)):
        q = extract_slice(test, axis, i).astype(np.float64)
        best, best_err = 0, np.inf
        for k, p in enumerate(planes):
            err = float(np.mean((p - q) ** 2))
            if err < best_err:
                best, best_err = k, err
        out.append(labs[best])
    return stack_slices(out, axis)


# -- ablations ----------------------------------------------------------------

AXES = ("support_size", "example_count", "metric", "initial_slice", "consistency", "encoder_size")


def _axis_name(axis: str) -> str:
    key = axis.strip().lower().replace("-", "_")
    aliases = {"supportsize": "support_size", "examplecount": "example_count", "j": "example_count",
               "initialslice": "initial_slice", "encodersize": "encoder_size", "volumetric_consistency": "consistency"}
    key = aliases.get(key.replace("_", ""), key) if key not in AXES else key
    if key not in AXES:
        raise InvalidAxisValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    return key


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise InvalidAxisValueError(f"not an on/off value: {value!r}")


def apply_axis(cfg: PipelineConfig, axis: str, value) -> tuple[PipelineConfig, int | None]:
    """Config for one grid point, plus the support-volume count for the support_size axis."""
    axis = _axis_name(axis)
    try:
        if axis == "support_size":
            n = int(value)
            if n < 1:
                raise InvalidAxisValueError("support size must be >= 1")
            return cfg, n
        if axis == "example_count":
            j = int(value)
            if j < 1:
                raise InvalidAxisValueError("example count must be >= 1")
            return cfg.replace(j=j), None
        if axis == "metric":
            m = str(value).upper()
            if m not in METRICS:
                raise InvalidAxisValueError(f"unknown metric {value!r}")
            return cfg.replace(metric=m), None
        if axis == "initial_slice":
            return cfg.replace(initial_slice=parse_initial(value)), None
        if axis == "consistency":
            return cfg.replace(volumetric_consistency=_parse_bool(value)), None
        preset = ENCODER_PRESETS.get(str(value).lower())
        if preset is None:
            raise InvalidAxisValueError(f"unknown encoder preset {value!r}; expected {sorted(ENCODER_PRESETS)}")
        fields = dict(cfg.encoder.to_json(), **preset)
        return cfg.replace(encoder=EncoderSpec(**fields)), None
    except InvalidAxisValueError:
        raise
    except (ValueError, TypeError) as exc:
        raise InvalidAxisValueError(f"bad value {value!r} for axis {axis}: {exc}") from exc


@dataclass
class AblationResult:
    axis: str
    values: list[str]
    reports: list[DiceReport]
    configs: list[dict]
    runtimes: list[float]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis_value", "object_label", "mean_dice", "std_dice", "n_volumes"])
        for value, rep in zip(self.values, self.reports):
            for label, (m, s, n) in rep.per_object.items():
                w.writerow([value, label, f"{m:.6f}", f"{s:.6f}", n])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "rows": [
                {"axis_value": v, "config": c, "report": r.to_json()}
                for v, c, r in zip(self.values, self.configs, self.reports)
            ],
        }


def run_ablation(
    axis: str,
    values: Sequence,
    base: PipelineConfig,
    support: Sequence[tuple[str, Volume, LabelVolume]],
    test: Sequence[tuple[str, Volume, LabelVolume]],
    threads: int = 1,
) -> AblationResult:
    """One DiceReport per grid value; everything but the ablated setting is held fixed."""
    axis = _axis_name(axis)
    if not values:
        raise InvalidAxisValueError("empty grid")
    points = [apply_axis(base, axis, v) for v in values]
    libraries: dict[tuple, Any] = {}
    reports, configs, runtimes = [], [], []
    for (cfg, n_support), value in zip(points, values):
        chosen = list(support) if n_support is None else list(support)[:n_support]
        if n_support is not None and n_support > len(support):
            raise InvalidAxisValueError(f"support size {n_support} exceeds {len(support)} available volumes")
        key = (cfg.encoder, len(chosen), SliceAxis.parse(cfg.axis))
        start = time.perf_counter()
        lib = libraries.get(key)
        if lib is None:
            lib = libraries[key] = build_library(chosen, cfg.encoder, cfg.axis, threads)
        report = DiceReport()
        for vid, image, truth in test:
            result = segment_volume(image, lib, cfg, threads=threads)
            for label in lib.object_labels:
                report.add(vid, label, dice(result.labels.labels == label, truth.labels == label))
        runtimes.append(time.perf_counter() - start)
        reports.append(report)
        configs.append(cfg.to_flat())
    return AblationResult(axis, [str(v) for v in values], reports, configs, runtimes)
