import numpy as np
import pytest

from fateseg.encoder import EncoderSpec
from fateseg.errors import ConfigError, FingerprintMismatchError, IndexOutOfRangeError, LabelUnknownError
from fateseg.evaluation import dice
from fateseg.pipeline import (
    PipelineConfig,
    initial_slice_index,
    merge_objects,
    segment_object,
    segment_volume,
)
from fateseg.retrieval import build_library
from fateseg.volume import LabelVolume, Volume


@pytest.mark.parametrize(
    "strategy,n,expected",
    [
        ("q3", 100, 75), ("q1", 100, 25), ("center", 100, 50), ("first", 100, 0), ("last", 100, 99),
        ("center", 7, 3), ("q1", 7, 1), ("q3", 7, 5), ("last", 7, 6),
        ("first", 1, 0), ("q1", 1, 0), ("center", 1, 0), ("q3", 1, 0), ("last", 1, 0),
        ("index:4", 7, 4), (2, 7, 2), ("Q3", 7, 5),
    ],
)
def test_initial_slice_index(strategy, n, expected):
    assert initial_slice_index(strategy, n) == expected


def test_initial_slice_errors():
    with pytest.raises(IndexOutOfRangeError):
        initial_slice_index("index:7", 7)
    with pytest.raises(ConfigError):
        initial_slice_index("middle", 7)


def test_config_validation_and_flat_round_trip():
    with pytest.raises(ConfigError):
        PipelineConfig(j=0)
    with pytest.raises(ConfigError):
        PipelineConfig(residual_mode="sideways")
    with pytest.raises(ConfigError):
        PipelineConfig.from_flat({"no_such_key": 1})
    cfg = PipelineConfig(j=4, metric="PCC", encoder=EncoderSpec(kind="ToyViT"))
    assert PipelineConfig.from_flat(cfg.to_flat()) == cfg


def test_trace_covers_every_slice_once(small_cases, small_library, small_config):
    _, image, _ = small_cases[0]
    result = segment_volume(image, small_library, small_config)
    n = image.extent("Z")
    assert result.trace["n_slices"] == n
    i0 = result.trace["initial_slice"]
    assert i0 == n // 2
    for label in small_library.object_labels:
        rows = result.trace["objects"][str(label)]
        assert sorted(r["slice"] for r in rows) == list(range(n))
        by_slice = {r["slice"]: r for r in rows}
        assert by_slice[i0]["direction"] == "initial" and by_slice[i0]["volumetric_memory"] == "absent"
        for i in range(n):
            if i == i0:
                continue
            row = by_slice[i]
            assert row["direction"] == ("forward" if i > i0 else "backward")
            assert row["volumetric_sources"] == [i - 1 if i > i0 else i + 1]
            assert len(row["retrieved"]) == small_config.j


def test_leak_segmentation_is_exact(small_cases, small_library, small_config):
    vid, image, truth = small_cases[2]
    result = segment_volume(image, small_library, small_config.replace(j=1))
    for label in small_library.object_labels:
        assert dice(result.labels.labels == label, truth.labels == label) == 1.0
    for label, rows in result.trace["objects"].items():
        assert all(r["retrieved"][0][:2] == [vid, r["slice"]] for r in rows)


def test_consistency_off_is_order_independent(small_cases, small_library, small_config):
    _, image, _ = small_cases[0]
    cfg = small_config.replace(volumetric_consistency=False)
    base, trace = segment_object(image, small_library, 4, cfg)
    order = np.random.default_rng(0).permutation(image.extent("Z"))
    shuffled, trace2 = segment_object(image, small_library, 4, cfg, order=order)
    for a, b in zip(base, shuffled):
        assert a.logits.tobytes() == b.logits.tobytes()
    assert all(r["volumetric_memory"] == "absent" for r in trace)
    assert [r["slice"] for r in trace] == [r["slice"] for r in trace2]
    with pytest.raises(ValueError):
        segment_object(image, small_library, 4, small_config, order=order)


def test_forward_sweep_ignores_backward_sweep(small_cases, small_library, small_config):
    _, image, _ = small_cases[1]
    k = 11
    full, _ = segment_object(image, small_library, 1, small_config.replace(initial_slice=k))
    cropped = Volume(image.data[k:], image.spacing)
    part, _ = segment_object(cropped, small_library, 1, small_config.replace(initial_slice="first"))
    for i, m in enumerate(part):
        assert m.logits.tobytes() == full[k + i].logits.tobytes()


def test_shared_embeddings_match_per_object_runs(small_cases, small_library, small_config):
    _, image, _ = small_cases[0]
    result = segment_volume(image, small_library, small_config)
    for label in small_library.object_labels:
        masks, _ = segment_object(image, small_library, label, small_config)
        alone = np.stack([m.logits for m in masks]).astype(np.float32)
        assert alone.tobytes() == result.per_object_logits[label].tobytes()


def test_thread_count_does_not_change_result(small_cases, small_library, small_config):
    _, image, _ = small_cases[0]
    a = segment_volume(image, small_library, small_config, threads=1)
    b = segment_volume(image, small_library, small_config, threads=4)
    assert a.labels.labels.tobytes() == b.labels.labels.tobytes()
    assert a.trace == b.trace


def test_single_slice_volume():
    rng = np.random.default_rng(0)
    img = Volume(rng.random((1, 16, 16)).astype(np.float32))
    lab = np.zeros((1, 16, 16), int)
    lab[0, 4:10, 4:12] = 3
    spec = EncoderSpec(input_size=16, patch=4, dim=8)
    lib = build_library([(img, LabelVolume(lab))], spec)
    cfg = PipelineConfig(j=1, encoder=spec)
    masks, trace = segment_object(img, lib, 3, cfg)
    assert len(masks) == 1 and trace[0]["direction"] == "initial"
    assert np.array_equal(masks[0].binary, lab[0] == 3)


def test_single_object_library_labels(small_cases, small_encoder, small_config):
    only = [(vid, img, LabelVolume(np.where(lab.labels == 2, 2, 0))) for vid, img, lab in small_cases]
    lib = build_library(only, small_encoder)
    result = segment_volume(small_cases[0][1], lib, small_config)
    assert set(np.unique(result.labels.labels)) <= {0, 2}
    masks, _ = segment_object(small_cases[0][1], lib, 2, small_config)
    assert np.array_equal(result.labels.labels == 2, np.stack([m.binary for m in masks]))


def test_merge_rule():
    a = np.array([[[0.3, 0.5, -0.2, 0.4]]])
    b = np.array([[[0.8, -0.1, -0.5, 0.4]]])
    merged = merge_objects({1: a, 2: b}, 0.0)
    assert merged.tolist() == [[[2, 1, 0, 1]]]


def test_merge_disjoint_is_union():
    a = np.where(np.arange(8) < 4, 1.0, -1.0).reshape(1, 1, 8)
    b = -a
    assert merge_objects({5: a, 9: b}, 0.0).ravel().tolist() == [5] * 4 + [9] * 4


def test_errors(small_cases, small_library, small_config):
    _, image, _ = small_cases[0]
    with pytest.raises(LabelUnknownError):
        segment_object(image, small_library, 42, small_config)
    with pytest.raises(FingerprintMismatchError):
        segment_volume(image, small_library, small_config.replace(encoder=EncoderSpec()))


def test_materialized_zero_block_and_window(small_cases, small_library, small_config):
    _, image, truth = small_cases[0]
    for cfg in (small_config.replace(zero_block_mode="materialize"), small_config.replace(volumetric_window=2)):
        result = segment_volume(image, small_library, cfg)
        assert result.labels.dims == image.dims
    rows = segment_volume(image, small_library, small_config.replace(volumetric_window=2)).trace["objects"]["1"]
    i0 = image.extent("Z") // 2
    assert {r["slice"]: r for r in rows}[i0 + 2]["volumetric_sources"] == [i0 + 1, i0]


def test_other_metrics_and_decoders_run(small_cases, small_library, small_config):
    _, image, _ = small_cases[0]
    for cfg in (
        small_config.replace(metric="MSE"),
        small_config.replace(metric="NCC", embedding_norm="l2"),
        small_config.replace(attention_init="random", residual_mode="query"),
        small_config.replace(decoder=small_config.decoder.__class__(kind="LinearSeeded", patch=4)),
        small_config.replace(decoder=small_config.decoder.__class__(transfer="token", patch=4)),
    ):
        result = segment_volume(image, small_library, cfg)
        assert result.labels.dims == image.dims
        assert all(np.isfinite(v).all() for v in result.per_object_logits.values())
