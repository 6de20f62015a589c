"""Command-line interface.

Exit codes: 0 ok, 2 bad input, 3 encoder fingerprint mismatch, 4 config
parse failure, 5 evaluation dimension mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Sequence


from . import __version__
from .encoder import ENCODER_PRESETS, EncoderSpec
from .errors import (
    ConfigError,
    DimMismatchError,
    FateSegError,
    FingerprintMismatchError,
    InvalidAxisValueError,
)
from .evaluation import DiceReport, evaluate_labels, run_ablation, split_support_test
from .phantom import PhantomSpec, default_spec, make_dataset
from .pipeline import PipelineConfig, segment_volume
from .retrieval import build_library, load_library, save_library
from .volume import LabelVolume, Volume, check_pair, load_volume, save_volume

EXIT_OK, EXIT_INPUT, EXIT_FINGERPRINT, EXIT_CONFIG, EXIT_EVAL = 0, 2, 3, 4, 5
MANIFEST_SCHEMA = "fateseg.manifest/1"
IMG_SUFFIX, LAB_SUFFIX = ".img.json", ".lab.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _file_digests(header: Path) -> dict[str, str]:
    """Digest a file; for RVOL headers also digest the raw payload."""
    header = Path(header)
    out = {str(header): _sha256(header)}
    if header.name.endswith(".json"):
        raw = header.with_name(header.name[: -len(".json")] + ".raw")
        if raw.exists():
            out[str(raw)] = _sha256(raw)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _strip_threads(argv: Sequence[str]) -> list[str]:
    """Drop --threads from a recorded command line; results never depend on it."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
        elif tok == "--threads":
            skip = True
        elif not tok.startswith("--threads="):
            out.append(tok)
    return out


def _write_manifest(path: Path, command: str, argv: Sequence[str], config, inputs, outputs, seeds=None):
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "engine_version": __version__,
        "command": command,
        "argv": _strip_threads(argv),
        "config": config,
        "seeds": seeds or {},
        "inputs": inputs,
        "outputs": {Path(k).name: v for name in outputs for k, v in _file_digests(name).items()},
    }
    _write_json(path, manifest)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("FATESEG_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise CliError(EXIT_INPUT, f"FATESEG_THREADS must be an integer, got {env!r}")


def _load_json_arg(value: str, what: str) -> dict:
    """``value`` is a JSON file path or an inline JSON object."""
    text = value
    if not value.lstrip().startswith("{"):
        p = Path(value)
        if not p.is_file():
            raise CliError(EXIT_CONFIG, f"{what} file not found: {value}")
        text = p.read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"cannot parse {what}: {exc}")
    if not isinstance(obj, dict):
        raise CliError(EXIT_CONFIG, f"{what} must be a JSON object")
    return obj


def _encoder_from_arg(value: str | None) -> EncoderSpec:
    if value is None or value == "default":
        return EncoderSpec()
    if value in ENCODER_PRESETS:
        return EncoderSpec(**ENCODER_PRESETS[value])
    d = _load_json_arg(value, "encoder spec")
    try:
        return EncoderSpec(**d)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad encoder spec: {exc}")


def _config_from_arg(value: str | None, lib_encoder: EncoderSpec | None = None) -> PipelineConfig:
    flat = {} if value is None else _load_json_arg(value, "config")
    if lib_encoder is not None and not any(k.startswith("encoder_") for k in flat):
        flat = {**{f"encoder_{k}": v for k, v in lib_encoder.to_json().items()}, **flat}
    try:
        return PipelineConfig.from_flat(flat)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"bad config: {exc}")


def _scan_pairs(directory: Path) -> list[tuple[str, Path, Path]]:
    if not directory.is_dir():
        raise CliError(EXIT_INPUT, f"not a directory: {directory}")
    images = {p.name[: -len(IMG_SUFFIX)]: p for p in directory.glob("*" + IMG_SUFFIX)}
    labels = {p.name[: -len(LAB_SUFFIX)]: p for p in directory.glob("*" + LAB_SUFFIX)}
    problems = [f"orphan image without labels: {images[k]}" for k in sorted(images.keys() - labels.keys())]
    problems += [f"orphan labels without image: {labels[k]}" for k in sorted(labels.keys() - images.keys())]
    if problems:
        raise CliError(EXIT_INPUT, "\n".join(problems))
    if not images:
        raise CliError(EXIT_INPUT, f"no {IMG_SUFFIX}/{LAB_SUFFIX} pairs in {directory}")
    return [(k, images[k], labels[k]) for k in sorted(images)]


def _load_pairs(directory: Path) -> list[tuple[str, Volume, LabelVolume]]:
    cases, problems = [], []
    for vid, img_path, lab_path in _scan_pairs(directory):
        try:
            image, labels = load_volume(img_path), load_volume(lab_path)
            if not isinstance(image, Volume):
                raise FateSegError(f"{img_path}: expected an f32 image volume")
            if not isinstance(labels, LabelVolume):
                raise FateSegError(f"{lab_path}: expected a u8/u16 label volume")
            check_pair(image, labels)
            cases.append((vid, image, labels))
        except FateSegError as exc:
            problems.append(f"{vid}: {type(exc).__name__}: {exc}")
    if problems:
        raise CliError(EXIT_INPUT, "\n".join(problems))
    return cases


def _pair_digests(directory: Path) -> dict[str, str]:
    out = {}
    for _, img, lab in _scan_pairs(directory):
        out.update(_file_digests(img))
        out.update(_file_digests(lab))
    return out


# -- commands -------------------------------------------------------------------


def cmd_phantom(args, argv) -> int:
    if args.spec in (None, "default"):
        spec = default_spec(noise_sigma=args.noise if args.noise is not None else 0.02)
    else:
        try:
            spec = PhantomSpec.from_json(_load_json_arg(args.spec, "phantom spec"))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(EXIT_INPUT, f"bad phantom spec: {exc}")
        if args.noise is not None:
            spec = PhantomSpec.from_json({**spec.to_json(), "noise_sigma": args.noise})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        cases = make_dataset(spec, args.n, args.seed)
    except FateSegError as exc:
        raise CliError(EXIT_INPUT, f"{type(exc).__name__}: {exc}")
    for vid, image, labels in cases:
        for suffix, vol in ((IMG_SUFFIX, image), (LAB_SUFFIX, labels)):
            path = out / f"{vid}{suffix}"
            save_volume(vol, path)
            written.append(path)
    spec_path = out / "phantom_spec.json"
    _write_json(spec_path, spec.to_json())
    written.append(spec_path)
    _write_manifest(out / "manifest.json", "phantom", argv, spec.to_json(), {}, written, {"seed": args.seed})
    print(f"wrote {len(cases)} phantom pairs to {out}")
    return EXIT_OK


def cmd_build_library(args, argv) -> int:
    support = Path(args.support)
    spec = _encoder_from_arg(args.encoder)
    cases = _load_pairs(support)
    try:
        lib = build_library(cases, spec, args.axis, threads=_threads(args))
    except FateSegError as exc:
        raise CliError(EXIT_INPUT, f"{type(exc).__name__}: {exc}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_library(lib, out)
    _write_manifest(
        out.with_name(out.name + ".manifest.json"), "build-library", argv,
        {"encoder": spec.to_json(), "fingerprint": spec.fingerprint, "axis": lib.axis.value},
        _pair_digests(support), [out], {"encoder_weight_seed": spec.weight_seed},
    )
    print(f"library: {len(lib)} entries, objects {list(lib.object_labels)}, fingerprint {lib.fingerprint}")
    return EXIT_OK


def cmd_segment(args, argv) -> int:
    try:
        test = load_volume(args.test)
    except FateSegError as exc:
        raise CliError(EXIT_INPUT, f"{type(exc).__name__}: {exc}")
    if not isinstance(test, Volume):
        raise CliError(EXIT_INPUT, f"{args.test}: expected an f32 image volume")
    try:
        lib = load_library(args.library)
    except (OSError, FateSegError) as exc:
        raise CliError(EXIT_INPUT, f"cannot load library: {exc}")
    cfg = _config_from_arg(args.config, lib.encoder_spec)
    if args.no_volumetric_consistency:
        cfg = cfg.replace(volumetric_consistency=False)
    try:
        result = segment_volume(test, lib, cfg, threads=_threads(args))
    except FingerprintMismatchError as exc:
        raise CliError(EXIT_FINGERPRINT, f"fingerprint mismatch: {exc}")
    except FateSegError as exc:
        raise CliError(EXIT_INPUT, f"{type(exc).__name__}: {exc}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = Path(args.test).name
    stem = name[: -len(IMG_SUFFIX)] if name.endswith(IMG_SUFFIX) else Path(name).stem
    written = []
    mask_path = out / f"{stem}.seg{LAB_SUFFIX}"
    save_volume(result.labels, mask_path)
    written.append(mask_path)
    if args.save_logits:
        for label, logits in sorted(result.per_object_logits.items()):
            path = out / f"{stem}.logits{label}{IMG_SUFFIX}"
            save_volume(Volume(logits, test.spacing), path)
            written.append(path)
    trace_path = out / f"{stem}.trace.json"
    _write_json(trace_path, result.trace)
    written.append(trace_path)
    inputs = {**_file_digests(Path(args.test)), **_file_digests(Path(args.library))}
    _write_manifest(
        out / f"{stem}.manifest.json", "segment", argv, cfg.to_flat(), inputs, written,
        {"attention_seed": cfg.attention_seed, "memory_seed": cfg.memory_seed, "decoder_seed": cfg.decoder.seed,
         "encoder_weight_seed": cfg.encoder.weight_seed},
    )
    print(f"segmented {args.test}: labels {list(result.labels.label_set)} -> {mask_path}")
    return EXIT_OK


def _eval_pairs(pred: Path, truth: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != truth.is_dir():
        raise CliError(EXIT_INPUT, "--pred and --truth must both be files or both be directories")
    if not pred.is_dir():
        return [(truth.name.removesuffix(LAB_SUFFIX), pred, truth)]
    truths = {p.name[: -len(LAB_SUFFIX)]: p for p in truth.glob("*" + LAB_SUFFIX)}
    pairs = []
    for vid, t in sorted(truths.items()):
        candidates = [pred / f"{vid}.seg{LAB_SUFFIX}", pred / f"{vid}{LAB_SUFFIX}"]
        found = next((c for c in candidates if c.is_file()), None)
        if found is None:
            raise CliError(EXIT_INPUT, f"no prediction for {vid} in {pred}")
        pairs.append((vid, found, t))
    if not pairs:
        raise CliError(EXIT_INPUT, f"no ground-truth label volumes in {truth}")
    return pairs


def cmd_eval(args, argv) -> int:
    report = DiceReport()
    inputs = {}
    for vid, p, t in _eval_pairs(Path(args.pred), Path(args.truth)):
        try:
            pv, tv = load_volume(p), load_volume(t)
        except FateSegError as exc:
            raise CliError(EXIT_INPUT, f"{type(exc).__name__}: {exc}")
        if not isinstance(pv, LabelVolume) or not isinstance(tv, LabelVolume):
            raise CliError(EXIT_INPUT, f"{vid}: eval needs label volumes")
        try:
            scores = evaluate_labels(pv, tv)
        except DimMismatchError as exc:
            raise CliError(EXIT_EVAL, f"DimMismatch for {vid}: {exc}")
        for label, score in scores.items():
            report.add(vid, label, score)
        inputs.update(_file_digests(p))
        inputs.update(_file_digests(t))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "dice.csv", out / "dice.json"
    lines = ["object_label,mean_dice,std_dice,n_volumes"]
    lines += [f"{l},{m:.6f},{s:.6f},{n}" for l, (m, s, n) in report.per_object.items()]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(json_path, report.to_json())
    _write_manifest(out / "manifest.json", "eval", argv, {}, inputs, [csv_path, json_path])
    for l, (m, s, n) in report.per_object.items():
        print(f"object {l}: dice {m:.4f} ± {s:.4f} over {n} volume(s)")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    data = Path(args.data)
    cases = _load_pairs(data)
    base = _config_from_arg(args.config)
    ids = [c[0] for c in cases]
    if args.support_ids:
        support_ids = [s for s in args.support_ids.split(",") if s]
        unknown = set(support_ids) - set(ids)
        if unknown:
            raise CliError(EXIT_INPUT, f"unknown support ids: {sorted(unknown)}")
        test_ids = [i for i in ids if i not in support_ids]
    else:
        try:
            support_ids, test_ids = split_support_test(ids, args.support_fraction, args.split_seed)
        except FateSegError as exc:
            raise CliError(EXIT_INPUT, str(exc))
    by_id = {c[0]: c for c in cases}
    support = [by_id[i] for i in support_ids]
    test = [by_id[i] for i in sorted(test_ids)]
    if args.max_test:
        test = test[: args.max_test]
    values = [v for v in args.values.split(",") if v]
    try:
        result = run_ablation(args.axis, values, base, support, test, threads=_threads(args))
    except InvalidAxisValueError as exc:
        raise CliError(EXIT_INPUT, f"InvalidAxisValue: {exc}")
    except FateSegError as exc:
        raise CliError(EXIT_INPUT, f"{type(exc).__name__}: {exc}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "ablation.csv", out / "ablation.json"
    csv_path.write_text(result.csv_text(), encoding="utf-8")
    payload = result.to_json()
    payload["support_ids"] = support_ids
    payload["test_ids"] = [t[0] for t in test]
    _write_json(json_path, payload)
    _write_json(out / "timing.json", dict(zip(result.values, result.runtimes)))
    _write_manifest(
        out / "manifest.json", "ablate", argv, base.to_flat(), _pair_digests(data), [csv_path, json_path],
        {"split_seed": args.split_seed},
    )
    sys.stdout.write(result.csv_text())
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    manifest = _load_json_arg(args.manifest, "manifest")
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise CliError(EXIT_INPUT, f"unsupported manifest schema {manifest.get('schema')!r}")
    return main(manifest["argv"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fateseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fateseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def threads(p):
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: $FATESEG_THREADS or 1)")

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--spec", default="default", help="phantom spec JSON file, inline JSON or 'default'")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=None, help="override noise sigma")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("build-library", help="encode a support set into a library file")
    p.add_argument("--support", required=True, help="directory of <id>.img.json / <id>.lab.json pairs")
    p.add_argument("--encoder", default="default", help="encoder spec JSON, preset name or 'default'")
    p.add_argument("--axis", default="Z", choices=["X", "Y", "Z"])
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("segment", help="segment a test volume")
    p.add_argument("--test", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--config", default=None, help="flat JSON config (file or inline)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-volumetric-consistency", action="store_true")
    p.add_argument("--save-logits", action="store_true")
    threads(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="Dice of predictions against ground truth")
    p.add_argument("--pred", required=True, help="label volume or directory of predictions")
    p.add_argument("--truth", required=True, help="label volume or directory of ground truth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated grid values")
    p.add_argument("--config", default=None)
    p.add_argument("--support-fraction", type=float, default=0.1)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--support-ids", default=None, help="explicit comma-separated support ids")
    p.add_argument("--max-test", type=int, default=None)
    p.add_argument("--out", required=True)
    threads(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except CliError as exc:
        print(f"fateseg {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
