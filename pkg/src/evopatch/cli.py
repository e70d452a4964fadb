"""``evopatch`` command line: synth, baseline, evolve, apply, render, time.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DatasetError,
    SyntheticSpec,
    load_manifest,
    load_regions,
    plan_split,
    read_manifest,
    write_synthetic,
)
from .evolution import Baseline, BoundError, mean_region_iou
from .geometry import Chromosome, DimensionError
from .imaging import read_pixels, stack_dataset, write_png
from .nn import CompactCnn, ShapeError, TrainingDiverged
from .pipeline import (
    RunConfig,
    dump_json,
    history_json,
    prepare_datasets,
    render_patches,
    run_baseline,
    run_evolution,
    substream_seed,
    time_inference,
    time_training,
)

log = logging.getLogger("evopatch")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
CI_ENV_VARS = ("CI", "EVOPATCH_CI")
LANDMARK_NOTE = "nose localisation is supplied by the manifest and is not timed"


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _ci_mode() -> bool:
    return any(os.environ.get(v, "").lower() not in ("", "0", "false") for v in CI_ENV_VARS)


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {args.config}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc
    return cfg.with_overrides(seed=args.seed, proxy=args.proxy_classifier)


def _manifest_path(args, cfg: RunConfig) -> Path:
    m = getattr(args, "manifest", None) or cfg.manifest
    if not m:
        raise UsageError("no manifest given (use --manifest or set 'manifest' in the config)")
    p = Path(m)
    if not p.is_file():
        raise UsageError(f"manifest not found: {p}")
    return p


def _load_images(path: Path):
    try:
        return load_manifest(path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


def _load_chromosome(path: str) -> Chromosome:
    try:
        return Chromosome.load(path)
    except FileNotFoundError as exc:
        raise UsageError(f"chromosome not found: {path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid chromosome {path}: {exc}") from exc


def _load_model(path: str) -> CompactCnn:
    try:
        return CompactCnn.load(path)
    except FileNotFoundError as exc:
        raise UsageError(f"model not found: {path}") from exc
    except ValueError as exc:
        raise UsageError(f"invalid model file {path}: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _test_images(images, cfg: RunConfig):
    plan = plan_split((i.subject for i in images), cfg.test_frac, cfg.val_frac, substream_seed(cfg.seed, "split"))
    return plan.partition(images)[2]


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> dict:
    try:
        spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
        if args.seed is not None:
            spec = replace(spec, rng_seed=args.seed)
        spec.validate()
    except FileNotFoundError as exc:
        raise UsageError(f"spec not found: {args.spec}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    manifest = write_synthetic(spec, _out_dir(args))
    return {"manifest": str(manifest), "images": spec.num_subjects * spec.expressions_per_subject}


def cmd_baseline(args) -> dict:
    cfg = _load_config(args)
    images, num_classes = _load_images(_manifest_path(args, cfg))
    data, split = prepare_datasets(images, num_classes, cfg)
    base = run_baseline(data, cfg)
    out = _out_dir(args)
    doc = base.to_dict()
    doc.update(seed=cfg.seed, split=split, classifier=cfg.model.classifier, config=cfg.to_dict())
    dump_json(out / "baseline.json", doc)
    base.model.save(out / "baseline_model.evpm")
    return {"s_b": base.s_b, "p_b": base.p_b, "test_accuracy": base.test_accuracy}


def cmd_evolve(args) -> dict:
    cfg = _load_config(args)
    images, num_classes = _load_images(_manifest_path(args, cfg))
    out = _out_dir(args)
    bpath = Path(args.baseline) if args.baseline else out / "baseline.json"
    if not bpath.is_file():
        raise UsageError(f"baseline not found: {bpath} (run 'evopatch baseline' first)")
    bdoc = json.loads(bpath.read_text())
    extra = {k: bdoc.pop(k, None) for k in ("seed", "split", "classifier", "config")}
    try:
        baseline = Baseline.from_dict(bdoc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid baseline {bpath}: {exc}") from exc
    data, split = prepare_datasets(images, num_classes, cfg)
    if extra["split"] is not None and extra["split"] != split:
        raise UsageError("baseline was computed on a different subject split (seed or manifest differ)")

    def progress(stats):
        log.info("generation %d: best %.4f mean %.4f", stats.generation, stats.best_fitness, stats.mean_fitness)

    try:
        outcome = run_evolution(data, baseline, cfg, on_generation=progress)
    except BoundError as exc:
        raise UsageError(f"evolution bounds: {exc}") from exc
    report = outcome.report(baseline, cfg, split)
    if args.regions:
        regions = load_regions(args.regions)
        report["region_iou"] = mean_region_iou(outcome.result.best.chromosome, data.test, regions)
    dump_json(out / "history.json", history_json(outcome.result))
    outcome.result.best.chromosome.save(out / "best_chromosome.json")
    outcome.best_model.save(out / "best_model.evpm")
    dump_json(out / "report.json", report)
    # wall-clock varies run to run, so it lives beside the report
    dump_json(out / "timings.json", outcome.timings)
    return {k: report[k] for k in ("classifier", "reduction_pct", "best")}


def cmd_apply(args) -> dict:
    cfg = _load_config(args)
    images, _ = _load_images(_manifest_path(args, cfg))
    c = _load_chromosome(args.chromosome)
    model = _load_model(args.model)
    out = _out_dir(args)
    x, labels = stack_dataset(images, c)
    if x.shape[1:] != tuple(model.input_shape):
        raise UsageError(f"model expects input {tuple(model.input_shape)}, chromosome gives {x.shape[1:]}")
    proba = model.predict_proba(x)
    pred = proba.argmax(axis=1)
    (out / "stacks").mkdir(exist_ok=True)
    rows = []
    for i, img in enumerate(images):
        # channels laid side by side
        tile = np.concatenate(np.moveaxis(x[i], 2, 0), axis=1)
        write_png(out / "stacks" / f"{i:04d}.png", np.rint(tile * 255.0))
        rows.append({"index": i, "subject": img.subject, "label": img.label, "predicted": int(pred[i]),
                     "probabilities": [float(p) for p in proba[i]]})
    acc = float(np.mean(pred == labels))
    dump_json(out / "predictions.json", {"accuracy": acc, "predictions": rows})
    return {"images": len(rows), "accuracy": acc}


def cmd_render(args) -> dict:
    cfg = _load_config(args)
    images, _ = _load_images(_manifest_path(args, cfg))
    c = _load_chromosome(args.chromosome)
    pool = images if args.all_images else _test_images(images, cfg)
    try:
        written = render_patches(pool, c, args.n, _out_dir(args), substream_seed(cfg.seed, "render"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return {"files": [p.name for p in written]}


def cmd_time(args) -> dict:
    cfg = _load_config(args)
    mpath = _manifest_path(args, cfg)
    c = _load_chromosome(args.chromosome)
    if args.n < 1:
        raise UsageError("n must be >= 1")
    # timing starts from raw pixels so equalization is part of both paths
    equalized, num_classes = _load_images(mpath)
    _, entries = read_manifest(mpath)
    raw = [img.with_data(read_pixels(mpath.parent / e.image)) for img, e in zip(equalized, entries)]
    report = {"schema": "evopatch.timing/1", "note": LANDMARK_NOTE}
    try:
        if args.model and args.full_model:
            report["inference"] = time_inference(raw, c, _load_model(args.full_model), _load_model(args.model), args.n)
        if args.train:
            data, _ = prepare_datasets(equalized, num_classes, cfg)
            report["training"] = time_training(data, c, cfg.model, cfg.train, substream_seed(cfg.seed, "train"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if len(report) == 2:
        raise UsageError("nothing to time: pass --model and --full-model, and/or --train")
    dump_json(_out_dir(args) / "timing.json", report)
    return report


COMMANDS = {
    "synth": cmd_synth,
    "baseline": cmd_baseline,
    "evolve": cmd_evolve,
    "apply": cmd_apply,
    "render": cmd_render,
    "time": cmd_time,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="root seed (overrides the config; required when CI is set)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--proxy-classifier", action="store_true",
                        help="score chromosomes with logistic regression instead of the CNN")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="evopatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic glyph dataset")
    p.add_argument("--spec", help="synthetic spec JSON (defaults used if omitted)")

    p = sub.add_parser("baseline", parents=[common], help="train on whole images")
    p.add_argument("--manifest")

    p = sub.add_parser("evolve", parents=[common], help="run the patch search")
    p.add_argument("--manifest")
    p.add_argument("--baseline", help="baseline.json (default: <out>/baseline.json)")
    p.add_argument("--regions", help="ground-truth regions JSON; adds region_iou to the report")

    p = sub.add_parser("apply", parents=[common], help="predict with a chromosome and its model")
    p.add_argument("--manifest")
    p.add_argument("--chromosome", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("render", parents=[common], help="draw patches on sampled test images")
    p.add_argument("--manifest")
    p.add_argument("--chromosome", required=True)
    p.add_argument("-n", type=int, default=3)
    p.add_argument("--all-images", action="store_true", help="sample from every image, not only the test split")

    p = sub.add_parser("time", parents=[common], help="wall-clock the full-image and patch paths")
    p.add_argument("--manifest")
    p.add_argument("--chromosome", required=True)
    p.add_argument("--model", help="patch model (.evpm)")
    p.add_argument("--full-model", help="whole-image model (.evpm)")
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--train", action="store_true", help="also time one training run on each path")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.seed is None and _ci_mode():
        print("evopatch: --seed is required when CI is set", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("evopatch: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = COMMANDS[args.command](args)
    except (UsageError, DimensionError) as exc:
        print(f"evopatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ShapeError, RuntimeError, OSError, ValueError) as exc:
        print(f"evopatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
