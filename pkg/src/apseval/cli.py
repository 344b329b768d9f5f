"""Command-line front end.

Usage::

    apseval evaluate --gt-dir GT --pred-dir PRED --taxonomy tax.json --output report.json
    apseval stats --ann-dir GT --taxonomy tax.json --output stats.json --bins 20
    apseval fuse --semantic sem.apst --instances inst.json --taxonomy tax.json --out-stem out/img
    apseval validate --ann-dir GT --taxonomy tax.json
    apseval synth --out-dir GT --count 50 --seed 7

Set ``APS_EVAL_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
Exit status: 0 on success, 1 on fatal usage errors or validation failures,
2 when some image pairs could not be read or evaluated.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from apseval import io as aio
from apseval.core import AmodalImageAnnotation, TaxonomyError, validate_annotation
from apseval.fusion import FusionConfig, fuse
from apseval.metrics import EvalConfig, MetricAccumulator, evaluate_image, finalize, merge
from apseval.stats import StatsTally
from apseval.synth import SceneSpec, default_taxonomy, generate_scenes

log = logging.getLogger("apseval")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


def _configure_logging() -> None:
    name = os.environ.get("APS_EVAL_LOG", "WARNING").strip().upper()
    level = getattr(logging, name, None)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level if isinstance(level, int) else logging.WARNING)


def _positive_int(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apseval", description="Amodal panoptic segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="score predictions against groundtruth (APQ, APC, mIoU)")
    p.add_argument("--gt-dir", required=True, type=Path)
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--taxonomy", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--matching", choices=["visible", "amodal"], default="visible",
                   help="IoU used as matching weight for thing segments (default: visible)")
    p.add_argument("--min-iou", type=float, default=0.0,
                   help="matched pairs need IoU strictly above this (default: 0)")
    p.add_argument("--threads", type=_positive_int, default=1)

    p = sub.add_parser("stats", help="dataset shape and occlusion statistics")
    p.add_argument("--ann-dir", required=True, type=Path)
    p.add_argument("--taxonomy", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--bins", type=_positive_int, default=20)

    p = sub.add_parser("fuse", help="fuse semantic logits and instance predictions into an annotation")
    p.add_argument("--semantic", required=True, type=Path, help="APST tensor, channels x H x W")
    p.add_argument("--instances", required=True, type=Path, help="instance manifest JSON")
    p.add_argument("--taxonomy", required=True, type=Path)
    p.add_argument("--out-stem", required=True, type=Path)
    p.add_argument("--confidence-threshold", type=float, default=0.5)
    p.add_argument("--overlap-threshold", type=float, default=0.5)

    p = sub.add_parser("validate", help="check annotation files against every invariant")
    p.add_argument("--ann-dir", required=True, type=Path)
    p.add_argument("--taxonomy", required=True, type=Path)

    p = sub.add_parser("synth", help="write synthetic groundtruth scenes")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--count", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=_positive_int, default=376)
    p.add_argument("--width", type=_positive_int, default=1408)
    p.add_argument("--min-things", type=int, default=0)
    p.add_argument("--max-things", type=int, default=10)
    return parser


def _load_taxonomy(path: Path):
    try:
        return aio.read_taxonomy(path)
    except (OSError, ValueError) as exc:
        log.error("cannot load taxonomy %s: %s", path, exc)
        return None


def _empty_prediction(gt: AmodalImageAnnotation) -> AmodalImageAnnotation:
    return AmodalImageAnnotation(np.zeros(gt.shape, dtype=np.int32), ())


def evaluate_dirs(gt_dir: Path, pred_dir: Path, tax, cfg: EvalConfig, threads: int = 1):
    """Evaluate every stem of ``gt_dir``; returns ``(accumulator, errors, missing)``."""
    stems = aio.list_stems(gt_dir)
    pred_stems = set(aio.list_stems(pred_dir)) if pred_dir.is_dir() else set()

    def one(stem: str):
        try:
            gt = aio.read_annotation(gt_dir / stem, tax)
            if stem in pred_stems:
                pred = aio.read_annotation(pred_dir / stem, tax)
            else:
                pred = _empty_prediction(gt)
            return evaluate_image(gt, pred, tax, cfg), None
        except (OSError, ValueError) as exc:
            return None, f"{stem}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, stems))
    else:
        results = [one(s) for s in stems]
    acc = MetricAccumulator.empty(tax)
    errors = []
    for stem, (part, err) in zip(stems, results):
        if err is not None:
            errors.append(err)
        else:
            acc = merge(acc, part)
        log.info("evaluated %s", stem)
    missing = [s for s in stems if s not in pred_stems]
    for s in sorted(pred_stems - set(stems)):
        log.warning("prediction %s has no groundtruth; ignored", s)
    return acc, errors, missing


def cmd_evaluate(args) -> int:
    tax = _load_taxonomy(args.taxonomy)
    if tax is None:
        return EXIT_FATAL
    if not args.gt_dir.is_dir():
        log.error("groundtruth directory %s does not exist", args.gt_dir)
        return EXIT_FATAL
    try:
        cfg = EvalConfig(matching_weight=args.matching, min_match_iou=args.min_iou)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    acc, errors, missing = evaluate_dirs(args.gt_dir, args.pred_dir, tax, cfg, args.threads)
    for stem in missing:
        print(f"missing prediction for {stem}; scored as all false negatives", file=sys.stderr)
    for err in errors:
        print(f"error: {err}", file=sys.stderr)
    report = finalize(acc, tax)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    aio.write_report(report, args.output)
    print(report.summary_line())
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_stats(args) -> int:
    tax = _load_taxonomy(args.taxonomy)
    if tax is None:
        return EXIT_FATAL
    tally = StatsTally(tax, args.bins)
    errors = []
    for stem in aio.list_stems(args.ann_dir):
        try:
            tally.add(aio.read_annotation(args.ann_dir / stem, tax))
        except (OSError, ValueError) as exc:
            errors.append(f"{stem}: {exc}")
    for err in errors:
        print(f"error: {err}", file=sys.stderr)
    report = tally.report()
    args.output.parent.mkdir(parents=True, exist_ok=True)
    aio.write_report(report, args.output)
    print(f"images={report.images} instances={report.instances}")
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_fuse(args) -> int:
    tax = _load_taxonomy(args.taxonomy)
    if tax is None:
        return EXIT_FATAL
    try:
        cfg = FusionConfig(confidence_threshold=args.confidence_threshold,
                           overlap_threshold=args.overlap_threshold)
        semantic = aio.read_tensor(args.semantic)
        instances = aio.read_instances(args.instances)
        ann = fuse(semantic, instances, tax, cfg)
        aio.write_annotation(ann, tax, args.out_stem)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(f"segments={len(ann.segments)}")
    return EXIT_OK


def cmd_validate(args) -> int:
    tax = _load_taxonomy(args.taxonomy)
    if tax is None:
        return EXIT_FATAL
    bad = 0
    stems = aio.list_stems(args.ann_dir)
    for stem in stems:
        try:
            ann = aio.read_annotation(args.ann_dir / stem, tax, validate=False)
            problems = [str(v) for v in validate_annotation(ann, tax)]
        except (OSError, ValueError) as exc:
            problems = [str(exc)]
        for p in problems:
            print(f"{stem}: {p}")
        bad += bool(problems)
    print(f"checked={len(stems)} invalid={bad}")
    return EXIT_FATAL if bad else EXIT_OK


def cmd_synth(args) -> int:
    tax = default_taxonomy()
    try:
        spec = SceneSpec(height=args.height, width=args.width, min_things=args.min_things,
                         max_things=args.max_things, seed=args.seed,
                         min_size=min(8, args.height, args.width),
                         max_size=max(1, min(120, args.height, args.width)))
        scenes = generate_scenes(spec, args.count, tax)
    except (TaxonomyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    args.out_dir.mkdir(parents=True, exist_ok=True)
    aio.write_taxonomy(tax, args.out_dir / "taxonomy.json")
    for k, scene in enumerate(scenes):
        aio.write_annotation(scene, tax, args.out_dir / f"scene_{k:05d}")
    print(f"scenes={len(scenes)} out_dir={args.out_dir}")
    return EXIT_OK


COMMANDS = {
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "fuse": cmd_fuse,
    "validate": cmd_validate,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
