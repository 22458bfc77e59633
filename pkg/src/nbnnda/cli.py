"""Command-line entry point: ``nbnnda <subcommand> ...``.

Exit codes: 0 success, 2 validation failure, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import io
from .adaptation import SweepRow, TransferSpec, adapted_counts, build_adapted_classifier, transfer_sweep
from .features import DEFAULT_PATCH, DEFAULT_STRIDE, DEFAULT_WIDTH, image_bags, load_gray
from .harness import (AUGMENT_MODES, AccuracyReport, ExperimentAborted, ProtocolConfig, multi_source_grid,
                      multi_source_run, run_experiment, split, summarize_cells, sweep, sweep_rows, welch_t)
from .nbnn import Classifier, classify_batch
from .synth import ShiftSpec, gen_pair
from .types import DomainDataset, NBNNError, ValidationError

log = logging.getLogger("nbnnda")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
IMAGE_SUFFIXES = {".pgm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _load(path: str) -> DomainDataset:
    return io.load_dataset(path)


def _input_hashes(paths: Sequence[str]) -> Dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = [p]
        if p.suffix.lower() in (".txt", ".manifest"):
            files += [p.parent / f for f in io.parse_manifest(p.read_text())["files"]]
        for f in files:
            out[str(f)] = io.file_sha256(f)
    return out


def _protocol(args) -> ProtocolConfig:
    if not args.target or not args.sources:
        raise ValidationError("--target and at least one --sources are required")
    overrides = ProtocolConfig().n_source_overrides
    if args.n_source_override is not None:
        overrides = {k: int(v) for k, v in args.n_source_override}
    return ProtocolConfig(
        n_source_per_class=args.n_source,
        n_target_labeled_per_class=args.n_target,
        n_source_overrides=overrides,
        seeds=[args.seed + i for i in range(args.trials)],
        split_seed=args.split_seed,
        augment_mode=args.augment,
        rho=args.rho,
        per_source_rho={k: float(v) for k, v in (args.per_source_rho or [])} or None,
        granularity=args.granularity,
        distance_variant=args.distance,
        backend=args.backend,
        threads=args.threads,
    )


def _write_rows(rows: Sequence[SweepRow], out: Optional[str]) -> None:
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(SweepRow.FIELDS)
        for r in rows:
            w.writerow(r.as_row())
    finally:
        if out:
            fh.close()


def _emit_report(report: AccuracyReport, out: Optional[str]) -> None:
    sys.stdout.write(report.to_text())
    if out:
        Path(out).write_text(report.to_json())
        Path(out).with_suffix(".txt").write_text(report.to_text())


# --- subcommands ------------------------------------------------------------

def cmd_extract(args) -> int:
    root = Path(args.images)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValidationError(f"{root}: expected one subdirectory per class")
    name = args.name or root.name
    bags = []
    for label, d in enumerate(class_dirs, start=1):
        for f in sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            bags += image_bags(load_gray(f), label, f"{d.name}/{f.stem}", name, args.augment == "on",
                               args.width, args.patch, args.stride)
    ds = DomainDataset(name, tuple(range(1, len(class_dirs) + 1)), tuple(bags), 64,
                       tuple(d.name for d in class_dirs))
    out = Path(args.out)
    io.write_descriptors(ds, out)
    manifest = out.with_suffix(".txt")
    manifest.write_text(io.format_manifest(name, ds.label_names, [out.name], {
        "descriptor": "dense-gradient-64", "width": args.width, "patch": args.patch, "stride": args.stride,
        "augment": args.augment, "augment_order": "resize-then-crop"}))
    print(f"wrote {len(bags)} bags ({ds.n_descriptors} descriptors) to {out}; manifest {manifest}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = ShiftSpec(n_classes=args.classes, dim=args.dim, sigma=args.sigma, separation=args.separation,
                     shift=args.shift, kappa=args.kappa, descriptors_per_image=args.descriptors,
                     source_images_per_class=args.source_images, target_labeled_per_class=args.target_labeled,
                     target_test_per_class=args.target_test, seed=args.seed, class_offset=args.class_offset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = [f"class{c}" for c in range(1, spec.n_classes + 1)]
    extra = {f"spec.{k}": v for k, v in spec.describe().items()}
    for ds, stem in zip(gen_pair(spec), ("source", "target_labeled", "target_test")):
        io.write_nbd(ds, out / f"{stem}.nbd")
        (out / f"{stem}.txt").write_text(io.format_manifest(stem, labels, [f"{stem}.nbd"], extra))
    print(f"wrote source/target_labeled/target_test datasets to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = _load(args.dataset)
    sel, rest = split(ds, args.n_per_class, args.seed)
    io.write_descriptors(sel, args.out_selected)
    if args.out_remainder:
        io.write_descriptors(rest, args.out_remainder)
    print(f"selected {len(sel)} bags, remainder {len(rest)}")
    return EXIT_OK


def cmd_classify(args) -> int:
    train, test = _load(args.train), _load(args.test)
    clf = Classifier.from_dataset(train, args.backend, args.distance, args.threads)
    res = classify_batch(test.bags, clf)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        classes = clf.classes
        w.writerow(["image_id", "label", "predicted", "positive_distance"] + [f"d{c}" for c in classes])
        for r in res.results:
            w.writerow([r.image_id, r.label, r.predicted, repr(r.positive_distance)]
                       + [repr(r.distances[c]) for c in classes])
    finally:
        if args.out:
            fh.close()
    acc = "n/a" if res.accuracy is None else f"{res.accuracy:.6f}"
    print(f"accuracy: {acc} ({res.n_correct}/{len(res)}) distance={args.distance}", file=sys.stderr)
    return EXIT_OK


def cmd_adapt(args) -> int:
    target = _load(args.target)
    sources = [_load(s) for s in args.sources]
    eval_set = _load(args.eval)
    seeds = args.seeds or [args.seed]
    fractions = args.rho or [0.2]
    per_source = {k: float(v) for k, v in (args.per_source_rho or [])} or None
    if per_source:
        rows = []
        for rho in fractions:
            for seed in seeds:
                spec = TransferSpec(rho, seed, args.granularity, per_source)
                clf = build_adapted_classifier(target, sources, spec, args.backend, args.distance, args.threads)
                res = classify_batch(eval_set.bags, clf)
                counts = adapted_counts(clf).values()
                rows.append(SweepRow(rho, seed, res.accuracy, sum(c.n_target for c in counts),
                                     sum(sum(c.n_source.values()) for c in counts), args.distance, "none"))
    else:
        rows = transfer_sweep(target, sources, fractions, seeds, eval_set, args.backend, args.distance,
                              args.granularity, threads=args.threads)
    _write_rows(rows, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _protocol(args)
    sources = [_load(s) for s in args.sources]
    target = _load(args.target)
    cells = sweep(cfg, sources, target, args.fractions, args.modes)
    _write_rows(sweep_rows(cells), args.out)
    if args.summary:
        with open(args.summary, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["augment_mode", "fraction", "mean", "std", "n_trials"])
            w.writeheader()
            w.writerows(summarize_cells(cells))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _protocol(args)
    sources = [_load(s) for s in args.sources]
    target = _load(args.target)
    fn = multi_source_run if args.command == "multi" and len(sources) >= 2 else run_experiment
    try:
        report = fn(cfg, sources, target, _input_hashes([*args.sources, args.target]))
    except ExperimentAborted as exc:
        _emit_report(exc.partial, args.out)
        raise
    _emit_report(report, args.out)
    return EXIT_OK


def cmd_multi(args) -> int:
    if args.domains:
        args.target, args.sources = args.domains[0], args.domains[1:]
        cfg = _protocol(args)
        reports = multi_source_grid(cfg, [_load(d) for d in args.domains])
        for report in reports:
            sys.stdout.write(report.to_text() + "\n")
        if args.out:
            Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], indent=2))
        return EXIT_OK
    if not args.sources or not args.target:
        raise ValidationError("multi needs --domains, or --sources (>= 2) with --target")
    return cmd_run(args)


def cmd_report(args) -> int:
    reports = [AccuracyReport.from_dict(json.loads(Path(p).read_text())) for p in args.reports]
    for r in reports:
        sys.stdout.write(r.to_text() + "\n")
    if len(reports) == 2:
        t, dof = welch_t(reports[0].accuracies, reports[1].accuracies)
        print(f"welch_t (diagnostic, first - second): t={t:.4f} dof={dof:.2f}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _add_protocol_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sources", action="append", default=[], help="source dataset (repeatable)")
    p.add_argument("--target", help="target dataset (labeled images are split from it)")
    p.add_argument("--n-source", type=int, default=20, help="source images per class")
    p.add_argument("--n-target", type=int, default=3, help="labeled target images per class")
    p.add_argument("--n-source-override", type=_key_value, action="append",
                   help="per-source image count, e.g. webcam=15 (default: webcam=15)")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--split-seed", type=int, default=None, help="fix the split across trials")
    p.add_argument("--augment", choices=AUGMENT_MODES, default="none")
    p.add_argument("--rho", type=float, default=0.2)
    p.add_argument("--per-source-rho", type=_key_value, action="append")
    p.add_argument("--granularity", choices=("descriptor", "image"), default="descriptor")
    p.add_argument("--out", help="write JSON report (and .txt twin) here")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--distance", choices=("l2sq", "l2"), default="l2sq")
    common.add_argument("--backend", choices=("brute", "kdtree"), default="kdtree")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nbnnda",
                                     description="NBNN classification with learning-free source-descriptor transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="dense descriptors from a class-per-folder image tree")
    p.add_argument("images")
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--patch", type=int, default=DEFAULT_PATCH)
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--augment", choices=("on", "off"), default="off")
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic shifted source/target pair")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--class-offset", type=float, default=0.0)
    p.add_argument("--descriptors", type=int, default=50)
    p.add_argument("--source-images", type=int, default=20)
    p.add_argument("--target-labeled", type=int, default=3)
    p.add_argument("--target-test", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="per-class random image selection")
    p.add_argument("dataset")
    p.add_argument("--n-per-class", type=int, required=True)
    p.add_argument("--out-selected", required=True)
    p.add_argument("--out-remainder")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("classify", parents=[common], help="plain NBNN: train pools vs test bags")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("adapt", parents=[common], help="adapted NBNN over fixed train/eval sets")
    p.add_argument("--target", required=True, help="labeled target dataset")
    p.add_argument("--sources", action="append", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--rho", type=float, action="append", help="transfer fraction (repeatable)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--granularity", choices=("descriptor", "image"), default="descriptor")
    p.add_argument("--per-source-rho", type=_key_value, action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("run", parents=[common], help="multi-trial protocol run, mean +- std report")
    _add_protocol_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="fraction x augmentation-mode grid")
    _add_protocol_flags(p)
    p.add_argument("--fractions", type=_floats, default=[0.0, 0.05, 0.1, 0.2, 0.5, 1.0])
    p.add_argument("--modes", type=lambda s: s.split(","), default=list(AUGMENT_MODES))
    p.add_argument("--summary", help="write per-cell mean/std CSV here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("multi", parents=[common], help="multi-source runs (explicit or all 2-source combos)")
    _add_protocol_flags(p)
    p.add_argument("--domains", action="append", help="domain dataset for the full combination grid")
    p.set_defaults(func=cmd_multi)

    p = sub.add_parser("report", parents=[common], help="render JSON reports; two reports add Welch's t")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ExperimentAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc.__cause__, ValidationError) else EXIT_RUNTIME
    except (NBNNError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
