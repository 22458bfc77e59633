"""Experiment protocols: per-class image splits, multi-trial runs, fraction/augmentation grids."""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .adaptation import (SweepRow, TransferSpec, adapted_counts, build_adapted_classifier, check_disjoint,
                         derive_seed)
from .features import CROP_FRACTION, base_image_id, is_variant
from .nbnn import DISTANCE_VARIANTS, classify_batch
from .nn_index import BACKENDS
from .types import DomainDataset, NBNNError, ValidationError, check_dims, check_label_sets, require_valid

log = logging.getLogger(__name__)

REPORT_FORMAT = "report-v1"
AUGMENT_MODES = ("none", "source_only", "target_only", "both")
DEFAULT_SOURCE_OVERRIDES = {"webcam": 15}


@dataclass
class ProtocolConfig:
    n_source_per_class: int = 20
    n_target_labeled_per_class: int = 3
    # sources named here (case-insensitive) use their own per-class image count
    n_source_overrides: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_SOURCE_OVERRIDES))
    n_trials: int = 5
    seeds: Optional[List[int]] = None
    split_seed: Optional[int] = None
    augment_mode: str = "none"
    rho: float = 0.2
    per_source_rho: Optional[Dict[str, float]] = None
    granularity: str = "descriptor"
    distance_variant: str = "l2sq"
    backend: str = "kdtree"
    threads: int = 1

    def __post_init__(self):
        bad = []
        if self.n_source_per_class < 1 or self.n_target_labeled_per_class < 1:
            bad.append("per-class image counts must be >= 1")
        if any(n < 1 for n in self.n_source_overrides.values()):
            bad.append("source count overrides must be >= 1")
        if self.seeds is None:
            self.seeds = list(range(1, self.n_trials + 1))
        self.seeds = [int(s) for s in self.seeds]
        self.n_trials = len(self.seeds)
        if self.n_trials < 1:
            bad.append("at least one trial")
        if not 0.0 <= self.rho <= 1.0:
            bad.append(f"rho {self.rho} outside [0, 1]")
        if self.augment_mode not in AUGMENT_MODES:
            bad.append(f"augment_mode must be one of {AUGMENT_MODES}")
        if self.distance_variant not in DISTANCE_VARIANTS:
            bad.append(f"distance_variant must be one of {DISTANCE_VARIANTS}")
        if self.backend not in BACKENDS:
            bad.append(f"backend must be one of {BACKENDS}")
        if bad:
            raise ValidationError("invalid protocol config", bad)

    def n_source_for(self, name: str) -> int:
        overrides = {k.lower(): v for k, v in self.n_source_overrides.items()}
        return overrides.get(name.lower(), self.n_source_per_class)

    def with_(self, **kw) -> "ProtocolConfig":
        d = asdict(self)
        d.update(kw)
        return ProtocolConfig(**d)


def split(ds: DomainDataset, n_per_class: int, seed: int) -> Tuple[DomainDataset, DomainDataset]:
    """Pick ``n_per_class`` images per class uniformly without replacement.

    Augmentation variants follow their base image, so an image never straddles
    the split. Returns ``(selected, remainder)``.
    """
    groups: Dict[int, Dict[str, List[int]]] = {c: {} for c in ds.label_set}
    for i, bag in enumerate(ds.bags):
        groups.setdefault(bag.label, {}).setdefault(base_image_id(bag.image_id), []).append(i)
    chosen = set()
    for c in ds.label_set:
        images = list(groups[c])
        if len(images) < n_per_class:
            raise ValidationError(f"dataset {ds.name!r} class {c} has {len(images)} images, "
                                  f"{n_per_class} required")
        rng = np.random.default_rng(derive_seed(seed, "split", ds.name, c))
        for j in rng.permutation(len(images))[:n_per_class]:
            chosen.update(groups[c][images[j]])
    sel = [b for i, b in enumerate(ds.bags) if i in chosen]
    rest = [b for i, b in enumerate(ds.bags) if i not in chosen]
    return ds.subset(sel), ds.subset(rest)


def plain_view(ds: DomainDataset) -> DomainDataset:
    return ds.subset([b for b in ds.bags if not is_variant(b.image_id)])


def augmented_view(ds: DomainDataset) -> DomainDataset:
    """Only the crop/flip variant bags; every image must have them."""
    variants = [b for b in ds.bags if is_variant(b.image_id)]
    have = {base_image_id(b.image_id) for b in variants}
    missing = sorted({base_image_id(b.image_id) for b in ds.bags} - have)
    if missing:
        raise ValidationError(f"dataset {ds.name!r}: augmentation requested but {len(missing)} images "
                              f"have no variant bags (extract with --augment on)", missing[:5])
    return ds.subset(variants)


def _view(ds: DomainDataset, augment: bool) -> DomainDataset:
    return augmented_view(ds) if augment else plain_view(ds)


@dataclass
class TrialRecord:
    seed: int
    accuracy: float
    n_test: int
    n_target: int
    n_source: Dict[str, int]
    n_correct: int = 0


@dataclass
class AccuracyReport:
    sources: List[str]
    target: str
    config: Dict
    trials: List[TrialRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    inputs: Dict[str, str] = field(default_factory=dict)
    metadata: Dict = field(default_factory=dict)
    complete: bool = True

    @property
    def accuracies(self) -> List[float]:
        return [t.accuracy for t in self.trials]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.trials else float("nan")

    @property
    def std(self) -> float:
        if len(self.trials) < 2:
            return float("nan")
        return float(np.std(self.accuracies, ddof=1))

    def to_dict(self) -> Dict:
        return {"format": REPORT_FORMAT, "sources": self.sources, "target": self.target,
                "config": self.config, "trials": [asdict(t) for t in self.trials],
                "mean": self.mean, "std": self.std, "wall_clock": self.wall_clock,
                "inputs": self.inputs, "metadata": self.metadata, "complete": self.complete}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AccuracyReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValidationError(f"unsupported report format {d.get('format')!r}")
        return cls(list(d["sources"]), d["target"], dict(d["config"]),
                   [TrialRecord(**t) for t in d["trials"]], d.get("wall_clock", 0.0),
                   dict(d.get("inputs", {})), dict(d.get("metadata", {})), d.get("complete", True))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"# nbnn {REPORT_FORMAT}",
                 f"experiment: {'+'.join(self.sources)} -> {self.target}"]
        lines += [f"config.{k}: {v}" for k, v in sorted(self.config.items())]
        lines += [f"meta.{k}: {v}" for k, v in sorted(self.metadata.items())]
        lines += [f"input.{k}: {v}" for k, v in sorted(self.inputs.items())]
        for t in self.trials:
            src = ",".join(f"{k}={v}" for k, v in sorted(t.n_source.items()))
            lines.append(f"trial seed={t.seed} accuracy={t.accuracy:.6f} n_test={t.n_test} "
                         f"n_target={t.n_target} n_source=[{src}]")
        lines.append(f"accuracy: {100 * self.mean:.2f} +- {100 * self.std:.2f} (n={len(self.trials)})")
        lines.append(f"wall_clock_s: {self.wall_clock:.3f}")
        if not self.complete:
            lines.append("status: ABORTED (partial results)")
        return "\n".join(lines) + "\n"


class ExperimentAborted(NBNNError):
    """A trial failed; ``partial`` holds the trials completed before it."""

    def __init__(self, message: str, partial: AccuracyReport):
        super().__init__(message)
        self.partial = partial


def welch_t(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Welch's t statistic and Welch-Satterthwaite degrees of freedom (diagnostic only)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        return float("nan"), float("nan")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se = math.sqrt(va + vb)
    if se == 0:
        return (0.0 if a.mean() == b.mean() else math.copysign(math.inf, a.mean() - b.mean())), float("nan")
    dof = (va + vb) ** 2 / ((va ** 2 / (len(a) - 1)) + (vb ** 2 / (len(b) - 1))) if va + vb else float("nan")
    return float((a.mean() - b.mean()) / se), float(dof)


def _metadata() -> Dict:
    return {"crop_fraction": CROP_FRACTION, "augment_order": "resize-then-crop",
            "test_set": "target remainder, unaugmented", "rho_scope": "per class"}


def run_trial(cfg: ProtocolConfig, sources: Sequence[DomainDataset], target: DomainDataset,
              seed: int) -> TrialRecord:
    split_seed = cfg.split_seed if cfg.split_seed is not None else seed
    aug_src = cfg.augment_mode in ("source_only", "both")
    aug_tgt = cfg.augment_mode in ("target_only", "both")
    src_views = [_view(split(s, cfg.n_source_for(s.name), split_seed)[0], aug_src) for s in sources]
    labeled, rest = split(target, cfg.n_target_labeled_per_class, split_seed)
    test = plain_view(rest)
    check_disjoint([labeled], test)
    spec = TransferSpec(cfg.rho, seed, cfg.granularity, cfg.per_source_rho)
    clf = build_adapted_classifier(_view(labeled, aug_tgt), src_views, spec, cfg.backend,
                                   cfg.distance_variant, cfg.threads)
    res = classify_batch(test.bags, clf)
    if res.accuracy is None:
        raise ValidationError(f"target {target.name!r} has no test images left after the split")
    counts = adapted_counts(clf).values()
    n_source: Dict[str, int] = {}
    for c in counts:
        for k, v in c.n_source.items():
            n_source[k] = n_source.get(k, 0) + v
    return TrialRecord(seed, res.accuracy, len(test), sum(c.n_target for c in counts), n_source,
                       res.n_correct)


def run_experiment(cfg: ProtocolConfig, sources: Sequence[DomainDataset], target: DomainDataset,
                   inputs: Optional[Mapping[str, str]] = None) -> AccuracyReport:
    """Repeat split -> (augment) -> adapt -> evaluate once per trial seed."""
    for ds in (*sources, target):
        require_valid(ds)
    check_label_sets(target, *sources)
    check_dims(target, *sources)
    report = AccuracyReport([s.name for s in sources], target.name, asdict(cfg),
                            inputs=dict(inputs or {}), metadata=_metadata())
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        try:
            report.trials.append(run_trial(cfg, sources, target, seed))
        except Exception as exc:
            report.complete = False
            report.wall_clock = time.perf_counter() - t0
            raise ExperimentAborted(f"trial seed={seed} failed: {exc}", report) from exc
        log.info("trial seed=%d accuracy=%.4f", seed, report.trials[-1].accuracy)
    report.wall_clock = time.perf_counter() - t0
    return report


def multi_source_run(cfg: ProtocolConfig, sources: Sequence[DomainDataset], target: DomainDataset,
                     inputs: Optional[Mapping[str, str]] = None) -> AccuracyReport:
    if len(sources) < 2:
        raise ValidationError(f"multi-source run needs at least 2 sources, got {len(sources)}")
    return run_experiment(cfg, sources, target, inputs)


def multi_source_grid(cfg: ProtocolConfig, domains: Sequence[DomainDataset], n_sources: int = 2
                      ) -> List[AccuracyReport]:
    """Every combination of ``n_sources`` domains adapting to each remaining domain."""
    reports = []
    for target in domains:
        others = [d for d in domains if d is not target]
        for combo in itertools.combinations(others, n_sources):
            reports.append(multi_source_run(cfg, list(combo), target))
    return reports


@dataclass
class SweepCell:
    augment_mode: str
    fraction: float
    report: AccuracyReport


def sweep(cfg: ProtocolConfig, sources: Sequence[DomainDataset], target: DomainDataset,
          fractions: Sequence[float], modes: Sequence[str] = AUGMENT_MODES) -> List[SweepCell]:
    """Full (augment_mode x fraction) grid, one report per cell, mode-major order."""
    return [SweepCell(mode, rho, run_experiment(cfg.with_(rho=rho, augment_mode=mode), sources, target))
            for mode in modes for rho in fractions]


def sweep_rows(cells: Iterable[SweepCell]) -> List[SweepRow]:
    rows = []
    for cell in cells:
        for t in cell.report.trials:
            rows.append(SweepRow(cell.fraction, t.seed, t.accuracy, t.n_target, sum(t.n_source.values()),
                                 cell.report.config["distance_variant"], cell.augment_mode))
    return rows


def summarize_cells(cells: Iterable[SweepCell]) -> List[Dict]:
    return [{"augment_mode": c.augment_mode, "fraction": c.fraction, "mean": c.report.mean,
             "std": c.report.std, "n_trials": len(c.report.trials)} for c in cells]
