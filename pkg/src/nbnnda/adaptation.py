"""Learning-free adaptation: enrich target class pools with randomly sampled source descriptors.

Sampling is nested: each (source, class) pool gets one seeded permutation and a
fraction ``rho`` keeps its first ``round(rho * n)`` entries, so a larger rho
always yields a superset of a smaller one under the same seed.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .features import base_image_id, round_half_up
from .nbnn import Classifier, classify_batch
from .types import (TARGET_TAG, ClassPool, DomainDataset, ValidationError, as_descriptor_array,
                    check_dims, check_label_sets, pool_by_class, require_valid)

log = logging.getLogger(__name__)

GRANULARITIES = ("descriptor", "image")
_MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """SplitMix64 finaliser."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, *keys) -> int:
    """Deterministic 64-bit sub-seed: fold each key into the seed with FNV-1a + SplitMix64."""
    h = mix64(seed & _MASK64)
    for key in keys:
        h = mix64(h ^ _fnv1a(str(key)))
    return h


def source_tag(name: str) -> str:
    return f"source:{name}"


@dataclass(frozen=True)
class TransferSpec:
    fraction: float = 0.2
    seed: int = 0
    granularity: str = "descriptor"
    per_source_fractions: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError(f"transfer fraction must be in [0, 1], got {self.fraction}")
        if self.granularity not in GRANULARITIES:
            raise ValidationError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        for name, rho in (self.per_source_fractions or {}).items():
            if not 0.0 <= rho <= 1.0:
                raise ValidationError(f"fraction for source {name!r} must be in [0, 1], got {rho}")

    def fraction_for(self, source: str) -> float:
        return (self.per_source_fractions or {}).get(source, self.fraction)


@dataclass(frozen=True, eq=False)
class SourceSample:
    """Descriptors drawn from one source class pool; ``ids`` index into that pool."""

    class_id: int
    ids: np.ndarray
    pool: ClassPool

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def descriptors(self) -> np.ndarray:
        return self.pool.descriptors


def _empty_pool(class_id: int, dim: int, tag: str) -> ClassPool:
    return ClassPool(class_id, as_descriptor_array(np.zeros((0, dim))), np.zeros(0, np.int16), (tag,),
                     np.zeros(0, np.int64))


def class_permutation(n: int, seed: int, source: str, class_id: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, source, class_id))
    return rng.permutation(n)


def sample_source(src: DomainDataset, spec: TransferSpec) -> Dict[int, SourceSample]:
    """Draw ``round(rho * n)`` descriptors (or whole images) per class, uniformly without replacement."""
    require_valid(src)
    rho = spec.fraction_for(src.name)
    pools = pool_by_class(src, origin=source_tag(src.name))
    out: Dict[int, SourceSample] = {}
    for c in src.label_set:
        pool = pools.get(c)
        if pool is None:
            if rho > 0:
                warnings.warn(f"source {src.name!r} has no descriptors for class {c}", stacklevel=2)
            out[c] = SourceSample(c, np.zeros(0, np.int64), _empty_pool(c, src.dim, source_tag(src.name)))
            continue
        if spec.granularity == "descriptor":
            perm = class_permutation(len(pool), spec.seed, src.name, c)
            ids = perm[:round_half_up(rho * len(pool))]
        else:
            bag_ids = np.unique(pool.bag_index)
            perm = class_permutation(len(bag_ids), spec.seed, src.name, c)
            chosen = bag_ids[perm[:round_half_up(rho * len(bag_ids))]]
            ids = np.concatenate([np.flatnonzero(pool.bag_index == b) for b in chosen]) if len(chosen) \
                else np.zeros(0, np.int64)
        ids = ids.astype(np.int64)
        sub = ClassPool(c, as_descriptor_array(pool.descriptors[ids].reshape(-1, src.dim)),
                        pool.origin[ids], pool.origin_tags, pool.bag_index[ids])
        out[c] = SourceSample(c, ids, sub)
    return out


@dataclass(frozen=True)
class AdaptedCounts:
    n_target: int
    n_source: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.n_target + sum(self.n_source.values())


def merged_pools(tgt_labeled: DomainDataset, sources: Sequence[DomainDataset],
                 spec: TransferSpec) -> Dict[int, ClassPool]:
    """Per class: the whole target pool followed by each source's sample, in source order."""
    require_valid(tgt_labeled)
    check_label_sets(tgt_labeled, *sources)
    check_dims(tgt_labeled, *sources)
    names = [s.name for s in sources]
    if len(set(names)) != len(names) or TARGET_TAG in [source_tag(n) for n in names]:
        raise ValidationError(f"source names must be distinct: {names}")
    target = pool_by_class(tgt_labeled, origin=TARGET_TAG)
    samples = [sample_source(s, spec) for s in sources]
    merged = {}
    for c in tgt_labeled.label_set:
        # empty parts still register their tag, so zero counts stay visible
        parts = [target.get(c) or _empty_pool(c, tgt_labeled.dim, TARGET_TAG)] + [smp[c].pool for smp in samples]
        merged[c] = ClassPool.concat(c, parts, tgt_labeled.dim)
    return merged


def build_adapted_classifier(tgt_labeled: DomainDataset, sources: Sequence[DomainDataset],
                             spec: TransferSpec, backend: str = "kdtree", distance_variant: str = "l2sq",
                             threads: int = 1) -> Classifier:
    pools = merged_pools(tgt_labeled, sources, spec)
    return Classifier.from_pools(pools, tgt_labeled.dim, tgt_labeled.label_set, backend,
                                 distance_variant, threads)


def adapted_counts(clf: Classifier) -> Dict[int, AdaptedCounts]:
    out = {}
    for c, s in clf.supports.items():
        counts = s.counts()
        n_source = {tag.split(":", 1)[1]: n for tag, n in counts.items() if tag.startswith("source:")}
        out[c] = AdaptedCounts(counts.get(TARGET_TAG, 0), n_source)
    return out


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    seed: int
    accuracy: float
    n_target: int
    n_source_total: int
    distance_variant: str
    augment_mode: str = "none"

    FIELDS = ("fraction", "seed", "accuracy", "n_target", "n_source_total", "distance_variant",
              "augment_mode")

    def as_row(self) -> List:
        return [self.fraction, self.seed, f"{self.accuracy:.6f}", self.n_target, self.n_source_total,
                self.distance_variant, self.augment_mode]


def check_disjoint(train: Sequence[DomainDataset], test: DomainDataset) -> None:
    seen = {base_image_id(b.image_id) for ds in train for b in ds.bags}
    overlap = sorted(seen & {base_image_id(b.image_id) for b in test.bags})
    if overlap:
        raise ValidationError(f"{len(overlap)} evaluation images also used for training", overlap[:5])


def transfer_sweep(tgt_labeled: DomainDataset, sources: Sequence[DomainDataset], fractions: Sequence[float],
                   seeds: Sequence[int], eval_set: DomainDataset, backend: str = "kdtree",
                   distance_variant: str = "l2sq", granularity: str = "descriptor",
                   augment_mode: str = "none", threads: int = 1) -> List[SweepRow]:
    """One classifier per (fraction, seed), evaluated on ``eval_set``; rows ordered fraction-major."""
    for rho in fractions:
        if not 0.0 <= rho <= 1.0:
            raise ValidationError(f"fraction {rho} outside [0, 1]")
    check_disjoint([tgt_labeled], eval_set)
    rows = []
    for rho in fractions:
        for seed in seeds:
            spec = TransferSpec(rho, seed, granularity)
            clf = build_adapted_classifier(tgt_labeled, sources, spec, backend, distance_variant, threads)
            res = classify_batch(eval_set.bags, clf)
            counts = adapted_counts(clf).values()
            rows.append(SweepRow(rho, seed, res.accuracy if res.accuracy is not None else float("nan"),
                                 sum(c.n_target for c in counts),
                                 sum(sum(c.n_source.values()) for c in counts),
                                 distance_variant, augment_mode))
            log.debug("sweep rho=%s seed=%s acc=%s", rho, seed, rows[-1].accuracy)
    return rows
