"""Naive Bayes Nearest Neighbor: image-to-class distances and argmin classification."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numba as nb
import numpy as np

from .nn_index import NNIndex
from .types import (ClassificationResult, ClassPool, DescriptorBag, DomainDataset, NBNNError,
                    ValidationError, pool_by_class)

DISTANCE_VARIANTS = ("l2sq", "l2")


class EmptySupportError(NBNNError):
    pass


@nb.njit(cache=True)
def _segment_sums(values, offsets):
    # sequential accumulation in descriptor order, one sum per bag
    out = np.empty(offsets.shape[0] - 1)
    for b in range(offsets.shape[0] - 1):
        acc = 0.0
        for i in range(offsets[b], offsets[b + 1]):
            acc += values[i]
        out[b] = acc
    return out


def _finish(sq: np.ndarray, variant: str) -> np.ndarray:
    if variant == "l2sq":
        return sq
    if variant == "l2":
        return np.sqrt(sq)
    raise ValueError(f"unknown distance variant {variant!r}; expected one of {DISTANCE_VARIANTS}")


@dataclass(frozen=True, eq=False)
class SupportSet:
    """One class's descriptor pool together with its nearest-neighbour index."""

    class_id: int
    pool: ClassPool
    index: NNIndex

    @classmethod
    def build(cls, pool: ClassPool, backend: str = "kdtree") -> "SupportSet":
        if len(pool) == 0:
            raise EmptySupportError(f"class {pool.class_id} has an empty support pool")
        return cls(pool.class_id, pool, NNIndex(pool.descriptors, backend))

    def __len__(self) -> int:
        return len(self.pool)

    @property
    def dim(self) -> int:
        return self.index.dim

    @property
    def provenance(self) -> List[str]:
        return self.pool.provenance

    def counts(self) -> Dict[str, int]:
        return self.pool.counts()


@dataclass(frozen=True, eq=False)
class Classifier:
    supports: Mapping[int, SupportSet]
    dim: int
    distance_variant: str = "l2sq"
    threads: int = 1

    def __post_init__(self):
        if self.distance_variant not in DISTANCE_VARIANTS:
            raise ValueError(f"unknown distance variant {self.distance_variant!r}")
        if not self.supports:
            raise EmptySupportError("classifier has no classes")
        for c, s in self.supports.items():
            if len(s) == 0:
                raise EmptySupportError(f"class {c} has an empty support pool")
            if s.dim != self.dim:
                raise ValidationError(f"class {c} support dim {s.dim} != classifier dim {self.dim}")
        object.__setattr__(self, "supports", dict(sorted(self.supports.items())))

    @property
    def classes(self) -> List[int]:
        return list(self.supports)

    def counts(self) -> Dict[int, Dict[str, int]]:
        return {c: s.counts() for c, s in self.supports.items()}

    @classmethod
    def from_pools(cls, pools: Mapping[int, ClassPool], dim: int, label_set: Sequence[int] = (),
                   backend: str = "kdtree", distance_variant: str = "l2sq", threads: int = 1) -> "Classifier":
        missing = [c for c in label_set if c not in pools or len(pools[c]) == 0]
        if missing:
            raise EmptySupportError(f"classes without support descriptors: {missing}")
        supports = {c: SupportSet.build(p, backend) for c, p in pools.items()}
        return cls(supports, dim, distance_variant, threads)

    @classmethod
    def from_dataset(cls, ds: DomainDataset, backend: str = "kdtree", distance_variant: str = "l2sq",
                     threads: int = 1) -> "Classifier":
        return cls.from_pools(pool_by_class(ds), ds.dim, ds.label_set, backend, distance_variant, threads)


def df2c(f, s: SupportSet, variant: str = "l2sq") -> float:
    """Distance from one descriptor to its nearest neighbour in the class pool."""
    if len(s) == 0:
        raise EmptySupportError(f"class {s.class_id} has an empty support pool")
    sq = s.index.nearest(f).distance
    return float(_finish(np.array([sq]), variant)[0])


def di2c(bag: DescriptorBag, s: SupportSet, variant: str = "l2sq") -> float:
    """Image-to-class distance: unnormalised sum of per-descriptor NN distances."""
    if len(bag) == 0:
        raise ValidationError(f"bag {bag.image_id!r} is empty")
    _, sq = s.index.query(bag.descriptors)
    return float(_segment_sums(_finish(sq, variant), np.array([0, len(bag)]))[0])


def _result(bag: DescriptorBag, dists: Dict[int, float]) -> ClassificationResult:
    # dict is in ascending class order, so min() keeps the smallest id on ties
    predicted = min(dists, key=dists.__getitem__)
    positive = dists[predicted]
    negative = {c: d for c, d in dists.items() if c != predicted}
    return ClassificationResult(predicted, dists, positive, negative, bag.label, bag.image_id, len(bag))


def _check_bags(bags: Sequence[DescriptorBag], clf: Classifier) -> None:
    for bag in bags:
        if len(bag) == 0:
            raise ValidationError(f"bag {bag.image_id!r} is empty")
        if bag.dim != clf.dim:
            raise ValidationError(f"bag {bag.image_id!r} dim {bag.dim} != classifier dim {clf.dim}")


def classify(bag: DescriptorBag, clf: Classifier) -> ClassificationResult:
    """Predict argmin_c D_I2C(bag, c), ties to the smallest class id."""
    _check_bags([bag], clf)
    dists = {c: di2c(bag, s, clf.distance_variant) for c, s in clf.supports.items()}
    return _result(bag, dists)


@dataclass
class BatchResult:
    results: List[ClassificationResult]
    accuracy: Optional[float] = None
    n_correct: int = 0

    @property
    def predictions(self) -> List[int]:
        return [r.predicted for r in self.results]

    def __len__(self) -> int:
        return len(self.results)


def i2c_matrix(bags: Sequence[DescriptorBag], clf: Classifier, threads: Optional[int] = None) -> np.ndarray:
    """D_I2C for every (bag, class) pair, shape (n_bags, n_classes) in ``clf.classes`` order."""
    threads = clf.threads if threads is None else threads
    _check_bags(bags, clf)
    if not bags:
        return np.zeros((0, len(clf.supports)))
    queries = np.concatenate([b.descriptors for b in bags])
    offsets = np.concatenate([[0], np.cumsum([len(b) for b in bags])]).astype(np.int64)
    supports = list(clf.supports.values())

    def one_class(s: SupportSet) -> np.ndarray:
        _, sq = s.index.query(queries)
        return _segment_sums(_finish(sq, clf.distance_variant), offsets)

    if threads > 1:
        # split over bags, not classes, so each worker keeps its segments whole
        chunks = np.array_split(np.arange(len(bags)), threads)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda idx: i2c_matrix([bags[i] for i in idx], clf, 1),
                                [c for c in chunks if len(c)]))
        return np.concatenate(parts)
    return np.stack([one_class(s) for s in supports], axis=1)


def classify_batch(bags: Sequence[DescriptorBag], clf: Classifier, threads: Optional[int] = None) -> BatchResult:
    """Classify many bags; accuracy is None for an empty batch or when bags carry no labels."""
    mat = i2c_matrix(bags, clf, threads)
    classes = clf.classes
    results = [_result(bag, {c: float(v) for c, v in zip(classes, row)}) for bag, row in zip(bags, mat)]
    if not results:
        return BatchResult([], None, 0)
    n_correct = sum(r.predicted == r.label for r in results)
    return BatchResult(results, n_correct / len(results), n_correct)


def accuracy(results: Sequence[ClassificationResult]) -> Optional[float]:
    if not results:
        return None
    return sum(r.predicted == r.label for r in results) / len(results)
