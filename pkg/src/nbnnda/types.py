"""Shared domain types: descriptor bags, domain datasets, class pools and results."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

TARGET_TAG = "target"


class NBNNError(Exception):
    """Base class for library errors."""


class ValidationError(NBNNError, ValueError):
    """Input data violates a structural invariant."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message if not violations else f"{message}: " + "; ".join(violations))
        self.violations = list(violations)


class LabelSetMismatch(ValidationError):
    pass


def as_descriptor_array(values, dim: Optional[int] = None) -> np.ndarray:
    """Coerce to a read-only float64 array of shape (n, dim)."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        if arr.size == 0 and dim is not None:
            arr = arr.reshape(0, dim)
        else:
            arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValidationError(f"descriptors must be 2-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DescriptorBag:
    """Local descriptors of one image (rows of ``descriptors``) with its label."""

    descriptors: np.ndarray
    label: int
    domain: str = ""
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "descriptors", as_descriptor_array(self.descriptors))
        object.__setattr__(self, "label", int(self.label))

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    def with_domain(self, domain: str) -> "DescriptorBag":
        return DescriptorBag(self.descriptors, self.label, domain, self.image_id)


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """A named collection of bags sharing one label set (a source or target domain)."""

    name: str
    label_set: Tuple[int, ...]
    bags: Tuple[DescriptorBag, ...]
    dim: int
    label_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "label_set", tuple(int(c) for c in self.label_set))
        object.__setattr__(self, "bags", tuple(self.bags))
        if self.label_names is not None:
            object.__setattr__(self, "label_names", tuple(self.label_names))

    @classmethod
    def from_bags(cls, name: str, bags: Iterable[DescriptorBag], label_set=None, dim=None,
                  label_names=None) -> "DomainDataset":
        bags = tuple(b if b.domain == name else b.with_domain(name) for b in bags)
        if label_set is None:
            label_set = sorted({b.label for b in bags})
        if dim is None:
            if not bags:
                raise ValidationError("cannot infer dim of an empty dataset")
            dim = bags[0].dim
        return cls(name, tuple(label_set), bags, int(dim), label_names)

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def n_descriptors(self) -> int:
        return sum(len(b) for b in self.bags)

    def bags_of(self, label: int) -> List[DescriptorBag]:
        return [b for b in self.bags if b.label == label]

    def subset(self, bags: Iterable[DescriptorBag], name: Optional[str] = None) -> "DomainDataset":
        return DomainDataset(name or self.name, self.label_set, tuple(bags), self.dim, self.label_names)


@dataclass(frozen=True, eq=False)
class ClassPool:
    """Flat descriptor pool of one class with a per-descriptor origin code.

    ``origin[i]`` indexes into ``origin_tags``; ``bag_index[i]`` is the
    position of the contributing bag in its source dataset.
    """

    class_id: int
    descriptors: np.ndarray
    origin: np.ndarray
    origin_tags: Tuple[str, ...]
    bag_index: np.ndarray

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def provenance(self) -> List[str]:
        return [self.origin_tags[k] for k in self.origin]

    def counts(self) -> Dict[str, int]:
        tally = np.bincount(self.origin, minlength=len(self.origin_tags))
        return {tag: int(n) for tag, n in zip(self.origin_tags, tally)}

    @classmethod
    def concat(cls, class_id: int, parts: Sequence["ClassPool"], dim: int) -> "ClassPool":
        tags: List[str] = []
        descs, origins, bag_idx = [], [], []
        for part in parts:
            remap = np.array([_tag_code(tags, t) for t in part.origin_tags], dtype=np.int16)
            descs.append(part.descriptors)
            origins.append(remap[part.origin] if len(part) else np.zeros(0, np.int16))
            bag_idx.append(part.bag_index)
        if not descs:
            return cls(class_id, as_descriptor_array(np.zeros((0, dim))), np.zeros(0, np.int16), (),
                       np.zeros(0, np.int64))
        return cls(class_id, as_descriptor_array(np.concatenate(descs).reshape(-1, dim)),
                   np.concatenate(origins).astype(np.int16), tuple(tags),
                   np.concatenate(bag_idx).astype(np.int64))


def _tag_code(tags: List[str], tag: str) -> int:
    if tag not in tags:
        tags.append(tag)
    return tags.index(tag)


@dataclass(frozen=True)
class ClassificationResult:
    predicted: int
    distances: Mapping[int, float]
    positive_distance: float
    negative_distances: Mapping[int, float]
    label: Optional[int] = None
    image_id: str = ""
    n_descriptors: int = 0

    @property
    def correct(self) -> Optional[bool]:
        return None if self.label is None else self.predicted == self.label

    def mean_distances(self) -> Dict[int, float]:
        """Per-descriptor average I2C distance; diagnostic only, never used to predict."""
        n = max(self.n_descriptors, 1)
        return {c: d / n for c, d in self.distances.items()}


def validate_dataset(ds: DomainDataset) -> List[str]:
    """Return every invariant violation found in ``ds``; an empty list means well-formed."""
    problems: List[str] = []
    if ds.dim < 1:
        problems.append(f"dataset {ds.name!r}: dim must be >= 1, got {ds.dim}")
    if len(set(ds.label_set)) != len(ds.label_set):
        problems.append(f"dataset {ds.name!r}: duplicate class ids in label set")
    if ds.label_names is not None and len(ds.label_names) != len(ds.label_set):
        problems.append(f"dataset {ds.name!r}: {len(ds.label_names)} label names for "
                        f"{len(ds.label_set)} classes")
    labels = set(ds.label_set)
    for i, bag in enumerate(ds.bags):
        where = f"bag {i} ({bag.image_id!r})"
        if len(bag) == 0:
            problems.append(f"{where}: empty bag")
        if bag.dim != ds.dim:
            problems.append(f"{where}: dim mismatch ({bag.dim} != {ds.dim})")
        if bag.label not in labels:
            problems.append(f"{where}: unknown label {bag.label}")
        if len(bag) and not np.isfinite(bag.descriptors).all():
            problems.append(f"{where}: non-finite descriptor values")
    return problems


def require_valid(ds: DomainDataset) -> None:
    problems = validate_dataset(ds)
    if problems:
        raise ValidationError(f"invalid dataset {ds.name!r}", problems)


def check_label_sets(*datasets: DomainDataset) -> None:
    """Raise if the datasets do not all share one label set (order-insensitive)."""
    if not datasets:
        return
    ref = frozenset(datasets[0].label_set)
    for ds in datasets[1:]:
        if frozenset(ds.label_set) != ref:
            names = sorted(d.name for d in datasets)
            raise LabelSetMismatch(f"label sets differ between datasets {names}")


def check_dims(*datasets: DomainDataset) -> None:
    dims = {ds.dim for ds in datasets}
    if len(dims) > 1:
        raise ValidationError(f"descriptor dims differ across datasets: {sorted(dims)}")


def pool_by_class(ds: DomainDataset, origin: str = TARGET_TAG) -> Dict[int, ClassPool]:
    """Group every descriptor of ``ds`` under its bag's label.

    Classes with no bags get no entry. Each descriptor is tagged with ``origin``.
    """
    require_valid(ds)
    grouped: Dict[int, List[int]] = {}
    for i, bag in enumerate(ds.bags):
        grouped.setdefault(bag.label, []).append(i)
    pools = {}
    for c in ds.label_set:
        idx = grouped.get(c)
        if not idx:
            continue
        descs = np.concatenate([ds.bags[i].descriptors for i in idx])
        bag_index = np.concatenate([np.full(len(ds.bags[i]), i, np.int64) for i in idx])
        pools[c] = ClassPool(c, as_descriptor_array(descs), np.zeros(len(descs), np.int16),
                             (origin,), bag_index)
    return pools
