"""Synthetic domain-shift benchmarks and a loop-based reference NBNN.

Descriptor-level generator: target class ``c`` draws N(mu_c, sigma^2 I); the
source draws N(kappa*mu_c + delta + offset_c, (kappa*sigma)^2 I). Class means
sit on random orthonormal directions with pairwise distance
``separation * sigma``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .adaptation import derive_seed
from .features import GrayImage, image_bags
from .types import DescriptorBag, DomainDataset, NBNNError, ValidationError


@dataclass(frozen=True)
class ShiftSpec:
    n_classes: int = 10
    dim: int = 64
    sigma: float = 1.0
    separation: float = 4.0
    shift: float = 1.0  # |delta| in units of sigma
    kappa: float = 1.0
    descriptors_per_image: int = 50
    source_images_per_class: int = 20
    target_labeled_per_class: int = 3
    target_test_per_class: int = 10
    seed: int = 0
    class_offset: float = 0.0  # per-class source offset norm (conditional shift), units of sigma
    means: Optional[Tuple[Tuple[float, ...], ...]] = None
    delta: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        bad = []
        if self.n_classes < 2:
            bad.append("n_classes >= 2")
        if self.dim < 1:
            bad.append("dim >= 1")
        if not self.sigma > 0 or not self.kappa > 0:
            bad.append("sigma > 0 and kappa > 0")
        if self.means is None and self.n_classes > self.dim:
            bad.append("n_classes <= dim for orthogonal means")
        if min(self.descriptors_per_image, self.source_images_per_class, self.target_labeled_per_class,
               self.target_test_per_class) < 0:
            bad.append("non-negative counts")
        values = [self.sigma, self.separation, self.shift, self.kappa, self.class_offset]
        if not np.isfinite(values).all():
            bad.append("finite parameters")
        if bad:
            raise ValidationError("invalid ShiftSpec", bad)

    def describe(self) -> Dict:
        return {k: v for k, v in asdict(self).items() if k not in ("means", "delta")}


def class_means(spec: ShiftSpec) -> np.ndarray:
    if spec.means is not None:
        return np.asarray(spec.means, dtype=np.float64)
    rng = np.random.default_rng(derive_seed(spec.seed, "means"))
    q, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.n_classes)))
    return q.T * (spec.separation * spec.sigma / np.sqrt(2.0))


def shift_vector(spec: ShiftSpec) -> np.ndarray:
    if spec.delta is not None:
        return np.asarray(spec.delta, dtype=np.float64)
    rng = np.random.default_rng(derive_seed(spec.seed, "delta"))
    u = rng.normal(size=spec.dim)
    return u / np.linalg.norm(u) * spec.shift * spec.sigma


def _draw(rng, n_images, n_desc, mean, scale):
    return [mean + scale * rng.normal(size=(n_desc, mean.size)) for _ in range(n_images)]


def gen_pair(spec: ShiftSpec) -> Tuple[DomainDataset, DomainDataset, DomainDataset]:
    """Return ``(source, target_labeled, target_test)``; each class uses its own sub-seed."""
    mu = class_means(spec)
    delta = shift_vector(spec)
    labels = tuple(range(1, spec.n_classes + 1))
    src, lab, test = [], [], []
    for k, c in enumerate(labels):
        rng = np.random.default_rng(derive_seed(spec.seed, "class", c))
        off = np.zeros(spec.dim)
        if spec.class_offset:
            u = rng.normal(size=spec.dim)
            off = u / np.linalg.norm(u) * spec.class_offset * spec.sigma
        s_mean = spec.kappa * mu[k] + delta + off
        for i, x in enumerate(_draw(rng, spec.source_images_per_class, spec.descriptors_per_image, s_mean,
                                    spec.kappa * spec.sigma)):
            src.append(DescriptorBag(x, c, "source", f"s-c{c}-{i}"))
        n_t = spec.target_labeled_per_class + spec.target_test_per_class
        for i, x in enumerate(_draw(rng, n_t, spec.descriptors_per_image, mu[k], spec.sigma)):
            bag = DescriptorBag(x, c, "target", f"t-c{c}-{i}")
            (lab if i < spec.target_labeled_per_class else test).append(bag)
    mk = lambda name, bags: DomainDataset(name, labels, tuple(bags), spec.dim)
    return mk("source", src), mk("target", lab), mk("target", test)


def gen_target(spec: ShiftSpec) -> DomainDataset:
    """Labeled and test target images as one dataset, for protocols that split it themselves."""
    _, lab, test = gen_pair(spec)
    return lab.subset(lab.bags + test.bags)


def oracle_nbnn(bags: Sequence[DescriptorBag], pools: Mapping[int, np.ndarray],
                variant: str = "l2sq") -> Tuple[List[int], np.ndarray]:
    """Reference NBNN with explicit loops and no index.

    Cost is O(bags * descriptors * classes * pool), so keep instances small.
    Only the innermost scan over pool points is vectorised.
    Returns predictions and the (n_bags, n_classes) I2C matrix in sorted class order.
    """
    classes = sorted(pools)
    for c in classes:
        if len(pools[c]) == 0:
            raise NBNNError(f"class {c} pool is empty")
    mat = np.zeros((len(bags), len(classes)))
    preds = []
    arrays = [np.asarray(pools[c], dtype=np.float64) for c in classes]
    for b, bag in enumerate(bags):
        for j, pool in enumerate(arrays):
            total = 0.0
            for f in bag.descriptors:
                best = float(np.min(np.sum((pool - f) ** 2, axis=1)))
                total += best if variant == "l2sq" else best ** 0.5
            mat[b, j] = total
        best_j = 0
        for j in range(1, len(classes)):
            if mat[b, j] < mat[b, best_j]:
                best_j = j
        preds.append(classes[best_j])
    return preds, mat


# --- synthetic images -------------------------------------------------------

@dataclass(frozen=True)
class ImageShiftSpec:
    """Textured-blob images; classes differ in grating orientation and frequency.

    Orientations are drawn as +theta or -theta with equal odds, so the class
    distribution is mirror-symmetric and horizontal flips preserve the class.

    The source domain renders with lower contrast, a brightness offset and
    extra noise relative to the target.
    """

    n_classes: int = 5
    width: int = 256
    height: int = 192
    blobs: int = 6
    source_images_per_class: int = 20
    target_images_per_class: int = 13
    source_contrast: float = 0.6
    source_brightness: float = 0.1
    source_noise: float = 0.06
    target_noise: float = 0.02
    orientation_jitter: float = 0.35
    seed: int = 0


def render_image(spec: ImageShiftSpec, label: int, rng: np.random.Generator, source: bool) -> GrayImage:
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    contrast = spec.source_contrast if source else 1.0
    img = np.full((spec.height, spec.width), 0.5)
    theta0 = 0.5 * np.pi * (label - 1) / max(spec.n_classes - 1, 1)
    freq = 0.12 + 0.03 * ((label - 1) % 3)
    for _ in range(spec.blobs):
        cx, cy = rng.uniform(0, spec.width), rng.uniform(0, spec.height)
        r = rng.uniform(14, 40)
        th = rng.choice((-1.0, 1.0)) * theta0 + rng.normal(0, spec.orientation_jitter)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        wave = np.sin(freq * (xx[mask] * np.cos(th) + yy[mask] * np.sin(th)) + rng.uniform(0, 2 * np.pi))
        img[mask] = 0.5 + 0.4 * contrast * wave
    if source:
        img = img + spec.source_brightness
    noise = spec.source_noise if source else spec.target_noise
    img = img + noise * rng.normal(size=img.shape)
    return GrayImage(np.clip(img, 0.0, 1.0))


def gen_image_domains(spec: ImageShiftSpec, augment: bool = True, patch: int = 32, stride: int = 16
                      ) -> Tuple[DomainDataset, DomainDataset]:
    """Source and target datasets of dense-descriptor bags from rendered images.

    With ``augment`` each image contributes its plain bag plus ten variant bags.
    """
    labels = tuple(range(1, spec.n_classes + 1))
    out = []
    for name, n_img, is_src in (("source", spec.source_images_per_class, True),
                                ("target", spec.target_images_per_class, False)):
        bags = []
        for c in labels:
            rng = np.random.default_rng(derive_seed(spec.seed, name, c))
            for i in range(n_img):
                img = render_image(spec, c, rng, is_src)
                bags += image_bags(img, c, f"{name[0]}-c{c}-{i}", name, augment, spec.width, patch, stride)
        out.append(DomainDataset(name, labels, tuple(bags), 64))
    return out[0], out[1]
