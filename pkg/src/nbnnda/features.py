"""Image loading, width normalisation, 10-crop augmentation and a dense 64-d gradient descriptor.

The descriptor is a SURF-like stand-in: each patch is split into a 4x4 grid of
cells and every cell contributes (sum dx, sum dy, sum |dx|, sum |dy|).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .types import DescriptorBag, ValidationError

LUMA = (0.299, 0.587, 0.114)
CROP_FRACTION = 0.875
DEFAULT_WIDTH = 256
DEFAULT_PATCH = 32
DEFAULT_STRIDE = 16
AUG_SEP = "@aug"


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Row-major grayscale intensities in [0, 1]; ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValidationError(f"gray image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixel intensities must be finite and within [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class CropRect:
    x: int
    y: int
    width: int
    height: int


@dataclass(frozen=True, eq=False)
class AugmentSet:
    variants: Tuple[GrayImage, ...]
    recipe: Tuple[Tuple[CropRect, bool], ...]


def _read_pgm(data: bytes) -> np.ndarray:
    magic = data[:2]
    tokens: List[bytes] = []
    pos = 2
    # header: width, height, maxval; '#' comments run to end of line
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValidationError("truncated PGM header")
        tokens.append(data[start:pos])
    width, height, maxval = (int(t) for t in tokens)
    if not (0 < maxval < 65536) or width < 1 or height < 1:
        raise ValidationError(f"bad PGM header {width}x{height} maxval {maxval}")
    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace before raster
        dtype = ">u2" if maxval > 255 else "u1"
        raw = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    else:
        raw = np.array(data[pos:].split()[:n], dtype=np.int64)
        if raw.size != n:
            raise ValidationError("truncated PGM raster")
    return raw.reshape(height, width).astype(np.float64) / maxval


def load_gray(path) -> GrayImage:
    """Load PGM (P2/P5) exactly, or any Pillow-readable file via luma conversion."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from None
    if data[:2] in (b"P2", b"P5"):
        return GrayImage(np.clip(_read_pgm(data), 0.0, 1.0))
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im if im.mode != "P" else im.convert("RGB"))
            mode = im.mode
    except UnidentifiedImageError:
        raise ValidationError(f"unsupported image format: {path}") from None
    if mode in ("I;16", "I"):
        return GrayImage(np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0))
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr[..., :3] @ np.array(LUMA) if arr.shape[2] >= 3 else arr[..., 0]
    return GrayImage(np.clip(arr, 0.0, 1.0))


def save_pgm(img: GrayImage, path) -> None:
    raster = np.clip(np.floor(img.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (img.width, img.height) + raster.tobytes())


def _bilinear_axis(n_in: int, n_out: int):
    # pixel-centre alignment, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_width(img: GrayImage, target_width: int = DEFAULT_WIDTH) -> GrayImage:
    """Bilinear resize to ``target_width``, height scaled to keep aspect (at least 1)."""
    h, w = img.height, img.width
    new_h = max(1, round_half_up(h * target_width / w))
    if (new_h, target_width) == (h, w):
        return img
    y0, y1, fy = _bilinear_axis(h, new_h)
    x0, x1, fx = _bilinear_axis(w, target_width)
    p = img.pixels
    top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
    bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return GrayImage(np.clip(out, 0.0, 1.0))


def crop_recipe(width: int, height: int, fraction: float = CROP_FRACTION):
    cw, ch = round_half_up(fraction * width), round_half_up(fraction * height)
    corners = [(0, 0), (width - cw, 0), (0, height - ch), (width - cw, height - ch),
               ((width - cw) // 2, (height - ch) // 2)]
    return tuple((CropRect(x, y, cw, ch), flip) for x, y in corners for flip in (False, True))


def apply_recipe(img: GrayImage, rect: CropRect, flip: bool) -> GrayImage:
    px = img.pixels[rect.y:rect.y + rect.height, rect.x:rect.x + rect.width]
    return GrayImage(px[:, ::-1] if flip else px)


def hflip(img: GrayImage) -> GrayImage:
    return GrayImage(img.pixels[:, ::-1])


def augment10(img: GrayImage) -> AugmentSet:
    """Four corner crops and a centre crop, each plain then mirrored: (TL, TR, BL, BR, C) x (plain, flip)."""
    if img.width < 8 or img.height < 8:
        raise ValidationError(f"image {img.width}x{img.height} too small to crop (need >= 8x8)")
    recipe = crop_recipe(img.width, img.height)
    return AugmentSet(tuple(apply_recipe(img, r, f) for r, f in recipe), recipe)


def grid_positions(size: int, patch: int, stride: int) -> np.ndarray:
    if size < patch:
        return np.zeros(0, dtype=int)
    return np.arange(0, size - patch + 1, stride)


def dense_descriptors(img: GrayImage, patch: int = DEFAULT_PATCH, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    """64-d descriptors on a regular grid, one row per node (row-major over the grid)."""
    if patch < 4 or patch % 4 or stride < 1:
        raise ValidationError(f"patch must be a positive multiple of 4 and stride >= 1 (got {patch}, {stride})")
    ys = grid_positions(img.height, patch, stride)
    xs = grid_positions(img.width, patch, stride)
    if ys.size == 0 or xs.size == 0:
        raise ValidationError(f"no {patch}px patches fit in a {img.width}x{img.height} image")
    dy, dx = np.gradient(img.pixels)
    cell = patch // 4
    h, w = img.height, img.width
    stats = np.stack([dx, dy, np.abs(dx), np.abs(dy)], axis=-1)
    # cell sums via an integral image: one lookup per cell corner
    integral = np.zeros((h + 1, w + 1, 4))
    integral[1:, 1:] = stats.cumsum(0).cumsum(1)
    offs = np.arange(4) * cell
    cy = (ys[:, None] + offs[None, :])  # (ny, 4)
    cx = (xs[:, None] + offs[None, :])  # (nx, 4)
    Y0 = cy[:, None, :, None]
    X0 = cx[None, :, None, :]
    sums = (integral[Y0 + cell, X0 + cell] - integral[Y0, X0 + cell]
            - integral[Y0 + cell, X0] + integral[Y0, X0])  # (ny, nx, 4, 4, 4)
    desc = sums.reshape(ys.size * xs.size, 64)
    norms = np.linalg.norm(desc, axis=1)
    nz = norms > 1e-12
    desc[nz] /= norms[nz, None]
    desc[~nz] = 0.0
    return desc


def extract_dense(img: GrayImage, patch: int = DEFAULT_PATCH, stride: int = DEFAULT_STRIDE,
                  label: int = 0, domain: str = "", image_id: str = "") -> DescriptorBag:
    return DescriptorBag(dense_descriptors(img, patch, stride), label, domain, image_id)


def variant_id(image_id: str, k: int) -> str:
    return f"{image_id}{AUG_SEP}{k}"


def base_image_id(image_id: str) -> str:
    """Strip an augmentation suffix: ``"img7@aug3" -> "img7"``."""
    return image_id.split(AUG_SEP, 1)[0]


def is_variant(image_id: str) -> bool:
    return AUG_SEP in image_id


def image_bags(img: GrayImage, label: int, image_id: str, domain: str = "", augment: bool = False,
               width: int = DEFAULT_WIDTH, patch: int = DEFAULT_PATCH, stride: int = DEFAULT_STRIDE
               ) -> List[DescriptorBag]:
    """Resize, then extract the plain bag and, with ``augment``, its ten crop/flip variant bags."""
    img = resize_width(img, width)
    bags = [extract_dense(img, patch, stride, label, domain, image_id)]
    if augment:
        for k, v in enumerate(augment10(img).variants):
            bags.append(extract_dense(v, patch, stride, label, domain, variant_id(image_id, k)))
    return bags
