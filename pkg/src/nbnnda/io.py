"""Descriptor files (binary ``NBD1`` and CSV) and plain-text dataset manifests.

Binary layout, little-endian::

    b"NBD1" | u32 dim | u32 n_bags
    per bag: u32 label | u32 n_desc | u16 id_len | id bytes (UTF-8) | n_desc*dim f32

Manifest layout, one ``key = value`` per line, ``#`` comments::

    name = amazon
    labels = back_pack, bike, calculator
    file = amazon_part1.nbd
    file = amazon_part2.csv
"""
from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .types import DescriptorBag, DomainDataset, ValidationError

MAGIC = b"NBD1"
MAX_ID_BYTES = 0xFFFF
PathLike = Union[str, Path]


def encode_dataset(ds: DomainDataset) -> bytes:
    parts = [MAGIC, struct.pack("<II", ds.dim, len(ds.bags))]
    for bag in ds.bags:
        ident = bag.image_id.encode("utf-8")
        if len(ident) > MAX_ID_BYTES:
            raise ValidationError(f"image_id longer than {MAX_ID_BYTES} bytes")
        if bag.dim != ds.dim and len(bag):
            raise ValidationError(f"bag {bag.image_id!r} has dim {bag.dim}, dataset dim {ds.dim}")
        parts.append(struct.pack("<IIH", bag.label, len(bag), len(ident)))
        parts.append(ident)
        parts.append(np.ascontiguousarray(bag.descriptors, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes, name: str = "", label_set=None, label_names=None) -> DomainDataset:
    if buf[:4] != MAGIC:
        raise ValidationError("not an NBD1 descriptor file (bad magic)")
    try:
        dim, n_bags = struct.unpack_from("<II", buf, 4)
        off = 12
        bags = []
        for _ in range(n_bags):
            label, count, id_len = struct.unpack_from("<IIH", buf, off)
            off += 10
            ident = buf[off:off + id_len].decode("utf-8")
            off += id_len
            nbytes = 4 * count * dim
            if off + nbytes > len(buf):
                raise ValidationError("truncated descriptor block")
            values = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=off)
            off += nbytes
            bags.append(DescriptorBag(values.reshape(count, dim).astype(np.float64), label, name, ident))
    except struct.error as exc:
        raise ValidationError(f"truncated descriptor file: {exc}") from None
    if off != len(buf):
        raise ValidationError(f"{len(buf) - off} trailing bytes after last bag")
    if label_set is None:
        label_set = sorted({b.label for b in bags})
    return DomainDataset(name, tuple(label_set), tuple(bags), dim, label_names)


def write_nbd(ds: DomainDataset, path: PathLike) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def read_nbd(path: PathLike, name: Optional[str] = None, **kw) -> DomainDataset:
    path = Path(path)
    return decode_dataset(path.read_bytes(), name or path.stem, **kw)


def read_csv(path: PathLike, name: Optional[str] = None, label_set=None, label_names=None) -> DomainDataset:
    """Read ``image_id,label,v0,...`` rows; consecutive or not, rows sharing an image_id form one bag."""
    path = Path(path)
    name = name or path.stem
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["image_id", "label"] or len(header) < 3:
            raise ValidationError(f"{path}: expected header image_id,label,v0,...")
        dim = len(header) - 2
        rows: Dict[str, List] = {}
        labels: Dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise ValidationError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(row)}")
            ident, label = row[0], int(row[1])
            if labels.setdefault(ident, label) != label:
                raise ValidationError(f"{path}:{lineno}: image {ident!r} has two labels")
            rows.setdefault(ident, []).append([float(v) for v in row[2:]])
    bags = [DescriptorBag(np.asarray(v, np.float32).astype(np.float64), labels[k], name, k)
            for k, v in rows.items()]
    if label_set is None:
        label_set = sorted(set(labels.values()))
    return DomainDataset(name, tuple(label_set), tuple(bags), dim, label_names)


def write_csv(ds: DomainDataset, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label"] + [f"v{k}" for k in range(ds.dim)])
        for bag in ds.bags:
            for row in bag.descriptors.astype(np.float32):
                w.writerow([bag.image_id, bag.label] + [repr(float(v)) for v in row])


def read_descriptors(path: PathLike, name: Optional[str] = None, **kw) -> DomainDataset:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path, name, **kw)
    return read_nbd(path, name, **kw)


def write_descriptors(ds: DomainDataset, path: PathLike) -> None:
    if Path(path).suffix.lower() == ".csv":
        write_csv(ds, path)
    else:
        write_nbd(ds, path)


def parse_manifest(text: str) -> Dict[str, object]:
    out: Dict[str, object] = {"files": [], "extra": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"manifest line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "name":
            out["name"] = value
        elif key == "labels":
            out["labels"] = [s.strip() for s in value.split(",") if s.strip()]
        elif key == "file":
            out["files"].append(value)
        else:
            out["extra"][key] = value
    if "name" not in out:
        raise ValidationError("manifest has no 'name' entry")
    return out


def format_manifest(name: str, labels: Sequence[str], files: Sequence[str], extra: Optional[Dict] = None) -> str:
    lines = [f"name = {name}", "labels = " + ", ".join(labels)]
    lines += [f"file = {f}" for f in files]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_dataset(path: PathLike) -> DomainDataset:
    """Load a manifest (``.txt``/``.manifest``) or a single descriptor file.

    Manifest label names map to dense class ids 1..C in listed order.
    """
    path = Path(path)
    if path.suffix.lower() not in (".txt", ".manifest"):
        return read_descriptors(path)
    man = parse_manifest(path.read_text())
    name = man["name"]
    names = man.get("labels")
    label_set = tuple(range(1, len(names) + 1)) if names else None
    parts = [read_descriptors(path.parent / f, name, label_set=label_set) for f in man["files"]]
    if not parts:
        raise ValidationError(f"manifest {path} lists no files")
    dims = {p.dim for p in parts}
    if len(dims) != 1:
        raise ValidationError(f"manifest {path}: files disagree on dim {sorted(dims)}")
    bags = [b for p in parts for b in p.bags]
    if label_set is None:
        label_set = tuple(sorted({b.label for b in bags}))
    return DomainDataset(name, label_set, tuple(bags), dims.pop(), tuple(names) if names else None)


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
