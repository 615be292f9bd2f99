"""Datasets: IDX and CSV ingestion, and a seeded Gaussian-blob generator.

Images are held as one float32 array of shape (N, C, H, W); sample ``i`` is
the batch-1 tensor ``images[i:i+1]``.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BadMagic, CountMismatch, DatasetError, ParseError, TruncatedFile
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return (1,) + self.images.shape[1:]

    @property
    def samples(self):
        return [(Tensor(self.images[i:i + 1]), int(self.labels[i])) for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.provenance))

    def split(self, *counts) -> list:
        out, start = [], 0
        for c in counts:
            out.append(self.subset(slice(start, start + c)))
            start += c
        return out


# --------------------------------------------------------------------------- IDX

def _read_idx(path, magic_expected):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != magic_expected:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{magic_expected:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise TruncatedFile(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    count = int(np.prod(dims))
    if len(raw) - hdr < count:
        raise TruncatedFile(f"{path}: expected {count} bytes of data, found {len(raw) - hdr}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=hdr).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if imgs.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{imgs.shape[0]} images vs {labels.shape[0]} labels")
    images = (imgs.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    n_cls = num_classes or (int(labels.max()) + 1 if labels.size else 1)
    return Dataset(images, labels.astype(np.int64), n_cls,
                   {"format": "idx", "images": str(images_path), "labels": str(labels_path)})


def save_idx(dataset: Dataset, images_path, labels_path):
    """Write single-channel images (clipped to [0, 1], scaled to bytes)."""
    if dataset.images.shape[1] != 1:
        raise DatasetError("IDX stores single-channel images only")
    n, _, h, w = dataset.images.shape
    px = np.clip(np.floor(dataset.images[:, 0] * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(px.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------- CSV

def load_csv(path, shape: Sequence[int], num_classes: Optional[int] = None) -> Dataset:
    """Rows are ``label, v0, v1, ...`` with ``prod(shape)`` values each.

    ``shape`` is the per-sample (C, H, W); a leading batch dim of 1 is accepted.
    Lines starting with ``#`` are comments.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 4 and shape[0] == 1:
        shape = shape[1:]
    width = int(np.prod(shape))
    images, labels = [], []
    with open(path, newline="") as fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != width + 1:
                raise ParseError(f"{path}: expected {width + 1} columns, found {len(row)}", row=rownum,
                                 column=min(len(row), width + 1) + 1)
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise ParseError(f"{path}: bad label {row[0]!r}", row=rownum, column=1) from None
            vals = np.empty(width, np.float32)
            for j, cell in enumerate(row[1:]):
                try:
                    vals[j] = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: bad value {cell!r}", row=rownum, column=j + 2) from None
            images.append(vals.reshape(shape))
    if not labels:
        raise DatasetError(f"{path}: no samples")
    labels = np.asarray(labels, np.int64)
    n_cls = num_classes or int(labels.max()) + 1
    return Dataset(np.stack(images), labels, n_cls, {"format": "csv", "path": str(path), "shape": list(shape)})


def save_csv(dataset: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for img, y in zip(dataset.images, dataset.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in img.ravel()])


# --------------------------------------------------------------------------- synthetic

def _scale_to_separation(means, target):
    k = len(means)
    if k < 2:
        return means
    flat = means.reshape(k, -1)
    d = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(-1))
    dmin = d[~np.eye(k, dtype=bool)].min()
    return means * (target / dmin) if dmin > 0 else means


def gen_synthetic(num_classes=4, samples=400, shape=(1, 16, 16), seed=0, separation=6.0, noise=1.0,
                  difficulty=0.0, global_separation=0.0, sample_seed=None) -> Dataset:
    """Gaussian class blobs.

    Each class mean is a spatial bump at a class-specific position with a
    class-specific channel pattern, scaled so any two means are at least
    ``separation * noise`` apart.  An optional global part adds a constant
    per-channel offset per class (pairwise distance ``global_separation *
    noise``) whose amplitude is drawn per sample from U(1 - difficulty, 1):
    pooled features see only that part, so pooling exit heads are confident
    on some samples and unsure on others.  Labels cycle through the classes
    before shuffling, keeping classes balanced.

    ``seed`` fixes the class structure.  ``sample_seed``, when given, redraws
    only the samples, so train and eval sets of one task can be generated
    separately.
    """
    if num_classes < 1 or samples < 1:
        raise ValueError("num_classes and samples must be positive")
    shape = tuple(int(s) for s in shape)
    if len(shape) == 4 and shape[0] == 1:
        shape = shape[1:]
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    sigma = max(h, w) / 8.0
    bumps = np.empty((num_classes,) + shape)
    for k in range(num_classes):
        cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        bumps[k] = rng.standard_normal(c)[:, None, None] * bump
    bumps = _scale_to_separation(bumps, separation * noise)
    offsets = np.broadcast_to(rng.standard_normal((num_classes, c, 1, 1)), (num_classes,) + shape)
    offsets = _scale_to_separation(offsets, global_separation * noise)
    if sample_seed is not None:
        rng = np.random.default_rng([seed, sample_seed])
    labels = rng.permutation(np.arange(samples) % num_classes)
    amp = rng.uniform(1.0 - difficulty, 1.0, size=samples)
    x = bumps[labels] + amp[:, None, None, None] * offsets[labels] \
        + noise * rng.standard_normal((samples,) + shape)
    spec = {"format": "synthetic", "num_classes": num_classes, "samples": samples, "shape": list(shape),
            "seed": seed, "separation": separation, "noise": noise, "difficulty": difficulty,
            "global_separation": global_separation, "sample_seed": sample_seed}
    return Dataset(x.astype(np.float32), labels, num_classes, spec)


# --------------------------------------------------------------------------- descriptors

def save_dataset(dataset: Dataset, path, fmt=None) -> dict:
    """Write data plus a ``<stem>.json`` descriptor; returns the descriptor."""
    stem, ext = os.path.splitext(str(path))
    if os.path.dirname(stem):
        os.makedirs(os.path.dirname(stem), exist_ok=True)
    fmt = fmt or ("idx" if ext in (".idx", ".ubyte") else "csv")
    shape = list(dataset.images.shape[1:])
    if fmt == "idx":
        images, labels = f"{stem}-images.idx", f"{stem}-labels.idx"
        save_idx(dataset, images, labels)
        desc = {"format": "idx", "images": os.path.basename(images), "labels": os.path.basename(labels)}
    else:
        csv_path = stem + ".csv"
        save_csv(dataset, csv_path)
        desc = {"format": "csv", "path": os.path.basename(csv_path)}
    desc.update({"shape": shape, "num_classes": dataset.num_classes, "samples": len(dataset),
                 "provenance": dataset.provenance})
    with open(stem + ".json", "w") as fh:
        json.dump(desc, fh, indent=2)
    return desc


def load_dataset(ref) -> Dataset:
    """Load from a descriptor path, a descriptor dict, or a synthetic spec dict."""
    base = ""
    if isinstance(ref, (str, os.PathLike)):
        base = os.path.dirname(os.fspath(ref))
        with open(ref) as fh:
            ref = json.load(fh)
    fmt = ref.get("format")
    if fmt == "synthetic":
        keys = ("num_classes", "samples", "shape", "seed", "separation", "noise", "difficulty",
                "global_separation", "sample_seed")
        return gen_synthetic(**{k: ref[k] for k in keys if k in ref})
    if fmt == "csv":
        return load_csv(os.path.join(base, ref["path"]), ref["shape"], ref.get("num_classes"))
    if fmt == "idx":
        return load_idx(os.path.join(base, ref["images"]), os.path.join(base, ref["labels"]),
                        ref.get("num_classes"))
    raise DatasetError(f"unknown dataset format {fmt!r}")
