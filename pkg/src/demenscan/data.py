"""Corpus ingestion, stratified hold-out and K-fold splits, and mini-batching."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import (DTYPE, STREAM_BATCH, STREAM_FOLD, STREAM_SPLIT, ParameterError,
                     derive_rng, worker_count)

CLASS_NAMES = ("NonDemented", "VeryMildDemented", "MildDemented", "ModerateDemented")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class LayoutError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, path, detail: str):
        super().__init__(f"cannot decode {path}: {detail}")
        self.path = str(path)


@dataclass(frozen=True)
class Sample:
    path: str
    label: int


@dataclass(frozen=True)
class DatasetIndex:
    samples: tuple
    num_classes: int = len(CLASS_NAMES)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        paths = [s.path for s in self.samples]
        if len(set(paths)) != len(paths):
            raise LayoutError("duplicate sample paths in index")
        for s in self.samples:
            if not 0 <= s.label < self.num_classes:
                raise LayoutError(f"{s.path}: label {s.label} out of range")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def per_class_counts(self) -> list:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def by_class(self) -> list:
        groups = [[] for _ in range(self.num_classes)]
        for s in self.samples:
            groups[s.label].append(s)
        return groups


def _is_decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError):
        return False


def scan_dataset(root) -> DatasetIndex:
    """Index ``root/<ClassName>/*.{png,jpg,jpeg}`` for the four canonical classes."""
    root = Path(root)
    samples, bad = [], []
    for label, name in enumerate(CLASS_NAMES):
        d = root / name
        if not d.is_dir():
            raise LayoutError(f"missing class directory {d}")
        files = sorted(p for p in d.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise LayoutError(f"class directory {d} has no images")
        for p in files:
            samples.append(Sample(str(p), label))
    with ThreadPoolExecutor(worker_count()) as pool:
        ok = list(pool.map(_is_decodable, [Path(s.path) for s in samples]))
    bad = [s.path for s, good in zip(samples, ok) if not good]
    if bad:
        raise LayoutError("unreadable image files: " + ", ".join(bad))
    return DatasetIndex(samples)


def load_manifest(path) -> DatasetIndex:
    """Read a JSON array of ``{"path", "label"}``; relative paths resolve against the manifest."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
        samples = []
        for e in entries:
            p = Path(e["path"])
            if not p.is_absolute():
                p = path.parent / p
            samples.append(Sample(str(p), int(e["label"])))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise LayoutError(f"bad manifest {path}: {exc}") from None
    samples.sort(key=lambda s: s.path)
    index = DatasetIndex(samples)
    empty = [CLASS_NAMES[i] for i, n in enumerate(index.per_class_counts) if n == 0]
    if empty:
        raise LayoutError(f"manifest has no samples for {', '.join(empty)}")
    return index


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize H x W x C with half-pixel-centred bilinear interpolation, edges clamped."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (height, width):
        return img.astype(np.float64)

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(height, in_h)
    x0, x1, fx = axis(width, in_w)
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def decode_image(path, target=(128, 128, 3)) -> np.ndarray:
    """Load an image as a C x H x W float32 tensor in [0, 1].

    Grayscale is replicated across channels when ``target`` asks for 3.
    """
    h, w, c = target
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = arr[..., None]
            else:
                gray = im.mode in ("1", "L", "LA", "P") and _palette_is_gray(im)
                im = im.convert("L" if gray else "RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
                if arr.ndim == 2:
                    arr = arr[..., None]
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DecodeError(path, str(exc)) from None
    if arr.shape[2] != c:
        if arr.shape[2] == 1:
            arr = np.repeat(arr, c, axis=2)
        elif c == 1:
            arr = arr.mean(axis=2, keepdims=True)
        else:
            raise DecodeError(path, f"cannot map {arr.shape[2]} channels to {c}")
    arr = bilinear_resize(arr, h, w)
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=DTYPE)


def _palette_is_gray(im) -> bool:
    if im.mode != "P":
        return True
    pal = np.asarray(im.getpalette() or [], dtype=np.int64).reshape(-1, 3)
    return bool((pal[:, 0] == pal[:, 1]).all() and (pal[:, 1] == pal[:, 2]).all())


def load_batch(samples, target=(128, 128, 3)) -> np.ndarray:
    """Decode ``samples`` in parallel, stacked in the given order."""
    paths = [s.path for s in samples]
    with ThreadPoolExecutor(min(worker_count(), max(1, len(paths)))) as pool:
        arrays = list(pool.map(lambda p: decode_image(p, target), paths))
    return np.stack(arrays)


def _require_nonempty(index: DatasetIndex):
    empty = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else str(i)
             for i, n in enumerate(index.per_class_counts) if n == 0]
    if empty:
        raise LayoutError(f"no samples for class(es) {', '.join(empty)}")


def stratified_split(index: DatasetIndex, train_fraction: float = 0.8, seed: int = 0):
    """Per class: seeded shuffle, first floor(fraction * n) to train, rest to validation."""
    if not 0 < train_fraction < 1:
        raise ParameterError(f"train_fraction must be in (0, 1), got {train_fraction}")
    _require_nonempty(index)
    train, val = set(), set()
    for label, group in enumerate(index.by_class()):
        order = derive_rng(seed, STREAM_SPLIT, label).permutation(len(group))
        # round() absorbs float error such as 0.29 * 100 = 28.999999999999996
        n_train = math.floor(round(train_fraction * len(group), 9))
        train.update(group[i].path for i in order[:n_train])
        val.update(group[i].path for i in order[n_train:])
    keep = lambda paths: DatasetIndex([s for s in index.samples if s.path in paths],
                                      index.num_classes)
    return keep(train), keep(val)


def stratified_kfold(index: DatasetIndex, k: int = 5, seed: int = 0) -> list:
    """K (train, val) pairs; each class is shuffled then dealt round-robin into folds."""
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    small = [i for i, n in enumerate(index.per_class_counts) if n < k]
    if small:
        raise ParameterError(f"classes {small} have fewer than k={k} samples")
    fold_of = {}
    for label, group in enumerate(index.by_class()):
        order = derive_rng(seed, STREAM_FOLD, label).permutation(len(group))
        for pos, i in enumerate(order):
            fold_of[group[i].path] = pos % k
    folds = []
    for f in range(k):
        train = [s for s in index.samples if fold_of[s.path] != f]
        val = [s for s in index.samples if fold_of[s.path] == f]
        folds.append((DatasetIndex(train, index.num_classes),
                      DatasetIndex(val, index.num_classes)))
    return folds


def make_batches(index: DatasetIndex, batch_size: int = 32, seed: int = 0,
                 epoch: int = 0) -> list:
    """Shuffle with (seed, epoch) and chunk; the last batch may be short."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = derive_rng(seed, STREAM_BATCH, epoch).permutation(len(index))
    samples = [index.samples[i] for i in order]
    return [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]
