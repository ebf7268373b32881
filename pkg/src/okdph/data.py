"""Datasets, IDX/CSV I/O, per-model augmentation and the corruption
transforms used for the stability experiments."""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class AugmentError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    @property
    def kind(self) -> str:
        return "points" if self.x.ndim == 2 else "images"

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx], meta=dict(self.meta))

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic spirals


def spiral_curve(s, k: int, classes: int, turns: float) -> np.ndarray:
    """Unstandardized point at curve parameter ``s`` in [0, 1] on arm ``k``."""
    s = np.asarray(s, dtype=np.float64)
    angle = 2 * np.pi * k / classes + 2 * np.pi * turns * s
    return np.stack([s * np.cos(angle), s * np.sin(angle)], axis=-1)


def gen_spirals(n_per_class: int, classes: int, noise_sd: float, seed: int, turns: float = 1.0,
                standardize_with: tuple | None = None, split: str = "train") -> Dataset:
    """Interleaved 2-D spiral arms, one per class, standardized per coordinate.

    Coordinates are standardized with their own mean/std unless
    ``standardize_with=(mean, std)`` is given (use the training statistics
    for a test split).
    """
    if classes < 2 or n_per_class < 1:
        raise ValueError("need classes >= 2 and n_per_class >= 1")
    rng = np.random.default_rng(seed)
    xs, ys, ss = [], [], []
    for k in range(classes):
        s = rng.uniform(0.0, 1.0, n_per_class)
        pts = spiral_curve(s, k, classes, turns)
        pts = pts + noise_sd * rng.standard_normal(pts.shape)
        xs.append(pts)
        ys.append(np.full(n_per_class, k))
        ss.append(s)
    x = np.concatenate(xs)
    if standardize_with is None:
        mean, std = x.mean(axis=0), x.std(axis=0)
    else:
        mean, std = (np.asarray(a, dtype=np.float64) for a in standardize_with)
    x = (x - mean) / std
    meta = {"source": "spirals", "mean": mean.tolist(), "std": std.tolist(),
            "curve_param": np.concatenate(ss), "turns": turns}
    return Dataset(x, np.concatenate(ys), classes, split, meta)


# ---------------------------------------------------------------------------
# IDX files


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse a big-endian uint8 IDX tensor (``.gz`` transparently)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08:
        raise IdxError(f"{path}: unsupported IDX magic 0x{magic:08X} (only uint8 tensors)")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims)) if dims else 1
    if len(raw) - head != n:
        raise IdxError(f"{path}: expected {n} data bytes for dims {dims}, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def _expect_magic(path, expected: int) -> None:
    with _open(path) as f:
        raw = f.read(4)
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated header")
    actual = struct.unpack(">I", raw)[0]
    if actual != expected:
        raise IdxError(f"{path}: bad magic, expected 0x{expected:08X}, got 0x{actual:08X}")


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxError("only uint8 tensors can be written")
    blob = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    blob += np.ascontiguousarray(array).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # mtime pinned so output bytes are reproducible
        with gzip.GzipFile(path, "wb", mtime=0) as f:
            f.write(blob)
    else:
        path.write_bytes(blob)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Images become (N, 1, rows, cols) float64 in [0, 1]."""
    _expect_magic(images_path, IDX_IMAGES_MAGIC)
    _expect_magic(labels_path, IDX_LABELS_MAGIC)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if len(images) != len(labels):
        raise IdxError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    c = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 2
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), max(c, 2), split,
                   {"source": "idx", "images": str(images_path), "labels": str(labels_path)})


# ---------------------------------------------------------------------------
# CSV export


def save_csv(dataset: Dataset, path) -> None:
    flat = dataset.x.reshape(len(dataset), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, dataset.y):
            w.writerow([f"{v:.17g}" for v in row] + [int(label)])


def load_csv(path, num_classes: int | None = None, input_shape: tuple | None = None,
             split: str = "train") -> Dataset:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if header[-1] != "label" or header[:-1] != [f"x{i}" for i in range(len(header) - 1)]:
        raise ValueError(f"{path}: header must be x0,x1,...,label")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    if input_shape is not None:
        x = x.reshape((len(x),) + tuple(input_shape))
    c = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x, y, c, split, {"source": "csv", "path": str(path)})


# ---------------------------------------------------------------------------
# augmentation

TRANSFORMS = ("none", "gaussian-jitter", "random-shift", "horizontal-flip", "cutout", "rotate")
IMAGE_ONLY = ("random-shift", "horizontal-flip", "cutout")


@dataclass(frozen=True)
class Transform:
    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise AugmentError(f"unknown transform {self.kind!r}")
        if self.kind == "horizontal-flip" and not 0.0 <= self.value <= 1.0:
            raise AugmentError(f"flip probability must lie in [0, 1], got {self.value}")
        if self.value < 0:
            raise AugmentError(f"{self.kind} parameter must be >= 0, got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "Transform":
        kind, _, value = text.partition(":")
        return cls(kind, float(value) if value else 0.0)

    def __str__(self) -> str:
        return self.kind if self.kind == "none" else f"{self.kind}:{self.value:g}"


@dataclass(frozen=True)
class AugmentationSpec:
    transforms: tuple[Transform, ...] = ()

    @classmethod
    def parse(cls, items) -> "AugmentationSpec":
        return cls(tuple(Transform.parse(t) if isinstance(t, str) else t for t in items))

    def to_list(self) -> list[str]:
        return [str(t) for t in self.transforms]


# one pipeline per student slot, HWM last; cycled for more students
DEFAULT_POINT_AUGMENTATIONS = (
    ("gaussian-jitter:0.05",),
    ("rotate:8",),
    ("gaussian-jitter:0.05", "rotate:8"),
)
DEFAULT_IMAGE_AUGMENTATIONS = (
    ("horizontal-flip:0.5", "random-shift:2"),
    ("cutout:8",),
    ("gaussian-jitter:0.1", "rotate:15"),
)


def default_augmentations(kind: str, num_students: int) -> list[AugmentationSpec]:
    table = DEFAULT_POINT_AUGMENTATIONS if kind == "points" else DEFAULT_IMAGE_AUGMENTATIONS
    students = [table[m % (len(table) - 1)] for m in range(num_students)]
    return [AugmentationSpec.parse(t) for t in students + [table[-1]]]


class AugStream:
    """Per-epoch random draws for one augmentation pipeline.

    All draws for an epoch are made up front for every example index, so the
    augmentation of example ``i`` depends only on (seed, slot, epoch, i) and
    never on which other examples share its batch.
    """

    def __init__(self, seed: int, slot: int, epoch: int, n_total: int, input_shape: tuple):
        self.key = (int(seed), int(slot), int(epoch))
        self.n_total = n_total
        self.input_shape = tuple(input_shape)
        self._cache: dict = {}

    def draws(self, spec: AugmentationSpec) -> list:
        if spec in self._cache:
            return self._cache[spec]
        rng = np.random.default_rng(np.random.SeedSequence(list(self.key)))
        n = self.n_total
        out = []
        for t in spec.transforms:
            if t.kind == "gaussian-jitter":
                out.append(rng.standard_normal((n,) + self.input_shape))
            elif t.kind == "random-shift":
                m = int(t.value)
                out.append(rng.integers(-m, m + 1, size=(n, 2)))
            elif t.kind == "horizontal-flip":
                out.append(rng.uniform(size=n) < t.value)
            elif t.kind == "cutout":
                size = int(t.value)
                h, w = self.input_shape[-2:]
                out.append(np.stack([rng.integers(0, max(h - size, 0) + 1, n),
                                     rng.integers(0, max(w - size, 0) + 1, n)], axis=1))
            elif t.kind == "rotate":
                out.append(np.deg2rad(rng.uniform(-t.value, t.value, n)))
            else:
                out.append(None)
        self._cache[spec] = out
        return out


def _shift(x, offs):
    b, c, h, w = x.shape
    out = np.zeros_like(x)
    for k in range(b):
        dy, dx = offs[k]
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[k, :, yd, xd] = x[k, :, ys, xs]
    return out


def _rotate_images(x, angles):
    """Nearest-neighbour rotation about the image centre, zero fill."""
    b, c, h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos, sin = np.cos(angles)[:, None, None], np.sin(angles)[:, None, None]
    sy = np.rint(cy + cos * yy - sin * xx).astype(np.int64)
    sx = np.rint(cx + sin * yy + cos * xx).astype(np.int64)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    bi = np.broadcast_to(np.arange(b)[:, None, None], sy.shape)
    picked = x[bi, :, np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)]  # (B, H, W, C)
    picked = picked * valid[..., None]
    return picked.transpose(0, 3, 1, 2)


def augment(x: np.ndarray, idx: np.ndarray, spec: AugmentationSpec, stream: AugStream) -> np.ndarray:
    """Apply ``spec`` to the batch ``x`` whose rows are dataset examples ``idx``."""
    points = x.ndim == 2
    for t in spec.transforms:
        if t.kind in IMAGE_ONLY and points:
            raise AugmentError(f"{t.kind} does not apply to 2-D point data")
        if not points and x.ndim != 4:
            raise AugmentError(f"unsupported input rank {x.ndim}")
    draws = stream.draws(spec)
    out = x
    for t, d in zip(spec.transforms, draws):
        if t.kind == "none":
            continue
        if t.kind == "gaussian-jitter":
            if t.value == 0:
                continue
            out = out + t.value * d[idx]
        elif t.kind == "random-shift":
            out = _shift(out, d[idx])
        elif t.kind == "horizontal-flip":
            flip = d[idx]
            if flip.any():
                out = out.copy()
                out[flip] = out[flip][..., ::-1]
        elif t.kind == "cutout":
            size = int(t.value)
            if size == 0:
                continue
            out = out.copy()
            for k, (top, left) in enumerate(d[idx]):
                out[k, :, top:top + size, left:left + size] = 0.0
        elif t.kind == "rotate":
            a = d[idx]
            if points:
                c, s = np.cos(a), np.sin(a)
                out = np.stack([c * out[:, 0] - s * out[:, 1], s * out[:, 0] + c * out[:, 1]], axis=1)
            else:
                out = _rotate_images(out, a)
    return out


# ---------------------------------------------------------------------------
# stability-protocol corruptions


@dataclass(frozen=True)
class NoiseSpec:
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"noise variance must be >= 0, got {self.variance}")


def add_gaussian_noise(dataset: Dataset, spec: NoiseSpec, seed: int) -> Dataset:
    """X + N(mean, variance) elementwise, drawn once."""
    if spec.variance == 0 and spec.mean == 0:
        return dataset.subset(slice(None))
    rng = np.random.default_rng(seed)
    noise = spec.mean + math.sqrt(spec.variance) * rng.standard_normal(dataset.x.shape)
    return replace(dataset, x=dataset.x + noise, meta={**dataset.meta, "noise": [spec.mean, spec.variance]})


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Class-stratified random subset without replacement, kept in original order.

    Each class keeps round(fraction * n_c) examples (half rounds up), at least one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == c)
        if members.size == 0:
            continue
        k = min(members.size, max(1, math.floor(fraction * members.size + 0.5)))
        keep.append(rng.choice(members, size=k, replace=False))
    idx = np.sort(np.concatenate(keep))
    return dataset.subset(idx)
