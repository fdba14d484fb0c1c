"""Datasets, image containers, augmentation, stratified folds and synthetic scenes.

Dataset roots follow ``<root>/<class_name>/<image files>``; class indices are
the lexicographic rank of the class directory.  Two image containers are
understood:

* binary PNM: ``P5`` (gray) and ``P6`` (RGB), 8- or 16-bit;
* raw float: a 16-byte header ``b"RAWF"`` + channels, height, width as
  little-endian uint32, followed by float32 little-endian samples in CHW
  order.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import crop_flip, make_rng

RAW_MAGIC = b"RAWF"
IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".raw"}


class DataError(Exception):
    """Base class for dataset problems."""


class UnreadableFileError(DataError):
    pass


class ChannelMismatchError(DataError):
    pass


class EmptyClassError(DataError):
    pass


class ClassTooSmallError(DataError):
    pass


def channel_means(images: np.ndarray) -> np.ndarray:
    return images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)


@dataclass
class LabeledDataset:
    """Images [N, C, H, W] with integer labels and string ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: list[str]
    class_names: list[str]
    channel_means: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if not len(self.images) == len(self.labels) == len(self.ids):
            raise ValueError("images, labels and ids must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside the class range")
        if self.channel_means is None:
            self.channel_means = channel_means(self.images) if len(self.images) else \
                np.zeros(self.images.shape[1], np.float32)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def samples(self):
        return [(self.images[i:i + 1], int(self.labels[i]), self.ids[i]) for i in range(len(self))]

    def subset(self, indices) -> "LabeledDataset":
        """Samples at ``indices``; channel means are recomputed from the subset."""
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices],
                              [self.ids[i] for i in indices], list(self.class_names))

    def checksum(self) -> int:
        crc = zlib.crc32(self.images.tobytes())
        crc = zlib.crc32(self.labels.tobytes(), crc)
        return zlib.crc32("\n".join(self.ids).encode(), crc)


# ---------------------------------------------------------------- containers

def _pnm_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _pnm_tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM type {magic!r}")
    channels = 3 if magic == b"P6" else 1
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * channels
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=offset)
    return (data.reshape(h, w, channels).transpose(2, 0, 1) / np.float32(maxval)).astype(np.float32)


def encode_pnm(image: np.ndarray) -> bytes:
    """8-bit P5/P6 encoding of a CHW image with values in [0, 1]."""
    c, h, w = image.shape
    if c not in (1, 3):
        raise ValueError("PNM stores 1 or 3 channels")
    q = np.clip(np.floor(image * 255 + 0.5), 0, 255).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    return header + q.transpose(1, 2, 0).tobytes()


def decode_raw(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:4] != RAW_MAGIC:
        raise ValueError("not a raw float container")
    c, h, w = struct.unpack("<3I", buf[4:16])
    if len(buf) != 16 + 4 * c * h * w:
        raise ValueError(f"raw container size {len(buf)} does not match header {c}x{h}x{w}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float32)


def encode_raw(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    return RAW_MAGIC + struct.pack("<3I", c, h, w) + np.asarray(image, dtype="<f4").tobytes()


def read_image(path: Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
        return decode_raw(buf) if buf[:4] == RAW_MAGIC else decode_pnm(buf)
    except (OSError, ValueError) as exc:
        raise UnreadableFileError(f"{path}: {exc}") from None


def write_image(path: Path, image: np.ndarray) -> None:
    path = Path(path)
    path.write_bytes(encode_raw(image) if path.suffix == ".raw" else encode_pnm(image))


def load_dataset(root) -> LabeledDataset:
    """Read ``<root>/<class>/<file>``; samples ordered by (class, filename)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise EmptyClassError(f"class directory {cdir} holds no images")
        for f in files:
            img = read_image(f)
            if images and img.shape[0] != images[0].shape[0]:
                raise ChannelMismatchError(f"{f}: {img.shape[0]} channels, expected {images[0].shape[0]}")
            if images and img.shape != images[0].shape:
                raise DataError(f"{f}: image size {img.shape[1:]} differs from {images[0].shape[1:]}")
            images.append(img)
            labels.append(label)
            ids.append(f"{cdir.name}/{f.name}")
    return LabeledDataset(np.stack(images), np.array(labels), ids, [d.name for d in class_dirs])


def save_dataset(ds: LabeledDataset, root, fmt: str = "raw") -> list[Path]:
    """Write ``ds`` in the class-subdirectory layout; ``fmt`` is ``raw`` (lossless) or ``pnm``."""
    root = Path(root)
    written = []
    for i in range(len(ds)):
        cls = ds.class_names[ds.labels[i]]
        name = Path(ds.ids[i]).name
        stem = Path(name).stem
        suffix = ".raw" if fmt == "raw" else (".ppm" if ds.images.shape[1] == 3 else ".pgm")
        path = root / cls / f"{stem}{suffix}"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_image(path, ds.images[i])
        written.append(path)
    return written


# -------------------------------------------------------------- augmentation

def crop_size(side: int, crop_ratio: float) -> int:
    if not 0 < crop_ratio <= 1:
        raise ValueError("crop_ratio must lie in (0, 1]")
    return max(1, min(side, int(math.floor(crop_ratio * side + 0.5))))


def _as_batch(image: np.ndarray) -> np.ndarray:
    return image[None] if image.ndim == 3 else image


def random_crop_mirror(image, rng: np.random.Generator, out_h: int, out_w: int,
                       mirror: bool = True, vflip: bool = False) -> np.ndarray:
    """Mirror with probability 1/2, then crop an ``out_h`` x ``out_w`` window at a uniform position."""
    x = _as_batch(image)
    H, W = x.shape[2:]
    flip = mirror and rng.random() < 0.5
    if flip:
        x = crop_flip(x, 0, 0, H, W, hflip=True)
    if vflip and rng.random() < 0.5:
        x = np.ascontiguousarray(x[:, :, ::-1])
    top = int(rng.integers(0, H - out_h + 1))
    left = int(rng.integers(0, W - out_w + 1))
    return crop_flip(x, top, left, out_h, out_w)


def augment(image, rng: np.random.Generator, crop_ratio: float = 0.875, mirror: bool = True,
            vflip: bool = False) -> np.ndarray:
    x = _as_batch(image)
    H, W = x.shape[2:]
    return random_crop_mirror(x, rng, crop_size(H, crop_ratio), crop_size(W, crop_ratio), mirror, vflip)


def center_crop(image, out_h: int, out_w: int | None = None) -> np.ndarray:
    x = _as_batch(image)
    out_w = out_h if out_w is None else out_w
    H, W = x.shape[2:]
    return crop_flip(x, (H - out_h) // 2, (W - out_w) // 2, out_h, out_w)


def eval_view(image, crop_ratio: float = 0.875) -> np.ndarray:
    x = _as_batch(image)
    H, W = x.shape[2:]
    return center_crop(x, crop_size(H, crop_ratio), crop_size(W, crop_ratio))


def sample_rng(seed: int, sample_id: str, iteration: int) -> np.random.Generator:
    """Augmentation stream for one (seed, sample, iteration) triple."""
    return make_rng(seed, zlib.crc32(sample_id.encode()), iteration)


def preprocess(ds_or_means, image: np.ndarray) -> np.ndarray:
    """Subtract per-channel training means from a CHW or NCHW image."""
    means = getattr(ds_or_means, "channel_means", ds_or_means)
    means = np.asarray(means, dtype=np.float32)
    x = _as_batch(image)
    if x.shape[1] != len(means):
        raise ChannelMismatchError(f"image has {x.shape[1]} channels, means have {len(means)}")
    out = x - means[None, :, None, None]
    return out if image.ndim == 4 else out[0]


# --------------------------------------------------------------------- folds

@dataclass
class FoldSplit:
    k: int
    assignment: dict[str, int]

    def fold_of(self, ds: LabeledDataset) -> np.ndarray:
        return np.array([self.assignment[i] for i in ds.ids], dtype=np.int64)

    def test_indices(self, ds: LabeledDataset, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of(ds) == fold)

    def train_indices(self, ds: LabeledDataset, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of(ds) != fold)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample_id", "fold"])
            for sid, fold in self.assignment.items():
                writer.writerow([sid, fold])

    @classmethod
    def from_csv(cls, path, k: int | None = None) -> "FoldSplit":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assignment = {r["sample_id"]: int(r["fold"]) for r in rows}
        return cls(k if k is not None else max(assignment.values()) + 1, assignment)


def make_folds(ds: LabeledDataset, k: int, seed: int = 0) -> FoldSplit:
    """Stratified split: per-class seeded shuffle dealt round-robin over the folds.

    The dealing offset carries over between classes so fold totals stay
    balanced as well.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    for c, n in enumerate(counts):
        if n < k:
            raise ClassTooSmallError(f"class {ds.class_names[c]!r} has {n} samples, fewer than k={k}")
    assignment: dict[str, int] = {}
    offset = 0
    for c in range(ds.num_classes):
        members = make_rng(seed, c).permutation(np.flatnonzero(ds.labels == c))
        for j, idx in enumerate(members):
            assignment[ds.ids[idx]] = (offset + j) % k
        offset = (offset + len(members)) % k
    return FoldSplit(k, {sid: assignment[sid] for sid in ds.ids})


# ----------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class ClassPattern:
    """Generator parameters of one synthetic class.

    ``orientation`` is the stripe direction in degrees, ``frequency`` the
    stripe count across the image, ``blob_density`` the expected number of
    blobs, and ``stripe_color``/``blob_color`` per-channel signed amplitudes.
    ``frequency_range`` draws the frequency per image instead, and
    ``random_colors`` draws both colors per image, leaving orientation (and
    frequency, when fixed) as the only class cues.
    """

    orientation: float
    frequency: float
    blob_density: float
    stripe_color: tuple[float, ...]
    blob_color: tuple[float, ...]
    frequency_range: tuple[float, float] | None = None
    random_colors: bool = False


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    image_size: int = 32
    channels: int = 3
    samples_per_class: int = 20
    noise: float = 0.1
    seed: int = 0
    orientation_jitter: float = 10.0
    classes: Sequence[ClassPattern] | None = None
    class_names: Sequence[str] | None = None

    def patterns(self) -> list[ClassPattern]:
        if self.classes is not None:
            patterns = list(self.classes)
        else:
            patterns = [default_pattern(c, self.num_classes, self.channels) for c in range(self.num_classes)]
        if len(patterns) != self.num_classes:
            raise ValueError("number of class patterns must equal num_classes")
        if len(set(patterns)) != len(patterns):
            raise ValueError("distinct classes need distinct generator parameters")
        return patterns


_PALETTE = ((0.9, 0.4, -0.3), (-0.5, 0.8, 0.4), (0.3, -0.6, 0.9), (0.7, 0.7, -0.6),
            (-0.8, 0.2, 0.6), (0.4, 0.9, 0.2), (0.6, -0.4, -0.7), (-0.3, -0.7, 0.8))


def default_pattern(c: int, num_classes: int, channels: int = 3) -> ClassPattern:
    """Evenly spread orientations, alternating frequency/blob density, cycled palette."""
    def color(i):
        return tuple(_PALETTE[i % len(_PALETTE)][ch % 3] for ch in range(channels))
    return ClassPattern(orientation=180.0 * c / num_classes,
                        frequency=3.0 + 2.0 * (c % 2),
                        blob_density=1.0 + 3.0 * ((c // 2) % 2),
                        stripe_color=color(c),
                        blob_color=color(c + 3))


def render_pattern(pattern: ClassPattern, rng: np.random.Generator, size: int, channels: int,
                   noise: float, jitter: float) -> np.ndarray:
    """One CHW image; every channel is re-centred on 0.5 so global means carry no class signal."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = math.radians(pattern.orientation + rng.uniform(-jitter, jitter))
    phase = rng.uniform(0, 2 * math.pi)
    if pattern.frequency_range is not None:
        freq = rng.uniform(*pattern.frequency_range)
    else:
        freq = pattern.frequency * rng.uniform(0.9, 1.1)
    if pattern.random_colors:
        stripe_color = rng.uniform(-1, 1, channels)
        blob_color = rng.uniform(-1, 1, channels)
    else:
        stripe_color = np.asarray(pattern.stripe_color)
        blob_color = np.asarray(pattern.blob_color)
    stripes = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    blobs = np.zeros((size, size))
    for _ in range(rng.poisson(pattern.blob_density)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.15)
        blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    img = (stripe_color[:, None, None] * stripes
           + blob_color[:, None, None] * blobs
           + noise * rng.standard_normal((channels, size, size)))
    img -= img.mean(axis=(1, 2), keepdims=True)
    peak = np.abs(img).max()
    if peak > 0.5:
        img *= 0.5 / peak
    return (img + 0.5).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    patterns = spec.patterns()
    names = list(spec.class_names) if spec.class_names else [f"class{c:02d}" for c in range(spec.num_classes)]
    images, labels, ids = [], [], []
    for c, pattern in enumerate(patterns):
        for s in range(spec.samples_per_class):
            rng = make_rng(spec.seed, c, s)
            images.append(render_pattern(pattern, rng, spec.image_size, spec.channels,
                                         spec.noise, spec.orientation_jitter))
            labels.append(c)
            ids.append(f"{names[c]}/{names[c]}_{s:04d}")
    return LabeledDataset(np.stack(images), np.array(labels), ids, names)
