"""Image datasets: procedural synthesis, UNLN-DATA persistence, subsetting, CIFAR-10 ingestion."""

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError

SPLITS = ("train", "test")


@dataclass
class ImageDataset:
    """N x C x H x W float32 images with integer labels in [0, num_classes).

    ``unclipped`` marks datasets whose pixels may leave [0, 1] (orthogonally
    projected or mean-subtracted images); every other dataset is range-checked.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    seed: int = 0
    provenance: str = ""
    unclipped: bool = False

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if not self.unclipped and self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def dim(self):
        return int(np.prod(self.shape))

    def flat(self):
        return self.images.reshape(len(self), -1)

    def take(self, idx, **changes):
        return replace(self, images=self.images[idx], labels=self.labels[idx], **changes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


# --- procedural clean data ----------------------------------------------------

# Base hues, one per class. The shape colour leans only slightly toward the
# class hue, so colour alone is a weak cue and a linear model on pixels stays
# far from solving the task.
PALETTE = np.array([
    [0.85, 0.25, 0.25], [0.25, 0.75, 0.30], [0.25, 0.35, 0.85], [0.85, 0.80, 0.25],
    [0.75, 0.30, 0.80], [0.25, 0.80, 0.80], [0.90, 0.55, 0.20], [0.55, 0.85, 0.25],
    [0.55, 0.35, 0.20], [0.60, 0.60, 0.60], [0.20, 0.50, 0.55], [0.85, 0.45, 0.60],
    [0.40, 0.25, 0.60], [0.65, 0.70, 0.90], [0.30, 0.55, 0.25], [0.90, 0.85, 0.65],
])

MASK_NAMES = (
    "disc", "ring", "square-outline", "square", "plus", "cross", "triangle-up", "h-bar",
    "v-bar", "diamond", "triangle-down", "corner", "tee", "two-dots", "diagonal", "checker",
)


def _mask(kind, h, w, rng, jitter=3):
    """Binary mask of a small centred shape, shifted by up to ``jitter`` pixels."""
    y, x = np.mgrid[0:h, 0:w]
    dy = y - (h / 2 - 0.5 + rng.integers(-jitter, jitter + 1))
    dx = x - (w / 2 - 0.5 + rng.integers(-jitter, jitter + 1))
    ady, adx = np.abs(dy), np.abs(dx)
    box = np.maximum(ady, adx)
    r = np.hypot(dy, dx)
    name = MASK_NAMES[kind]
    if name == "disc":
        m = r < 3.6
    elif name == "ring":
        m = (r > 2.4) & (r < 4.4)
    elif name == "square-outline":
        m = (box > 2.4) & (box < 4)
    elif name == "square":
        m = box < 2.6
    elif name == "plus":
        m = ((ady < 0.6) & (adx < 4.1)) | ((adx < 0.6) & (ady < 4.1))
    elif name == "cross":
        m = ((np.abs(dy - dx) < 0.8) | (np.abs(dy + dx) < 0.8)) & (box < 3.6)
    elif name == "triangle-up":
        m = (np.abs(dy) < 3.6) & (adx < (dy + 3.6) / 2 + 0.3)
    elif name == "h-bar":
        m = (ady < 1.1) & (adx < 4.6)
    elif name == "v-bar":
        m = (adx < 1.1) & (ady < 4.6)
    elif name == "diamond":
        m = ady + adx < 4.1
    elif name == "triangle-down":
        m = (np.abs(dy) < 3.6) & (adx < (3.6 - dy) / 2 + 0.3)
    elif name == "corner":
        m = ((dx > -3.6) & (dx < -1.5) & (ady < 3.6)) | ((dy > 1.5) & (dy < 3.6) & (adx < 3.6))
    elif name == "tee":
        m = ((dy > -3.6) & (dy < -1.5) & (adx < 3.6)) | ((adx < 1.1) & (ady < 3.6))
    elif name == "two-dots":
        m = (np.hypot(dy, dx - 2.5) < 1.6) | (np.hypot(dy, dx + 2.5) < 1.6)
    elif name == "diagonal":
        m = (np.abs(dy - dx) < 1.2) & (box < 4.1)
    else:
        m = ((np.floor(dy) + np.floor(dx)) % 2 == 0) & (box < 3.6)
    return m.astype(np.float64)


MAX_SYNTHETIC_CLASSES = len(PALETTE)
HUE_WEIGHT = 0.1
CONTRAST = (0.12, 0.32)


def render_sample(label, h, w, rng, noise=0.15):
    """One image of class ``label``: the class shape on a random flat background.

    The shape differs from the background by a contrast drawn from ``CONTRAST``
    with a random sign, along a colour direction mixing the class hue (weight
    ``HUE_WEIGHT``) with a random direction. Uniform noise of amplitude
    ``noise`` is shared by the three channels of each pixel.
    """
    mask = _mask(label, h, w, rng)
    background = rng.uniform(0.25, 0.75, size=3)
    hue = PALETTE[label] - 0.5
    hue /= np.linalg.norm(hue) + 1e-12
    other = rng.normal(size=3)
    other /= np.linalg.norm(other)
    direction = HUE_WEIGHT * hue + (1 - HUE_WEIGHT) * other
    direction /= np.linalg.norm(direction)
    contrast = rng.uniform(*CONTRAST) * rng.choice([-1.0, 1.0])
    img = background[:, None, None] + mask[None] * (contrast * direction)[:, None, None]
    img = img + rng.uniform(-noise, noise, size=(1, h, w))
    return np.clip(img, 0, 1)


def generate_synthetic_clean(k=10, n_per_class=600, h=16, w=16, seed=0, noise=0.15, test_fraction=0.2):
    """Deterministic procedural stand-in for a natural-image dataset.

    Each class pairs a base hue with a small shape (disc, ring, bar, ...)
    rendered at a jittered position, random contrast polarity and random
    background, plus uniform pixel noise. Returns a stratified
    ``(train, test)`` split.
    """
    if k < 2 or k > MAX_SYNTHETIC_CLASSES:
        raise ConfigError(f"synthetic generator supports 2..{MAX_SYNTHETIC_CLASSES} classes, got {k}")
    if h % 4 or w % 4:
        raise ConfigError(f"image height/width must be multiples of 4, got {h}x{w}")
    if n_per_class < 2:
        raise ConfigError("need at least two samples per class")
    rng = np.random.default_rng(seed)
    images = np.empty((k, n_per_class, 3, h, w), dtype=np.float32)
    for c in range(k):
        for i in range(n_per_class):
            images[c, i] = render_sample(c, h, w, rng, noise=noise)
    n_test = int(round(n_per_class * test_fraction))
    n_train = n_per_class - n_test
    prov = f"synthetic k={k} n_per_class={n_per_class} h={h} w={w} noise={noise} seed={seed}"

    def split(lo, hi, name):
        x = images[:, lo:hi].reshape(-1, 3, h, w)
        y = np.repeat(np.arange(k), hi - lo)
        order = rng.permutation(len(y))
        return ImageDataset(x[order], y[order], k, split=name, seed=seed, provenance=prov)

    return split(0, n_train, "train"), split(n_train, n_per_class, "test")


def subset_random(dataset, size, seed=0):
    """Random subset without replacement. ``size`` is a fraction (float <= 1) or a count (int)."""
    n = len(dataset)
    if isinstance(size, float):
        if not 0 < size <= 1:
            raise ConfigError(f"subset fraction must lie in (0, 1], got {size}")
        count = int(round(size * n))
    else:
        count = int(size)
    if count < 0 or count > n:
        raise ConfigError(f"requested {count} samples from a dataset of {n}")
    idx = np.random.default_rng(seed).permutation(n)[:count]
    return dataset.take(idx, provenance=f"{dataset.provenance} | subset {count} seed={seed}")


# --- UNLN-DATA files ----------------------------------------------------------

DATA_MAGIC = b"UNLN-DATA"
DATA_VERSION = 1
_HEADER = struct.Struct("<H5IQBBI")  # version, N, C, H, W, K, seed, split, flags, provenance length


def dataset_bytes(ds):
    n, c, h, w = ds.images.shape
    prov = ds.provenance.encode()
    head = DATA_MAGIC + _HEADER.pack(
        DATA_VERSION, n, c, h, w, ds.num_classes, ds.seed & (2**64 - 1),
        SPLITS.index(ds.split), int(ds.unclipped), len(prov),
    )
    return head + prov + ds.images.astype("<f4").tobytes() + ds.labels.astype("<u4").tobytes()


def dataset_from_bytes(data):
    if len(data) < len(DATA_MAGIC) or data[:len(DATA_MAGIC)] != DATA_MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    pos = len(DATA_MAGIC)
    if len(data) < pos + _HEADER.size:
        raise FormatError("truncated dataset header", offset=len(data))
    version, n, c, h, w, k, seed, split, flags, plen = _HEADER.unpack_from(data, pos)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=pos)
    if split >= len(SPLITS):
        raise FormatError(f"bad split tag {split}", offset=pos + _HEADER.size - 6)
    pos += _HEADER.size
    img_bytes = n * c * h * w * 4
    expected = pos + plen + img_bytes + n * 4
    if len(data) != expected:
        raise FormatError(
            f"file holds {len(data)} bytes but header (N={n}, {c}x{h}x{w}) implies {expected}",
            offset=min(len(data), expected),
        )
    prov = data[pos:pos + plen].decode()
    pos += plen
    images = np.frombuffer(data, dtype="<f4", count=n * c * h * w, offset=pos).reshape(n, c, h, w)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=pos + img_bytes)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise FormatError(f"label {labels[bad]} >= K={k} at record {bad}", offset=pos + img_bytes + 4 * bad)
    try:
        return ImageDataset(images.astype(np.float32), labels.astype(np.int64), k,
                            split=SPLITS[split], seed=seed, provenance=prov, unclipped=bool(flags & 1))
    except ConfigError as exc:
        raise FormatError(f"invalid dataset contents: {exc}", offset=pos) from exc


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# --- CIFAR-10 binary version --------------------------------------------------

CIFAR_RECORD = 1 + 3072
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


def parse_cifar_batch(data, name="batch", records=CIFAR_RECORDS_PER_FILE):
    """Decode label-byte + 3072 CHW pixel-byte records into (images, labels)."""
    if len(data) != records * CIFAR_RECORD:
        raise FormatError(f"{name}: expected {records * CIFAR_RECORD} bytes, got {len(data)}",
                          offset=min(len(data), records * CIFAR_RECORD))
    raw = np.frombuffer(data, dtype=np.uint8).reshape(records, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        bad = int(np.argmax(labels >= 10))
        raise FormatError(f"{name}: label {labels[bad]} at record {bad}", offset=bad * CIFAR_RECORD)
    images = raw[:, 1:].reshape(records, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10(directory):
    def read(names, split):
        xs, ys = [], []
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise ConfigError(f"missing CIFAR-10 file {path}")
            with open(path, "rb") as fh:
                x, y = parse_cifar_batch(fh.read(), name)
            xs.append(x)
            ys.append(y)
        return ImageDataset(np.concatenate(xs), np.concatenate(ys), 10, split=split,
                            provenance=f"cifar10 {directory}")

    return read(CIFAR_TRAIN_FILES, "train"), read([CIFAR_TEST_FILE], "test")
