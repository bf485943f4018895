"""Online digit data: IDX files, partitions, augmentations, streams.

The pipeline starts from a 60k-image source set (a standard IDX pair,
or the procedural glyph fixture when no files are around), splits it
9k/1k/50k, and grows those into 50k offline training, 10k offline
validation, and a 100k-sample online stream whose sources are drawn
with replacement. Streams are pure functions of (seed, index): every
sample is generated on demand from its own child generator, so two
passes over the same stream are byte-identical and nothing needs to be
materialized. A tenth-scale variant keeps every ratio intact for fast
runs.
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
AUG_KINDS = ("cd", "st", "bg", "wn")

ELASTIC_ALPHA = 8.0
ELASTIC_SIGMA = 4.0
ST_ROTATE_DEG = 15.0
ST_SCALE = (0.85, 1.15)
ST_SHIFT = 2.0
BG_AMPLITUDE = 0.3
BG_CONTRAST = (0.6, 1.0)
WN_SIGMA = (0.05, 0.2)


class IdxFormatError(ValueError):
    """Raised for malformed IDX containers."""


def load_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file.

    Image files (magic 0x00000803) come back as float64 in [0, 1];
    label files (magic 0x00000801) as int64.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = int.from_bytes(data[:4], "big")
    if magic == IDX_LABEL_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGE_MAGIC:
        ndim = 3
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "i" * ndim, data[4:header])
    if any(d < 0 for d in dims):
        raise IdxFormatError(f"{path}: negative dimension {dims}")
    count = int(np.prod(dims)) if dims else 0
    if len(data) != header + count:
        raise IdxFormatError(
            f"{path}: payload holds {len(data) - header} bytes, "
            f"dimensions {dims} need {count}"
        )
    arr = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABEL_MAGIC:
        return arr.astype(np.int64)
    return arr.astype(np.float64) / 255.0


def save_idx(path, array) -> None:
    """Write an IDX file; float image data is scaled back to bytes."""
    array = np.asarray(array)
    if array.ndim == 1:
        magic = IDX_LABEL_MAGIC
    elif array.ndim == 3:
        magic = IDX_IMAGE_MAGIC
    else:
        raise IdxFormatError(f"cannot store a {array.ndim}-d array as IDX")
    if np.issubdtype(array.dtype, np.floating):
        array = np.rint(np.clip(array, 0.0, 1.0) * 255.0)
    payload = array.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">i", magic))
        fh.write(struct.pack(">" + "i" * payload.ndim, *payload.shape))
        fh.write(payload.tobytes())


def load_idx_pair(image_path, label_path):
    """Load a matching image/label file pair, checking the counts."""
    images = load_idx(image_path)
    labels = load_idx(label_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{image_path}: expected an image file")
    if labels.ndim != 1:
        raise IdxFormatError(f"{label_path}: expected a label file")
    if len(images) != len(labels):
        raise IdxFormatError(
            f"{len(images)} images but {len(labels)} labels"
        )
    return images, labels


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def elastic_transform(image, alpha=ELASTIC_ALPHA, sigma=ELASTIC_SIGMA,
                      seed=0) -> np.ndarray:
    """Smooth random warp: Gaussian-filtered displacement field, bilinear.

    alpha scales the displacement in pixels, sigma is the smoothing
    radius. Bilinear resampling with reflected borders keeps outputs
    inside the input value range.
    """
    rng = _as_rng(seed)
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return map_coordinates(image, [ys + dy, xs + dx], order=1,
                           mode="reflect")


def spatial_transform(image, rng) -> np.ndarray:
    """Random rotation, isotropic scale, and shift (inverse-mapped)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    theta = np.deg2rad(rng.uniform(-ST_ROTATE_DEG, ST_ROTATE_DEG))
    scale = rng.uniform(*ST_SCALE)
    ty, tx = rng.uniform(-ST_SHIFT, ST_SHIFT, size=2)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    yr = (ys - cy - ty) / scale
    xr = (xs - cx - tx) / scale
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = cos_t * yr - sin_t * xr + cy
    src_x = sin_t * yr + cos_t * xr + cx
    return map_coordinates(image, [src_y, src_x], order=1,
                           mode="constant", cval=0.0)


def background_gradient(image, rng) -> np.ndarray:
    """Contrast scaling plus a linear black-to-white intensity ramp."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    contrast = rng.uniform(*BG_CONTRAST)
    amplitude = rng.uniform(0.0, BG_AMPLITUDE)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w),
                         indexing="ij")
    ramp = np.cos(phi) * ys + np.sin(phi) * xs
    lo, hi = ramp.min(), ramp.max()
    ramp = (ramp - lo) / (hi - lo) if hi > lo else np.zeros_like(ramp)
    return np.clip(contrast * image + amplitude * ramp, 0.0, 1.0)


def white_noise(image, rng, sigma=None) -> np.ndarray:
    """Per-pixel Gaussian noise with a per-sample strength draw."""
    image = np.asarray(image, dtype=np.float64)
    if sigma is None:
        sigma = rng.uniform(*WN_SIGMA)
    if sigma == 0.0:
        return image
    return np.clip(image + rng.normal(0.0, sigma, image.shape), 0.0, 1.0)


_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _segment_cells(which):
    top, mid, bot = 5, 13, 21
    left, right = 9, 18
    cells = []
    if "a" in which:
        cells += [(top + t, c) for t in (0, 1) for c in range(left, right + 1)]
    if "g" in which:
        cells += [(mid + t, c) for t in (0, 1) for c in range(left, right + 1)]
    if "d" in which:
        cells += [(bot + t, c) for t in (0, 1) for c in range(left, right + 1)]
    if "f" in which:
        cells += [(r, left + t) for t in (0, 1) for r in range(top, mid + 1)]
    if "b" in which:
        cells += [(r, right - t) for t in (0, 1) for r in range(top, mid + 1)]
    if "e" in which:
        cells += [(r, left + t) for t in (0, 1) for r in range(mid, bot + 2)]
    if "c" in which:
        cells += [(r, right - t) for t in (0, 1) for r in range(mid, bot + 2)]
    return cells


def synthetic_digits(seed, n):
    """Procedural segment-display glyphs: a network-free digit fixture.

    Classes cycle round-robin so counts stay balanced; each glyph gets
    its own shift, brightness, stroke smoothing, and a light warp so
    classifiers have real intra-class variation to absorb.
    """
    images = np.zeros((n, 28, 28))
    labels = np.arange(n, dtype=np.int64) % 10
    root = np.random.SeedSequence((seed, 0x5E6))
    children = root.spawn(n)
    for i in range(n):
        rng = np.random.default_rng(children[i])
        digit = int(labels[i])
        canvas = np.zeros((28, 28))
        brightness = rng.uniform(0.7, 1.0)
        for r, c in _segment_cells(_SEGMENTS[digit]):
            canvas[r, c] = brightness
        dy, dx = rng.integers(-2, 3, size=2)
        canvas = np.roll(np.roll(canvas, dy, axis=0), dx, axis=1)
        canvas = gaussian_filter(canvas, rng.uniform(0.4, 0.8))
        canvas = elastic_transform(canvas, alpha=4.0, sigma=4.0, seed=rng)
        images[i] = np.clip(canvas, 0.0, 1.0)
    return images, labels


@dataclass
class Partitions:
    """Offline sets plus the source pool behind the online stream."""

    offline_train: tuple
    offline_val: tuple
    online_images: np.ndarray
    online_labels: np.ndarray
    online_count: int
    block_size: int
    source_indices: dict = field(default_factory=dict)

    def stream(self, seed=0, schedule=None, count=None) -> "OnlineStream":
        return OnlineStream(
            self.online_images, self.online_labels,
            count if count is not None else self.online_count,
            seed=seed, schedule=schedule, block_size=self.block_size,
        )


def _augment_partition(images, labels, indices, count, rng):
    out_images = np.empty((count, 28, 28))
    out_labels = np.empty(count, dtype=np.int64)
    draws = rng.integers(0, len(indices), size=count)
    for j, d in enumerate(draws):
        src = indices[d]
        out_images[j] = elastic_transform(images[src], seed=rng)
        out_labels[j] = labels[src]
    return out_images, out_labels


def make_partitions(images, labels, seed=0, desk_scale=False) -> Partitions:
    """Split a 60k source set 9k/1k/50k and grow the offline sets.

    Offline training and validation samples are warped copies of
    sources drawn with replacement from their partitions (9k grows to
    50k, 1k to 10k). The 50k online partition is kept as raw sources;
    the stream warps and augments on demand. desk_scale divides every
    size (and the shift-block length) by ten.
    """
    scale = 10 if desk_scale else 1
    need = 60000 // scale
    if len(images) < need or len(images) != len(labels):
        raise ValueError(
            f"need at least {need} labeled source images, got {len(images)}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))[:need]
    a, b = 9000 // scale, 1000 // scale
    c = 50000 // scale
    src_train, src_val = perm[:a], perm[a:a + b]
    src_online = perm[a + b:a + b + c]
    return Partitions(
        offline_train=_augment_partition(images, labels, src_train,
                                         50000 // scale, rng),
        offline_val=_augment_partition(images, labels, src_val,
                                       10000 // scale, rng),
        online_images=images[src_online],
        online_labels=labels[src_online],
        online_count=100000 // scale,
        block_size=10000 // scale,
        source_indices={
            "offline_train": src_train,
            "offline_val": src_val,
            "online": src_online,
        },
    )


def format_schedule(schedule) -> str:
    return "|".join("+".join(flags) if flags else "none"
                    for flags in schedule)


def parse_schedule(text):
    schedule = []
    for part in text.split("|"):
        part = part.strip()
        if part in ("", "none"):
            schedule.append(())
            continue
        flags = tuple(f.strip() for f in part.split("+"))
        for f in flags:
            if f not in AUG_KINDS:
                raise ValueError(f"unknown augmentation flag {f!r}")
        schedule.append(flags)
    return schedule


def default_shift_schedule(n_blocks) -> list:
    """Cycle of single augmentations, then pairs, for shift scenarios."""
    cycle = [("cd",), ("st",), ("bg",), ("wn",), ("cd", "st"),
             ("bg", "wn"), ("st", "bg"), ("cd", "wn")]
    return [cycle[i % len(cycle)] for i in range(n_blocks)]


class OnlineStream:
    """Deterministic augmented sample source, addressable by index.

    Sample i is produced entirely from the child generator at (seed, i)
    so access order never matters. The optional schedule holds one
    flag tuple per contiguous block: `cd` biases class choice through
    a slowly drifting class-probability walk, `st`/`bg`/`wn` transform
    the warped image. Images come back as (28, 28, 1) in [0, 1].
    """

    def __init__(self, images, labels, count, seed=0, schedule=None,
                 block_size=10000, alpha=ELASTIC_ALPHA, sigma=ELASTIC_SIGMA):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.images) != len(self.labels) or not len(self.images):
            raise ValueError("stream needs a nonempty labeled source pool")
        if self.labels.min() < 0 or self.labels.max() > 9:
            raise ValueError("labels must lie in [0, 10)")
        self.count = int(count)
        self.seed = int(seed)
        self.block_size = int(block_size)
        self.alpha = float(alpha)
        self.sigma = float(sigma)
        if schedule is None:
            schedule = []
        self.schedule = [tuple(flags) for flags in schedule]
        for flags in self.schedule:
            for f in flags:
                if f not in AUG_KINDS:
                    raise ValueError(f"unknown augmentation flag {f!r}")
        self._by_class = [np.flatnonzero(self.labels == c)
                          for c in range(10)]

    def __len__(self) -> int:
        return self.count

    def _flags(self, index):
        block = index // self.block_size
        if block < len(self.schedule):
            return self.schedule[block]
        return ()

    def _window_probs(self, index):
        """Class-probability walk state for this 1k-ish window."""
        block = index // self.block_size
        window = (index % self.block_size) // max(self.block_size // 10, 1)
        rng = np.random.default_rng((self.seed, 104729, block))
        probs = rng.dirichlet(np.full(10, 0.3))
        for _ in range(window):
            probs = probs * np.exp(0.5 * rng.normal(size=10))
            probs /= probs.sum()
        return probs

    def __getitem__(self, index):
        if not 0 <= index < self.count:
            raise IndexError(index)
        rng = np.random.default_rng((self.seed, 7919, index))
        flags = self._flags(index)
        if "cd" in flags:
            probs = self._window_probs(index)
            cls = rng.choice(10, p=probs)
            pool = self._by_class[cls]
            if not len(pool):
                pool = np.arange(len(self.images))
            src = pool[rng.integers(len(pool))]
        else:
            src = rng.integers(len(self.images))
        img = elastic_transform(self.images[src], self.alpha, self.sigma,
                                seed=rng)
        if "st" in flags:
            img = spatial_transform(img, rng)
        if "bg" in flags:
            img = background_gradient(img, rng)
        if "wn" in flags:
            img = white_noise(img, rng)
        img = np.clip(img, 0.0, 1.0)
        return img[:, :, None], int(self.labels[src])

    def __iter__(self):
        for i in range(self.count):
            yield self[i]

    def manifest(self) -> dict:
        return {
            "count": str(self.count),
            "seed": str(self.seed),
            "block_size": str(self.block_size),
            "alpha": repr(self.alpha),
            "sigma": repr(self.sigma),
            "schedule": format_schedule(self.schedule),
        }


def write_manifest(stream, path) -> None:
    parser = configparser.ConfigParser()
    parser["stream"] = stream.manifest()
    with open(path, "w") as fh:
        parser.write(fh)


def read_manifest(path) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    sec = parser["stream"]
    return {
        "count": sec.getint("count"),
        "seed": sec.getint("seed"),
        "block_size": sec.getint("block_size"),
        "alpha": sec.getfloat("alpha"),
        "sigma": sec.getfloat("sigma"),
        "schedule": parse_schedule(sec.get("schedule", "")),
    }
