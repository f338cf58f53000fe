"""Overlapping-digit dataset synthesis: ingest, compose, generate, serialize.

Composites are 36x36 grayscale canvases holding two 28x28 source digits of
distinct classes, each placed at an integer offset in {0..8}^2 and combined
by pixelwise maximum. Three training families exist:

* ``full``      — all ten classes,
* ``exclude``   — one class absent from the training stream entirely,
* ``lowdata``   — one class drawn from a fixed k-element subset of sources.

Every example's randomness derives from ``(seed, stream, index)`` alone, so
generation is deterministic, order-independent, and shardable.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

CANVAS = 36
DIGIT = 28
MAX_OFFSET = CANVAS - DIGIT  # 8
TEST_SHIFTS = (0, 2, 4, 6, 8)
LOWDATA_COUNTS = (1, 5, 10, 50, 100, 500, 1000, 5000)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# stream tags mixed into per-example seeds
_STREAM_TRAIN = 0
_STREAM_SETUP = 1
_STREAM_TEST_NINE = 10  # + shift level
_STREAM_TEST_TEN = 20  # + shift level


@dataclass(frozen=True)
class SourceDigit:
    """One 28x28 digit: pixels on the /255 lattice in [0,1], class, file position."""

    image: np.ndarray
    label: int
    source_index: int


@dataclass(eq=False)
class CompositeExample:
    """A 36x36 overlay of two placed digits plus everything needed to rebuild it.

    Pixels live on the /255 lattice and are stored as bytes; ``image``
    exposes them as floats in [0,1]. Because the source digits are
    themselves /255-quantized and the overlay operator is a maximum, the
    byte form is lossless.
    """

    pixels: np.ndarray  # uint8 (36, 36)
    labels: tuple  # ascending distinct class pair
    shift: int  # L-infinity distance between the two offsets
    provenance: tuple  # source indices, in draw order
    offsets: tuple  # ((ax, ay), (bx, by)) in draw order, x = column

    @property
    def image(self):
        return self.pixels / 255.0

    def __eq__(self, other):
        return (
            isinstance(other, CompositeExample)
            and self.labels == other.labels
            and self.shift == other.shift
            and self.provenance == other.provenance
            and self.offsets == other.offsets
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Deterministic recipe for one dataset family member."""

    variant: str
    seed: int
    held_out: int | None = None
    k: int | None = None
    train_size: int = 200_000
    test_size_per_set: int = 10_000

    def __post_init__(self):
        if self.variant not in ("full", "exclude", "lowdata"):
            raise ConfigurationError(f"unknown variant: {self.variant!r}")
        if self.variant == "full":
            if self.held_out is not None or self.k is not None:
                raise ConfigurationError("full variant takes no held-out digit or k")
        else:
            if self.held_out is None or not 0 <= self.held_out <= 9:
                raise ConfigurationError(f"{self.variant} needs a held-out digit in 0..9")
        if self.variant == "lowdata":
            if self.k is None or self.k < 1:
                raise ConfigurationError("lowdata needs k >= 1")
        elif self.k is not None:
            raise ConfigurationError("k only applies to the lowdata variant")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in an unsigned 64-bit integer")

    def eligible_classes(self):
        if self.variant == "exclude":
            return tuple(c for c in range(10) if c != self.held_out)
        return tuple(range(10))


# -- IDX ingestion -----------------------------------------------------------


def _read_u32_be(data, offset, what):
    if offset + 4 > len(data):
        raise FormatError(f"truncated while reading {what}", offset=offset)
    return struct.unpack_from(">I", data, offset)[0]


def load_idx(image_bytes, label_bytes):
    """Parse a big-endian IDX image/label file pair into source digits.

    Accepts raw bytes or filesystem paths. Pixels are scaled to [0,1] by
    /255; image and label counts must agree and labels must be digits.
    """
    if isinstance(image_bytes, (str, Path)):
        image_bytes = Path(image_bytes).read_bytes()
    if isinstance(label_bytes, (str, Path)):
        label_bytes = Path(label_bytes).read_bytes()

    magic = _read_u32_be(image_bytes, 0, "image magic")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", offset=0
        )
    count = _read_u32_be(image_bytes, 4, "image count")
    rows = _read_u32_be(image_bytes, 8, "row count")
    cols = _read_u32_be(image_bytes, 12, "column count")
    expected = 16 + count * rows * cols
    if len(image_bytes) < expected:
        raise FormatError(
            f"image payload truncated: need {expected} bytes, have {len(image_bytes)}",
            offset=len(image_bytes),
        )

    lmagic = _read_u32_be(label_bytes, 0, "label magic")
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", offset=0
        )
    lcount = _read_u32_be(label_bytes, 4, "label count")
    if len(label_bytes) < 8 + lcount:
        raise FormatError(
            f"label payload truncated: need {8 + lcount} bytes, have {len(label_bytes)}",
            offset=len(label_bytes),
        )
    if count != lcount:
        raise FormatError(f"{count} images but {lcount} labels")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=lcount, offset=8)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(
            f"label value {labels[bad[0]]} out of range 0..9", offset=8 + int(bad[0])
        )
    return [
        SourceDigit(image=images[i], label=int(labels[i]), source_index=i)
        for i in range(count)
    ]


@lru_cache(maxsize=1)
def builtin_digit_pools():
    """Bundled real-handwriting source: sklearn's 8x8 digits upscaled to 28x28.

    Returns disjoint (train, test) pools; every fourth image goes to the
    test pool. Pixels are quantized onto the /255 lattice so composites
    survive byte serialization exactly.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    raw = load_digits()
    train, test = [], []
    for i, (img, label) in enumerate(zip(raw.images, raw.target)):
        big = zoom(img / 16.0, DIGIT / 8, order=1)
        big = np.round(np.clip(big, 0.0, 1.0) * 255.0) / 255.0
        digit = SourceDigit(image=big, label=int(label), source_index=i)
        (test if i % 4 == 3 else train).append(digit)
    return train, test


def source_index_map(pool):
    return {d.source_index: d for d in pool}


# -- composition -------------------------------------------------------------


def place_digit(image, offset):
    x, y = offset
    canvas = np.zeros((CANVAS, CANVAS), dtype=np.float64)
    canvas[y : y + DIGIT, x : x + DIGIT] = image
    return canvas


def compose_pair(a, b, offset_a, offset_b):
    """Overlay two source digits at the given offsets by pixelwise maximum."""
    for off in (offset_a, offset_b):
        if not (0 <= off[0] <= MAX_OFFSET and 0 <= off[1] <= MAX_OFFSET):
            raise ValueError(f"offset {off} outside 0..{MAX_OFFSET}")
    if a.label == b.label:
        raise ValueError(f"constituent classes must differ, both are {a.label}")
    image = np.maximum(place_digit(a.image, offset_a), place_digit(b.image, offset_b))
    shift = max(abs(offset_a[0] - offset_b[0]), abs(offset_a[1] - offset_b[1]))
    return CompositeExample(
        pixels=np.rint(image * 255.0).astype(np.uint8),
        labels=tuple(sorted((a.label, b.label))),
        shift=int(shift),
        provenance=(a.source_index, b.source_index),
        offsets=(tuple(int(v) for v in offset_a), tuple(int(v) for v in offset_b)),
    )


def recompose(example, sources_by_index):
    """Rebuild a composite image from its provenance and offsets."""
    a = sources_by_index[example.provenance[0]]
    b = sources_by_index[example.provenance[1]]
    return np.maximum(
        place_digit(a.image, example.offsets[0]), place_digit(b.image, example.offsets[1])
    )


# -- deterministic generation -------------------------------------------------


class _ClassPools:
    """Per-class lists of pool positions, with the lowdata restriction applied."""

    def __init__(self, spec, pool, *, restrict=True):
        self.pool = pool
        by_class = {c: [] for c in range(10)}
        for pos, digit in enumerate(pool):
            by_class[digit.label].append(pos)
        for c in spec.eligible_classes():
            if not by_class[c]:
                raise ConfigurationError(f"source pool has no digits of class {c}")
        if restrict and spec.variant == "lowdata":
            candidates = np.array(by_class[spec.held_out])
            rng = np.random.default_rng((spec.seed, _STREAM_SETUP))
            take = min(spec.k, candidates.size)
            chosen = rng.choice(candidates, size=take, replace=False)
            by_class[spec.held_out] = sorted(int(p) for p in chosen)
        self.by_class = {c: np.asarray(v) for c, v in by_class.items()}

    def draw(self, rng, cls):
        positions = self.by_class[cls]
        return self.pool[positions[rng.integers(positions.size)]]


def _draw_pair(rng, pools, classes):
    c1 = classes[rng.integers(len(classes))]
    rest = tuple(c for c in classes if c != c1)
    c2 = rest[rng.integers(len(rest))]
    return pools.draw(rng, c1), pools.draw(rng, c2)


def training_example(spec, pools, index):
    """The ``index``-th training composite; pure function of (spec, pool, index)."""
    rng = np.random.default_rng((spec.seed, _STREAM_TRAIN, index))
    a, b = _draw_pair(rng, pools, spec.eligible_classes())
    ax, ay, bx, by = rng.integers(0, MAX_OFFSET + 1, size=4)
    return compose_pair(a, b, (int(ax), int(ay)), (int(bx), int(by)))


def gen_training_set(spec, pool, start=0, count=None):
    """Stream training composites deterministically from the spec seed."""
    pools = _ClassPools(spec, pool)
    n = spec.train_size if count is None else count
    for index in range(start, start + n):
        yield training_example(spec, pools, index)


def _perimeter_point(radius, t):
    """The t-th lattice point (of 8*radius) on the L-infinity sphere."""
    s = radius
    edge, u = divmod(int(t), 2 * s)
    if edge == 0:
        return (-s + u, -s)  # top edge, left to right
    if edge == 1:
        return (s, -s + u)  # right edge, top to bottom
    if edge == 2:
        return (s - u, s)  # bottom edge, right to left
    return (-s, s - u)  # left edge, bottom to top


def test_example(spec, pools, classes, stream, shift, index):
    rng = np.random.default_rng((spec.seed, stream, index))
    a, b = _draw_pair(rng, pools, classes)
    if shift == 0:
        dx = dy = 0
    else:
        dx, dy = _perimeter_point(shift, rng.integers(8 * shift))
    ax = int(rng.integers(max(0, -dx), MAX_OFFSET - max(0, dx) + 1))
    ay = int(rng.integers(max(0, -dy), MAX_OFFSET - max(0, dy) + 1))
    return compose_pair(a, b, (ax, ay), (ax + dx, ay + dy))


def gen_test_sets(spec, test_pool):
    """Build the evaluation suite: per shift level in {0,2,4,6,8}, one
    ten-digit set, plus one nine-digit set when a digit is held out.

    Test examples have their relative displacement pinned exactly to the
    shift level (direction uniform on the L-infinity sphere); the lowdata
    source restriction never applies to test data.
    """
    pools = _ClassPools(spec, test_pool, restrict=False)
    sets = {}
    variants = [("ten", tuple(range(10)), _STREAM_TEST_TEN)]
    if spec.held_out is not None:
        nine = tuple(c for c in range(10) if c != spec.held_out)
        variants.append(("nine", nine, _STREAM_TEST_NINE))
    for name, classes, base_stream in variants:
        for shift in TEST_SHIFTS:
            sets[(name, shift)] = [
                test_example(spec, pools, classes, base_stream + shift, shift, i)
                for i in range(spec.test_size_per_set)
            ]
    return sets


# -- serialization ------------------------------------------------------------

_MAGIC = b"MCDS"
_VERSION = 1
_HEADER = struct.Struct("<4sHBBBBIQQQQ")
_RECORD = struct.Struct("<1296sBBBHHBBBB")
RECORD_SIZE = _RECORD.size  # 1307
_KINDS = ("train", "test_nine", "test_ten")
_VARIANTS = ("full", "exclude", "lowdata")


@dataclass
class Dataset:
    """A materialized example list plus the recipe that produced it."""

    spec: DatasetSpec
    kind: str
    shift: int | None
    examples: list

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.spec == other.spec
            and self.kind == other.kind
            and self.shift == other.shift
            and self.examples == other.examples
        )


def _pack_header(spec, kind, shift, count):
    return _HEADER.pack(
        _MAGIC,
        _VERSION,
        _KINDS.index(kind),
        _VARIANTS.index(spec.variant),
        255 if spec.held_out is None else spec.held_out,
        255 if shift is None else shift,
        0 if spec.k is None else spec.k,
        spec.seed,
        spec.train_size,
        spec.test_size_per_set,
        count,
    )


def _pack_record(ex):
    (ax, ay), (bx, by) = ex.offsets
    return _RECORD.pack(
        ex.pixels.tobytes(),
        ex.labels[0],
        ex.labels[1],
        ex.shift,
        ex.provenance[0],
        ex.provenance[1],
        ax,
        ay,
        bx,
        by,
    )


def serialize(dataset):
    """Encode a dataset: versioned header, spec echo, then fixed-size records."""
    header = _pack_header(dataset.spec, dataset.kind, dataset.shift, len(dataset.examples))
    return header + b"".join(_pack_record(ex) for ex in dataset.examples)


def write_dataset(path, spec, kind, shift, examples, count):
    """Stream exactly ``count`` records to ``path`` without materializing them."""
    written = 0
    with open(path, "wb") as f:
        f.write(_pack_header(spec, kind, shift, count))
        for ex in examples:
            f.write(_pack_record(ex))
            written += 1
    if written != count:
        raise ConfigurationError(
            f"example stream yielded {written} records, header promised {count}"
        )


def deserialize(data):
    """Decode ``serialize`` output; format violations name the byte offset."""
    if len(data) < _HEADER.size:
        raise FormatError("container shorter than its header", offset=len(data))
    magic, version, kind_code, variant_code, held_out, shift, k, seed, train_size, test_size, count = _HEADER.unpack_from(
        data, 0
    )
    if magic != _MAGIC:
        raise FormatError(f"bad container magic {magic!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    if kind_code >= len(_KINDS) or variant_code >= len(_VARIANTS):
        raise FormatError(f"unknown kind/variant codes {kind_code}/{variant_code}", offset=6)
    expected = _HEADER.size + count * RECORD_SIZE
    if len(data) != expected:
        raise FormatError(
            f"container holds {len(data)} bytes, header implies {expected}",
            offset=min(len(data), expected),
        )
    spec = DatasetSpec(
        variant=_VARIANTS[variant_code],
        seed=seed,
        held_out=None if held_out == 255 else held_out,
        k=None if k == 0 else k,
        train_size=train_size,
        test_size_per_set=test_size,
    )
    examples = []
    offset = _HEADER.size
    for _ in range(count):
        pixels, la, lb, ex_shift, ia, ib, ax, ay, bx, by = _RECORD.unpack_from(data, offset)
        examples.append(
            CompositeExample(
                pixels=np.frombuffer(pixels, dtype=np.uint8).reshape(CANVAS, CANVAS),
                labels=(la, lb),
                shift=ex_shift,
                provenance=(ia, ib),
                offsets=((ax, ay), (bx, by)),
            )
        )
        offset += RECORD_SIZE
    return Dataset(
        spec=spec,
        kind=_KINDS[kind_code],
        shift=None if shift == 255 else shift,
        examples=examples,
    )


def save(dataset, path):
    Path(path).write_bytes(serialize(dataset))


def load(path):
    return deserialize(Path(path).read_bytes())
