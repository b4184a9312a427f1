"""Datasets: IDX ingestion, the synthetic blob-digits corpus, domain shifts
and class-balanced batching."""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, IDXFormatError


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    class_count: int
    provenance: str = ""
    pixel_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "pixel_range", (float(self.pixel_range[0]), float(self.pixel_range[1])))
        if images.ndim != 4 or labels.shape != (images.shape[0],):
            raise ContractViolation(f"dataset: images {images.shape} vs labels {labels.shape}")
        if images.shape[0] < 1:
            raise ContractViolation("dataset: needs at least one example")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ContractViolation(f"dataset: labels outside [0, {self.class_count})")
        lo, hi = self.pixel_range
        if images.min() < lo or images.max() > hi:
            raise ContractViolation(f"dataset: pixel values outside declared range [{lo}, {hi}]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def classes(self):
        return sorted(set(self.labels.tolist()))

    def subset(self, index):
        return LabeledDataset(self.images[index], self.labels[index], self.class_count,
                              self.provenance, self.pixel_range)

    def channel_range(self):
        """Per-channel (min, max) of the pixels actually present."""
        return self.images.min(axis=(0, 2, 3)), self.images.max(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

IDX_UBYTE = 0x08
MAX_COUNT = 10 ** 8
MAX_SIDE = 4096


def _read_idx(path, expected_ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: short header, {len(raw)} bytes", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0 or raw[2] != IDX_UBYTE:
        magic = int.from_bytes(raw[:4], "big")
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}", offset=0)
    ndim = raw[3]
    if ndim != expected_ndim:
        raise IDXFormatError(f"{path}: expected {expected_ndim} dimensions, header declares {ndim}",
                             offset=3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: short header, {len(raw)} of {header} bytes", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    if dims[0] == 0:
        raise IDXFormatError(f"{path}: zero item count", offset=4)
    if dims[0] > MAX_COUNT:
        raise IDXFormatError(f"{path}: item count {dims[0]} exceeds {MAX_COUNT}", offset=4)
    for i, d in enumerate(dims[1:], start=1):
        if d == 0 or d > MAX_SIDE:
            raise IDXFormatError(f"{path}: dimension {i} has size {d}, allowed 1..{MAX_SIDE}",
                                 offset=4 + 4 * i)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IDXFormatError(f"{path}: truncated payload, {len(raw) - header} of {size} bytes",
                             offset=len(raw))
    if len(raw) > header + size:
        raise IDXFormatError(f"{path}: {len(raw) - header - size} trailing bytes after payload",
                             offset=header + size)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims), header


def write_idx(path, array):
    """Write a uint8 array in IDX format (magic 0x0000080N)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if array.min() < 0 or array.max() > 255:
            raise ContractViolation("write_idx: values must fit in an unsigned byte")
        array = array.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, IDX_UBYTE, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())


def load_idx(images_path, labels_path, normalize=True, num_classes=None):
    """Parse an MNIST-style image/label pair into a single-channel dataset."""
    images, _ = _read_idx(images_path, 3)
    labels, label_header = _read_idx(labels_path, 1)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels",
                             offset=4)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise IDXFormatError(f"{labels_path}: label {labels[bad[0]]} >= declared class count {num_classes}",
                             offset=label_header + int(bad[0]))
    data = images.astype(np.float64)[:, None]
    hi = 255.0
    if normalize:
        data = data / 255.0
        hi = 1.0
    return LabeledDataset(data, labels.astype(np.int64), num_classes,
                          provenance=f"idx:{images_path}", pixel_range=(0.0, hi))


def to_rgb(dataset):
    """Replicate a single channel three times."""
    if dataset.images.shape[1] == 3:
        return dataset
    if dataset.images.shape[1] != 1:
        raise ContractViolation(f"to_rgb: expected 1 channel, got {dataset.images.shape[1]}")
    return LabeledDataset(np.repeat(dataset.images, 3, axis=1), dataset.labels, dataset.class_count,
                          dataset.provenance + "+rgb", dataset.pixel_range)


def pad_to(dataset, side):
    """Zero-pad images (centred) to ``side`` x ``side``."""
    h, w = dataset.images.shape[2:]
    if h > side or w > side:
        raise ContractViolation(f"pad_to: image {h}x{w} larger than {side}")
    top, left = (side - h) // 2, (side - w) // 2
    out = np.full(dataset.images.shape[:2] + (side, side), dataset.pixel_range[0])
    out[:, :, top:top + h, left:left + w] = dataset.images
    return LabeledDataset(out, dataset.labels, dataset.class_count, dataset.provenance, dataset.pixel_range)


# ---------------------------------------------------------------------------
# blob-digits
# ---------------------------------------------------------------------------

BLOB_CLASSES = ("disc", "ring", "cross", "bar")


def _blob(kind, side, rng):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy, cx = side / 2 - 0.5 + rng.uniform(-2.5, 2.5, size=2)
    r = side * rng.uniform(0.2, 0.32)
    d = np.hypot(yy - cy, xx - cx)
    width = rng.uniform(0.9, 1.6)
    if kind == "disc":
        img = 1.0 / (1.0 + np.exp((d - r) / 0.6))
    elif kind == "ring":
        img = np.exp(-((d - r) / width) ** 2)
    elif kind == "cross":
        img = np.maximum(np.exp(-((yy - cy) / width) ** 2), np.exp(-((xx - cx) / width) ** 2))
        img = img * (np.abs(yy - cy) < r + 1) * (np.abs(xx - cx) < r + 1)
    else:
        angle = rng.uniform(-0.6, 0.6) + np.pi / 4
        dist = np.abs((yy - cy) * np.cos(angle) - (xx - cx) * np.sin(angle))
        along = np.abs((yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle))
        img = np.exp(-(dist / width) ** 2) * (along < r + 2)
    return img * rng.uniform(0.6, 1.0)


def blob_digits(n_per_class, side=16, num_classes=4, seed=0, clutter=0.35, noise=0.08):
    """Grayscale-lifted-to-RGB parametric shapes, ``num_classes`` <= 4.

    Each image is one class shape plus a faint random distractor shape and
    pixel noise, so the task is learnable but not trivially separable.
    """
    if not 1 <= num_classes <= len(BLOB_CLASSES):
        raise ContractViolation(f"blob_digits: num_classes must be in 1..{len(BLOB_CLASSES)}")
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.empty((n, 1, side, side))
    for i, k in enumerate(labels):
        img = _blob(BLOB_CLASSES[k], side, rng)
        distractor = BLOB_CLASSES[rng.integers(len(BLOB_CLASSES))]
        img = img + clutter * rng.uniform(0.3, 1.0) * _blob(distractor, side, rng)
        img = img + noise * rng.standard_normal((side, side))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    ds = LabeledDataset(images[order], labels[order], num_classes,
                        provenance=f"blob_digits(n={n_per_class},seed={seed})")
    return to_rgb(ds)


# ---------------------------------------------------------------------------
# domain shift
# ---------------------------------------------------------------------------

def _rotate_bilinear(img, degrees):
    """Rotate each channel of [C, H, W] about the centre, zero fill outside."""
    c, h, w = img.shape
    t = np.deg2rad(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    sy = np.cos(t) * (yy - cy) - np.sin(t) * (xx - cx) + cy
    sx = np.sin(t) * (yy - cy) + np.cos(t) * (xx - cx) + cx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(img)
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        out[:, ok] += wt[ok] * img[:, yi[ok], xi[ok]]
    return out


def _check_range(op, name, value, lo, hi):
    if not lo <= value <= hi:
        raise ContractViolation(f"shift {op}: {name}={value} outside [{lo}, {hi}]")


def synth_domain_shift(base, spec, seed=0):
    """Apply a chain of transforms, e.g.
    ``[{"op": "tint", "scale": [1, .5, .2]}, {"op": "noise", "sigma": .1}]``.

    Ops: tint (per-channel scale/offset), noise (sigma), invert, rotate
    (degrees, each image drawn uniformly in [-degrees, degrees]), contrast
    (factor about the mid-range). Output is clamped to the pixel range.
    """
    spec = list(spec or [])
    if not spec:
        return LabeledDataset(base.images.copy(), base.labels.copy(), base.class_count,
                              base.provenance, base.pixel_range)
    rng = np.random.default_rng(seed)
    lo, hi = base.pixel_range
    x = base.images.copy()
    c = x.shape[1]
    for step in spec:
        op = step.get("op")
        extra = set(step) - {"op", "scale", "offset", "sigma", "degrees", "factor"}
        if extra:
            raise ContractViolation(f"shift {op}: unknown keys {sorted(extra)}")
        if op == "tint":
            scale = np.asarray(step.get("scale", [1.0] * c), dtype=np.float64)
            offset = np.asarray(step.get("offset", [0.0] * c), dtype=np.float64)
            if scale.shape != (c,) or offset.shape != (c,):
                raise ContractViolation(f"shift tint: need {c} scale and offset values")
            for s in scale:
                _check_range(op, "scale", s, 0.0, 2.0)
            for o in offset:
                _check_range(op, "offset", o, -1.0, 1.0)
            x = x * scale[None, :, None, None] + offset[None, :, None, None] * (hi - lo)
        elif op == "noise":
            sigma = float(step.get("sigma", 0.1))
            _check_range(op, "sigma", sigma, 0.0, 1.0)
            x = x + sigma * (hi - lo) * rng.standard_normal(x.shape)
        elif op == "invert":
            x = (lo + hi) - x
        elif op == "rotate":
            deg = float(step.get("degrees", 10.0))
            _check_range(op, "degrees", deg, -15.0, 15.0)
            angles = rng.uniform(-abs(deg), abs(deg), size=x.shape[0])
            x = np.stack([_rotate_bilinear(img, a) for img, a in zip(x, angles)])
        elif op == "contrast":
            f = float(step.get("factor", 1.0))
            _check_range(op, "factor", f, 0.0, 3.0)
            mid = (lo + hi) / 2
            x = (x - mid) * f + mid
        else:
            raise ContractViolation(f"shift: unknown op {op!r}")
        x = np.clip(x, lo, hi)
    return LabeledDataset(x, base.labels.copy(), base.class_count,
                          f"{base.provenance}|shift", base.pixel_range)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def balanced_batches(labels, batch_size, seed=0):
    """Index batches holding the same number (>= 2) of samples of every class.

    Each class is shuffled once and consumed cyclically, so an epoch covers
    every sample and small classes are repeated rather than dropped.
    """
    if isinstance(labels, LabeledDataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    classes = sorted(set(labels.tolist()))
    if not classes:
        raise ContractViolation("balanced_batches: no samples")
    per_class = batch_size // len(classes)
    if per_class < 2:
        raise ContractViolation(f"balanced_batches: batch size {batch_size} cannot hold 2 samples of each of "
                                f"{len(classes)} classes (class {classes[-1]} would be short)")
    rng = np.random.default_rng(seed)
    pools = {k: rng.permutation(np.flatnonzero(labels == k)) for k in classes}
    n_batches = -(-max(len(p) for p in pools.values()) // per_class)
    batches = []
    for b in range(n_batches):
        picks = []
        for k in classes:
            pool = pools[k]
            picks.append(pool[np.arange(b * per_class, (b + 1) * per_class) % len(pool)])
        batches.append(np.concatenate(picks))
    return batches
