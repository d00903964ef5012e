"""Synthetic desk-scale dataset: colored shapes with multi-granularity labels.

Each sample is a solid-color background with 3..8 opaque shapes (rectangles,
circles, triangles). Labels come in four granularities:

* fine       - shape class per pixel (0 = background)
* category   - fine classes folded through a fixed class->category table
* coarse     - fine labels degraded by 8x majority-vote downsample + nearest
               upsample
* coarse_category - the table applied to the coarse map

Noise is added on the 0..255 intensity scale and clamped back into range.
Everything here is a pure function of (config, seed); replays are
byte-identical.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass

import numpy as np

from .rng import STREAM_DATA, STREAM_NOISE, make_rng

IGNORE_INDEX = 255

# per-sample floors the generator re-rolls geometry to satisfy
_MIN_CLASS_FRACTION = 0.01
_MIN_BACKGROUND_FRACTION = 0.10
# dataset-wide floor from the pixel-histogram contract
_MIN_DATASET_FRACTION = 0.005

_MAX_SAMPLE_ATTEMPTS = 200
_MAX_DATASET_ATTEMPTS = 20


class DataError(ValueError):
    """Invalid data configuration or unsatisfiable generation constraint."""


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian noise of standard deviation sigma on 0..255."""

    sigma: float
    seed: int = 0

    def validate(self) -> "NoiseSpec":
        if not (self.sigma >= 0):
            raise DataError(f"sigma must be >= 0, got {self.sigma}")
        return self


@dataclass(frozen=True)
class DataConfig:
    n_samples: int
    height: int = 64
    width: int = 64
    n_classes: int = 5
    n_categories: int = 3
    seed: int = 0
    crop_height: int | None = None
    crop_width: int | None = None
    flip_probability: float = 0.5

    @property
    def out_height(self) -> int:
        return self.height if self.crop_height is None else self.crop_height

    @property
    def out_width(self) -> int:
        return self.width if self.crop_width is None else self.crop_width

    def validate(self) -> "DataConfig":
        if self.n_samples < 0:
            raise DataError(f"n_samples must be >= 0, got {self.n_samples}")
        if self.n_classes < 2:
            raise DataError(f"n_classes must be >= 2, got {self.n_classes}")
        if not (1 <= self.n_categories <= self.n_classes):
            raise DataError(f"n_categories must lie in 1..{self.n_classes}, "
                            f"got {self.n_categories}")
        if self.n_classes >= IGNORE_INDEX or self.n_categories >= IGNORE_INDEX:
            raise DataError(f"class counts must stay below the ignore index {IGNORE_INDEX}")
        for dim, val in (("height", self.height), ("width", self.width),
                         ("crop_height", self.out_height), ("crop_width", self.out_width)):
            if val < 16 or val % 16:
                raise DataError(f"{dim}={val} must be >= 16 and divisible by 16")
        if self.out_height > self.height or self.out_width > self.width:
            raise DataError("crop dims cannot exceed generated dims")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise DataError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        return self


@dataclass
class Sample:
    """One image pair with its four label maps (images CHW float32 0..255)."""

    clean: np.ndarray
    noisy: np.ndarray
    fine: np.ndarray
    coarse: np.ndarray
    category: np.ndarray
    coarse_category: np.ndarray


def class_to_category(n_classes: int, n_categories: int) -> np.ndarray:
    """Total, single-valued class->category table (contiguous class bands)."""
    if not (1 <= n_categories <= n_classes):
        raise DataError(f"need 1 <= n_categories <= n_classes, "
                        f"got {n_categories} and {n_classes}")
    return np.array([c * n_categories // n_classes for c in range(n_classes)],
                    dtype=np.int64)


def class_base_colors(n_classes: int) -> np.ndarray:
    """Deterministic palette: golden-ratio hue stepping, saturated and bright."""
    colors = np.zeros((n_classes, 3), dtype=np.float64)
    for c in range(n_classes):
        h = (0.13 + c * 0.61803398875) % 1.0
        colors[c] = colorsys.hsv_to_rgb(h, 0.85, 0.95)
    return np.rint(colors * 255.0).astype(np.float64)


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------


def _paint(image, labels, mask, color, cls) -> None:
    image[:, mask] = color[:, None]
    labels[mask] = cls


def _shape_mask(kind: str, h: int, w: int, rng) -> np.ndarray:
    """Boolean mask of one random opaque shape, sized 20..50% of the image."""
    yy, xx = np.mgrid[0:h, 0:w]
    lo, hi = 0.20, 0.50
    if kind == "rect":
        sh = int(rng.uniform(lo, hi) * h)
        sw = int(rng.uniform(lo, hi) * w)
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        return (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
    if kind == "circle":
        r = rng.uniform(lo, hi) * min(h, w) / 2.0
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # triangle: three vertices of a jittered box, half-plane rasterization
    sh = rng.uniform(lo, hi) * h
    sw = rng.uniform(lo, hi) * w
    y0 = rng.uniform(0, h - sh)
    x0 = rng.uniform(0, w - sw)
    pts = np.stack([y0 + rng.random(3) * sh, x0 + rng.random(3) * sw], axis=1)
    inside = np.ones((h, w), dtype=bool)

    def cross2(u, v):
        return u[0] * v[1] - u[1] * v[0]

    area = cross2(pts[1] - pts[0], pts[2] - pts[0])
    if abs(area) < 1.0:   # degenerate, nudge into a visible sliver
        pts[2] += (1.0, 1.0)
        area = cross2(pts[1] - pts[0], pts[2] - pts[0])
    for i in range(3):
        a, b = pts[i], pts[(i + 1) % 3]
        side = (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
        inside &= (side * np.sign(area) >= 0)
    return inside


_SHAPE_KINDS = ("rect", "circle", "triangle")


def _pick_background(base_colors: np.ndarray, rng) -> np.ndarray:
    """Random solid color kept at RGB distance >= 60 from every class color."""
    for _ in range(1000):
        bg = rng.uniform(0, 255, size=3)
        if np.min(np.linalg.norm(base_colors - bg, axis=1)) >= 60.0:
            return np.rint(bg)
    raise DataError("could not place a background color away from the palette")


def coarsen_labels(fine: np.ndarray, block: int = 8) -> np.ndarray:
    """Majority vote over block x block tiles, re-expanded by nearest neighbor.

    Ties resolve to the smallest label value.
    """
    h, w = fine.shape
    if h % block or w % block:
        raise DataError(f"label map {h}x{w} not divisible by block {block}")
    tiles = fine.reshape(h // block, block, w // block, block).transpose(0, 2, 1, 3)
    tiles = tiles.reshape(h // block, w // block, block * block)
    hi = int(fine.max()) + 1
    votes = (tiles[..., None] == np.arange(hi)).sum(axis=2)
    winners = votes.argmax(axis=-1).astype(fine.dtype)
    return np.repeat(np.repeat(winners, block, axis=0), block, axis=1)


def _render_sample(config: DataConfig, classes: np.ndarray, base_colors,
                   rng) -> tuple:
    """One attempt at drawing; returns (clean, fine) before validity checks."""
    h, w = config.height, config.width
    bg = _pick_background(base_colors, rng)
    image = np.empty((3, h, w), dtype=np.float64)
    image[:] = bg[:, None, None]
    labels = np.zeros((h, w), dtype=np.uint8)
    for cls in classes:
        kind = _SHAPE_KINDS[int(rng.integers(0, len(_SHAPE_KINDS)))]
        mask = _shape_mask(kind, h, w, rng)
        color = np.clip(base_colors[cls] + rng.uniform(-15, 15, size=3), 0, 255)
        _paint(image, labels, mask, np.rint(color), int(cls))
    if config.out_height < h or config.out_width < w:
        y0 = int(rng.integers(0, h - config.out_height + 1))
        x0 = int(rng.integers(0, w - config.out_width + 1))
        image = image[:, y0:y0 + config.out_height, x0:x0 + config.out_width]
        labels = labels[y0:y0 + config.out_height, x0:x0 + config.out_width]
    return image, labels


def _sample_ok(labels: np.ndarray, classes: np.ndarray) -> bool:
    n = labels.size
    if np.count_nonzero(labels == 0) < _MIN_BACKGROUND_FRACTION * n:
        return False
    for cls in np.unique(classes):
        if np.count_nonzero(labels == cls) < _MIN_CLASS_FRACTION * n:
            return False
    return True


def gen_synthetic(config: DataConfig, noise: NoiseSpec | None = None) -> list:
    """Generate the dataset; deterministic in (config, noise) alone.

    Shape classes are dealt round-robin from a seeded permutation over the
    whole dataset so every foreground class gets pixels; geometry that
    starves a class (occlusion, unlucky crops) is re-rolled per sample, and
    in the rare case the dataset-wide histogram still dips below the floor
    the whole set is re-rolled with fresh geometry.
    """
    config.validate()
    noise = (noise or NoiseSpec(0.0, seed=config.seed)).validate()
    if config.n_samples == 0:
        return []
    table = class_to_category(config.n_classes, config.n_categories)
    base_colors = class_base_colors(config.n_classes)
    fg = config.n_classes - 1

    plan_rng = make_rng(config.seed, STREAM_DATA)
    counts = plan_rng.integers(3, 9, size=config.n_samples)
    total_slots = int(counts.sum())
    deck = 1 + plan_rng.permutation(fg)
    slot_classes = deck[np.arange(total_slots) % fg]
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    # the histogram floor is only enforceable once every class has slots to spare
    check_histogram = total_slots >= 2 * fg

    for dataset_attempt in range(_MAX_DATASET_ATTEMPTS):
        samples = []
        for i in range(config.n_samples):
            classes = slot_classes[offsets[i]:offsets[i] + int(counts[i])]
            for attempt in range(_MAX_SAMPLE_ATTEMPTS):
                rng = make_rng(config.seed, STREAM_DATA, i, attempt, dataset_attempt)
                image, fine = _render_sample(config, classes, base_colors, rng)
                if _sample_ok(fine, classes):
                    break
            else:
                raise DataError(f"sample {i}: could not keep every shape class "
                                f"above {_MIN_CLASS_FRACTION:.0%} of pixels")
            clean = image.astype(np.float32)
            nrng = make_rng(noise.seed, STREAM_NOISE, i)
            z = nrng.standard_normal(clean.shape).astype(np.float32)
            noisy = np.rint(np.clip(clean + np.float32(noise.sigma) * z, 0, 255))
            coarse = coarsen_labels(fine)
            samples.append(Sample(
                clean=clean,
                noisy=noisy.astype(np.float32),
                fine=fine,
                coarse=coarse,
                category=table[fine].astype(np.uint8),
                coarse_category=table[coarse].astype(np.uint8),
            ))
        if not check_histogram:
            return samples
        hist = class_pixel_histogram(samples, config.n_classes)
        if hist.min() >= _MIN_DATASET_FRACTION * hist.sum():
            return samples
    starved = int(np.argmin(hist))
    raise DataError(f"class {starved} stayed below {_MIN_DATASET_FRACTION:.1%} "
                    f"of dataset pixels after {_MAX_DATASET_ATTEMPTS} attempts")


def class_pixel_histogram(samples, n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.fine.ravel(), minlength=n_classes)[:n_classes]
    return counts


# --------------------------------------------------------------------------
# Noise and normalization
# --------------------------------------------------------------------------


def noise_field(shape, rng) -> np.ndarray:
    """Unit-variance Gaussian draw; scaled by sigma at the point of use so a
    fixed seed yields the same field for every sigma."""
    return rng.standard_normal(shape).astype(np.float32)


def add_gaussian_noise(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """image + sigma * N(0, 1), clamped to [0, 255]. No quantization here."""
    spec.validate()
    z = noise_field(image.shape, make_rng(spec.seed, STREAM_NOISE))
    return np.clip(image.astype(np.float32) + np.float32(spec.sigma) * z, 0, 255)


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise DataError(f"std must be positive per channel, got {std.ravel().tolist()}")
    return (image.astype(np.float32) - mean) / std


def denormalize(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return image.astype(np.float32) * std + mean


def dataset_stats(samples) -> tuple:
    """Per-channel mean/std over all clean pixels. Zero spread maps to std 1
    so constant datasets normalize to zeros instead of dividing by zero."""
    if not samples:
        raise DataError("cannot compute statistics of an empty dataset")
    stacked = np.stack([s.clean for s in samples]).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean, std


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


def flip_sample(sample: Sample) -> Sample:
    """Mirror image and every label map about the vertical axis together."""
    return Sample(
        clean=sample.clean[..., ::-1].copy(),
        noisy=sample.noisy[..., ::-1].copy(),
        fine=sample.fine[..., ::-1].copy(),
        coarse=sample.coarse[..., ::-1].copy(),
        category=sample.category[..., ::-1].copy(),
        coarse_category=sample.coarse_category[..., ::-1].copy(),
    )


def random_hflip(sample: Sample, rng, p: float = 0.5) -> Sample:
    return flip_sample(sample) if rng.random() < p else sample


# --------------------------------------------------------------------------
# Netpbm I/O (binary P6 / P5, maxval 255 only)
# --------------------------------------------------------------------------


class PnmError(ValueError):
    """Malformed or unsupported netpbm payload."""


def _write_pnm(path, magic: bytes, payload: np.ndarray, w: int, h: int) -> None:
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())


def _read_pnm_header(f, want: bytes):
    magic = f.read(2)
    if magic == b"P3" or magic == b"P2":
        raise PnmError(f"ASCII netpbm variant {magic.decode('ascii', 'replace')} "
                       "is not supported")
    if magic != want:
        raise PnmError(f"bad magic {magic!r}, expected {want.decode('ascii')}")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":   # comment runs to end of line
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok.isdigit():
            raise PnmError(f"malformed header token {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise PnmError(f"bad dimensions {w}x{h}")
    return w, h


def save_ppm(path, image: np.ndarray) -> None:
    """image: [3, H, W], values 0..255 (rounded and clipped on write)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise PnmError(f"expected [3, H, W] image, got {image.shape}")
    data = np.rint(np.clip(image, 0, 255)).astype(np.uint8)
    _write_pnm(path, b"P6", data.transpose(1, 2, 0), image.shape[2], image.shape[1])


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6")
        raw = f.read(w * h * 3 + 1)
    if len(raw) != w * h * 3:
        raise PnmError(f"payload holds {len(raw)} bytes, expected exactly {w * h * 3}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3) \
             .transpose(2, 0, 1).astype(np.float32)


def save_pgm(path, labels: np.ndarray) -> None:
    """labels: [H, W] integer map with values 0..255."""
    if labels.ndim != 2:
        raise PnmError(f"expected [H, W] label map, got {labels.shape}")
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise PnmError("label values must fit in a byte")
    _write_pnm(path, b"P5", arr.astype(np.uint8), labels.shape[1], labels.shape[0])


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5")
        raw = f.read(w * h + 1)
    if len(raw) != w * h:
        raise PnmError(f"payload holds {len(raw)} bytes, expected exactly {w * h}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


# --------------------------------------------------------------------------
# Dataset directory layout
# --------------------------------------------------------------------------

_FIELDS = (("clean", "ppm"), ("noisy", "ppm"), ("fine", "pgm"),
           ("coarse", "pgm"), ("cat", "pgm"), ("coarsecat", "pgm"))
_ATTRS = ("clean", "noisy", "fine", "coarse", "category", "coarse_category")


def save_dataset(dirpath, samples, config: DataConfig, sigma: float) -> dict:
    """Write NNNN_<field> files plus meta.json; returns the meta document."""
    os.makedirs(dirpath, exist_ok=True)
    for i, s in enumerate(samples):
        for (field, ext), attr in zip(_FIELDS, _ATTRS):
            path = os.path.join(dirpath, f"{i:04d}_{field}.{ext}")
            (save_ppm if ext == "ppm" else save_pgm)(path, getattr(s, attr))
    if samples:
        mean, std = dataset_stats(samples)
    else:
        mean, std = np.zeros(3), np.ones(3)
    meta = {
        "n_samples": len(samples),
        "n_classes": config.n_classes,
        "n_categories": config.n_categories,
        "class_to_category": class_to_category(
            config.n_classes, config.n_categories).tolist(),
        "height": config.out_height,
        "width": config.out_width,
        "seed": config.seed,
        "sigma": float(sigma),
        "mean": [float(v) for v in mean],
        "std": [float(v) for v in std],
    }
    with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return meta


def load_dataset(dirpath) -> tuple:
    """Read samples and meta.json back; returns (samples, meta)."""
    meta_path = os.path.join(dirpath, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataError(f"no meta.json under {dirpath}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    samples = []
    for i in range(int(meta["n_samples"])):
        parts = {}
        for (field, ext), attr in zip(_FIELDS, _ATTRS):
            path = os.path.join(dirpath, f"{i:04d}_{field}.{ext}")
            if not os.path.isfile(path):
                raise DataError(f"dataset is missing {path}")
            parts[attr] = (load_ppm if ext == "ppm" else load_pgm)(path)
        samples.append(Sample(**parts))
    return samples, meta
