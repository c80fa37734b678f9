"""Corpus ingestion, preprocessing, splits, and synthetic image generation.

Images move through the pipeline as (1, H, W) float64 tensors in [0, 1].
On-disk corpora are directory-per-class trees of 8-bit PGM files (P2 or P5,
decoded here without any imaging dependency); class ids come from sorted
directory names so every filesystem yields the same labeling.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .layers import DTYPE

log = logging.getLogger(__name__)

SYNTHETIC_FAMILIES = ("grating", "polygon", "blobs", "checker")


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W), values in [0, 1]
    label: int
    source_id: str


@dataclass
class DatasetSplit:
    train: list
    test: list
    class_names: tuple


# ---------------------------------------------------------------------------
# PGM codec

_WS = b" \t\r\n\x0b\x0c"


def _next_token(buf, pos):
    """Skip whitespace and # comments, return (token, end_pos)."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c in _WS:
            pos += 1
        elif c == b"#":
            nl = buf.find(b"\n", pos)
            pos = n if nl < 0 else nl + 1
        else:
            break
    if pos >= n:
        raise InputError("PGM header ends prematurely")
    end = pos
    while end < n and buf[end:end + 1] not in _WS and buf[end:end + 1] != b"#":
        end += 1
    return buf[pos:end], end


def read_pgm(path):
    """Decode a P2 (ASCII) or P5 (binary) PGM into a 2-D uint8 array."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    magic, pos = _next_token(buf, 0)
    if magic not in (b"P2", b"P5"):
        raise InputError(f"{path}: not a PGM file (magic {magic!r})")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _next_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise InputError(f"{path}: non-numeric {name} {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise InputError(f"{path}: empty raster {width}x{height}")
    if not 1 <= maxval <= 255:
        raise InputError(
            f"{path}: only 8-bit PGM supported, maxval {maxval}")
    count = width * height
    if magic == b"P5":
        start = pos + 1  # exactly one whitespace byte after maxval
        raster = buf[start:start + count]
        if len(raster) < count:
            raise InputError(f"{path}: raster truncated "
                             f"({len(raster)} of {count} bytes)")
        pixels = np.frombuffer(raster, dtype=np.uint8, count=count)
    else:
        values = []
        try:
            for _ in range(count):
                tok, pos = _next_token(buf, pos)
                values.append(int(tok))
        except InputError:
            raise InputError(f"{path}: raster truncated "
                             f"({len(values)} of {count} values)") from None
        except ValueError:
            raise InputError(f"{path}: non-numeric pixel value") from None
        pixels = np.asarray(values, dtype=np.int64)
    if pixels.max(initial=0) > maxval:
        raise InputError(f"{path}: pixel value exceeds maxval {maxval}")
    return pixels.astype(np.uint8).reshape(height, width)


def write_pgm(path, image, binary=True):
    """Write a 2-D uint8 array as P5 (or P2 when binary=False)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise InputError(f"PGM image must be 2-D, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise InputError(f"PGM image must be uint8, got {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as f:
        if binary:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(image.tobytes())
        else:
            f.write(f"P2\n{w} {h}\n255\n".encode("ascii"))
            for row in image:
                f.write((" ".join(str(int(v)) for v in row) + "\n")
                        .encode("ascii"))


# ---------------------------------------------------------------------------
# Preprocessing

def bilinear_resize(image, out_h, out_w):
    """Resample a 2-D grid with half-pixel-center coordinate mapping.

    Destination pixel d samples source coordinate (d + 0.5)*in/out - 0.5,
    clamped at the borders; resizing to the input size is the identity.
    """
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {image.shape}")
    in_h, in_w = image.shape
    if min(in_h, in_w) < 1 or min(out_h, out_w) < 1:
        raise InputError("image sizes must be positive")
    if (out_h, out_w) == (in_h, in_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5,
                 0.0, in_h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5,
                 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[np.ix_(y0, x0)] * (1.0 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1.0 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1.0 - wy) + bot * wy


def preprocess_image(raw, out_size=224):
    """Resize, center-crop, and scale an 8-bit grid to a [0,1] tensor.

    The resize target keeps the stock 256:224 ratio for any out_size, so
    out_size=224 resizes to 256 and crops rows/cols 16..239; smaller
    networks get the same proportional margin.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[0] < 2 or raw.shape[1] < 2:
        raise InputError(
            f"raw image must be 2-D and at least 2x2, got shape {raw.shape}")
    if out_size < 1:
        raise InputError(f"out_size must be >= 1, got {out_size}")
    target = round(out_size * 256 / 224)
    resized = bilinear_resize(raw.astype(DTYPE), target, target)
    off = (target - out_size) // 2
    crop = resized[off:off + out_size, off:off + out_size]
    return (crop / 255.0)[None, :, :]


# ---------------------------------------------------------------------------
# Ingestion and splitting

def ingest_directory(root, out_size=224):
    """Load a directory-per-class PGM tree.

    Returns (samples, class_names, skipped) where skipped counts files
    that failed to decode; each failure is logged and the file skipped.
    Samples are ordered by (class, sorted filename) and source_id is the
    path relative to root.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise InputError(f"{root} contains no class directories")
    samples = []
    skipped = 0
    class_names = tuple(d.name for d in class_dirs)
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        loaded = 0
        for path in files:
            try:
                raw = read_pgm(path)
                image = preprocess_image(raw, out_size=out_size)
            except InputError as exc:
                log.warning("skipping %s: %s", path, exc)
                skipped += 1
                continue
            samples.append(Sample(image=image, label=label,
                                  source_id=f"{class_dir.name}/{path.name}"))
            loaded += 1
        if loaded == 0:
            raise InputError(f"class directory {class_dir} has no usable images")
    if skipped:
        log.warning("ingest skipped %d undecodable file(s)", skipped)
    return samples, class_names, skipped


def split_dataset(samples, class_names, train_fraction=0.7, rng_seed=0):
    """Stratified train/test split: floor(n * fraction) per class to train.

    The per-class shuffle is seeded, so equal seeds give equal splits.
    Both sides must be nonempty for every class.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InputError(
            f"train_fraction must be in (0, 1), got {train_fraction}")
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(rng_seed)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        idx = np.asarray(by_class[label])
        n = idx.size
        n_train = math.floor(n * train_fraction)
        if n_train < 1 or n - n_train < 1:
            raise InputError(
                f"class {label} has {n} samples; fraction {train_fraction} "
                f"leaves an empty side")
        perm = rng.permutation(n)
        train_idx.extend(idx[perm[:n_train]].tolist())
        test_idx.extend(idx[perm[n_train:]].tolist())
    return DatasetSplit(
        train=[samples[i] for i in train_idx],
        test=[samples[i] for i in test_idx],
        class_names=tuple(class_names),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus

def _grating(u, v, variant, rng):
    angle = np.deg2rad(30.0 + 37.0 * variant)
    freq = 4.0 + 3.0 * variant
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * freq
                  * (u * np.cos(angle) + v * np.sin(angle)) + phase)
    return 0.5 + 0.45 * wave


def _polygon(u, v, variant, rng):
    k = 3 + variant
    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    rot = rng.uniform(0.0, 2.0 * np.pi)
    radius = 0.28 + rng.uniform(-0.03, 0.03)
    angles = rot + 2.0 * np.pi * np.arange(k) / k
    px = cx + radius * np.cos(angles)
    py = cy + radius * np.sin(angles)
    inside = np.ones_like(u, dtype=bool)
    for i in range(k):
        j = (i + 1) % k
        # sign of the cross product against edge i->j, vectorized over grid
        cross = ((px[j] - px[i]) * (v - py[i])
                 - (py[j] - py[i]) * (u - px[i]))
        inside &= cross >= 0
    return np.where(inside, 0.85, 0.15)


def _blobs(u, v, variant, rng, centers):
    img = np.zeros_like(u)
    for bx, by in centers:
        jx = bx + rng.uniform(-0.05, 0.05)
        jy = by + rng.uniform(-0.05, 0.05)
        sigma = 0.06 + rng.uniform(-0.01, 0.01)
        img += np.exp(-((u - jx) ** 2 + (v - jy) ** 2) / (2.0 * sigma ** 2))
    return np.clip(img, 0.0, 1.0)


def _checker(size, variant, rng):
    period = max(2, size // (4 + 2 * variant))
    ox = int(rng.integers(0, period))
    oy = int(rng.integers(0, period))
    yy, xx = np.mgrid[0:size, 0:size]
    cells = ((xx + ox) // period + (yy + oy) // period) % 2
    return 0.2 + 0.6 * cells.astype(DTYPE)


def generate_synthetic_corpus(num_classes, per_class, image_size, rng_seed):
    """Procedural multi-class grayscale corpus for desk-scale experiments.

    Class c draws from family c % 4 (oriented grating, filled convex
    polygon, Gaussian blob constellation, checkerboard) with parameters
    stepped by c // 4, so classes are visually separable while per-sample
    phase, position, and noise keep intra-class variance nonzero.
    Returns (samples, class_names); everything is determined by rng_seed.
    """
    if num_classes < 2:
        raise InputError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 10:
        raise InputError(f"per_class must be >= 10, got {per_class}")
    if image_size < 8:
        raise InputError(f"image_size must be >= 8, got {image_size}")
    rng = np.random.default_rng(rng_seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    u = (xx + 0.5) / image_size - 0.5
    v = (yy + 0.5) / image_size - 0.5
    samples = []
    class_names = []
    for c in range(num_classes):
        family = c % 4
        variant = c // 4
        name = f"c{c:02d}_{SYNTHETIC_FAMILIES[family]}"
        class_names.append(name)
        if family == 2:
            # Blob constellation geometry is fixed per class.
            count = 2 + variant
            base_angle = rng.uniform(0.0, 2.0 * np.pi)
            angles = base_angle + 2.0 * np.pi * np.arange(count) / count
            centers = [(0.3 * np.cos(a), 0.3 * np.sin(a)) for a in angles]
        for i in range(per_class):
            if family == 0:
                img = _grating(u, v, variant, rng)
            elif family == 1:
                img = _polygon(u, v, variant, rng)
            elif family == 2:
                img = _blobs(u, v, variant, rng, centers)
            else:
                img = _checker(image_size, variant, rng)
            img = np.clip(img + rng.normal(0.0, 0.04, img.shape), 0.0, 1.0)
            samples.append(Sample(image=img[None, :, :].astype(DTYPE),
                                  label=c,
                                  source_id=f"{name}/{i:04d}.pgm"))
    return samples, tuple(class_names)


def write_corpus(samples, class_names, root, extra=None):
    """Write samples as a directory-per-class PGM tree plus a manifest.

    Pixels are quantized to uint8. The manifest records per-class counts,
    the image size, and a sha256 over every file (paths and bytes, in
    sorted path order), so byte-identical corpora hash identically.
    extra entries (say, the generator seed) are merged into the manifest.
    """
    root = Path(root)
    counts = {name: 0 for name in class_names}
    for name in class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for s in samples:
        img8 = np.round(s.image[0] * 255.0).astype(np.uint8)
        write_pgm(root / s.source_id, img8)
        counts[class_names[s.label]] += 1
    digest = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.source_id):
        digest.update(s.source_id.encode("utf-8"))
        digest.update((root / s.source_id).read_bytes())
    manifest = {
        "class_counts": counts,
        "image_size": int(samples[0].image.shape[-1]) if samples else 0,
        "num_files": len(samples),
        "sha256": digest.hexdigest(),
    }
    if extra:
        manifest.update(extra)
    with open(root / "manifest.json", "w") as f:
        f.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
