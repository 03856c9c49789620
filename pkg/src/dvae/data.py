"""Synthetic image dataset and P6 PPM folder loading.

Eight procedural classes rendered at [-1,1] float32; identical specs
produce bitwise-identical datasets. PPM (P6, maxval 255) is the only
image codec.
"""

import os
import warnings
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = (
    "uniform-color", "linear-gradient", "circle", "square",
    "stripes", "checker", "radial-gradient", "noise-texture",
)


@dataclass
class SyntheticSpec:
    count: int
    image_size: int = 32
    class_count: int = 8
    seed: int = 0


@dataclass
class Dataset:
    images: np.ndarray  # [n,3,H,W] float32 in [-1,1]
    labels: np.ndarray  # [n] int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [-1,1]")

    def __len__(self):
        return len(self.images)


def _coords(size):
    y, x = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return (y + 0.5) / size, (x + 0.5) / size


def _lerp(c0, c1, t):
    return c0[:, None, None] * (1.0 - t) + c1[:, None, None] * t


def _render(cls, size, rng):
    c0 = rng.uniform(-1, 1, 3)
    c1 = rng.uniform(-1, 1, 3)
    y, x = _coords(size)
    if cls == 0:  # uniform-color: exactly constant
        img = np.broadcast_to(c0[:, None, None], (3, size, size)).copy()
    elif cls == 1:  # linear-gradient
        theta = rng.uniform(0, 2 * np.pi)
        proj = x * np.cos(theta) + y * np.sin(theta)
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
        img = _lerp(c0, c1, t)
    elif cls == 2:  # circle
        cy, cx = rng.uniform(0.3, 0.7, 2)
        r = rng.uniform(0.15, 0.35)
        inside = (y - cy) ** 2 + (x - cx) ** 2 < r * r
        img = _lerp(c0, c1, inside.astype(np.float64))
    elif cls == 3:  # square
        y0, x0 = rng.uniform(0.1, 0.5, 2)
        hgt, wid = rng.uniform(0.2, 0.4, 2)
        inside = (y >= y0) & (y < y0 + hgt) & (x >= x0) & (x < x0 + wid)
        img = _lerp(c0, c1, inside.astype(np.float64))
    elif cls == 4:  # stripes
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 10) / size
        phase = rng.uniform(0, 1)
        proj = x * np.cos(theta) + y * np.sin(theta)
        band = ((proj / period + phase) % 1.0) < 0.5
        img = _lerp(c0, c1, band.astype(np.float64))
    elif cls == 5:  # checker
        cell = int(rng.choice([2, 4, 8]))
        oy, ox = rng.integers(0, cell, 2)
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        parity = (((yy + oy) // cell) + ((xx + ox) // cell)) % 2
        img = _lerp(c0, c1, parity.astype(np.float64))
    elif cls == 6:  # radial-gradient
        cy, cx = rng.uniform(0.2, 0.8, 2)
        d = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
        img = _lerp(c0, c1, np.clip(d / d.max(), 0, 1))
    elif cls == 7:  # noise-texture
        amp = rng.uniform(0.2, 0.6)
        base = rng.uniform(-0.4, 0.4, 3)
        img = base[:, None, None] + amp * rng.uniform(-1, 1, (3, size, size))
    else:
        raise ValueError(f"no renderer for class {cls}")
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def gen_synthetic(spec):
    """Deterministic class-balanced synthetic dataset."""
    if spec.count <= 0:
        raise ValueError(f"count must be positive, got {spec.count}")
    if not 1 <= spec.class_count <= len(CLASS_NAMES):
        raise ValueError(f"class_count must be in [1,{len(CLASS_NAMES)}], got {spec.class_count}")
    images = np.empty((spec.count, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(spec.count, dtype=np.int64)
    for i in range(spec.count):
        cls = i % spec.class_count
        rng = np.random.default_rng([spec.seed, i])
        images[i] = _render(cls, spec.image_size, rng)
        labels[i] = cls
    return Dataset(images, labels)


def to_bytes(img):
    """[-1,1] float image -> uint8 (round half up via +0.5 floor)."""
    return np.clip(np.floor((np.asarray(img) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def from_bytes(raw):
    """uint8 -> [-1,1] float32."""
    return (raw.astype(np.float32) / 255.0) * 2.0 - 1.0


def ppm_write(path, img):
    """Write a [3,H,W] float image in [-1,1] as binary P6."""
    a = to_bytes(img)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"ppm_write expects [3,H,W], got {a.shape}")
    h, w = a.shape[1], a.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(a.transpose(1, 2, 0)).tobytes())


def pgm_write(path, grid):
    """Write a 2D array as binary P5 (values scaled to 0..255)."""
    a = np.asarray(grid, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"pgm_write expects a 2D grid, got {a.shape}")
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    raw = np.clip(np.floor(scaled * 255 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def _ppm_tokens(buf, path):
    """First three header tokens after the magic, honoring '#' comments."""
    tokens = []
    i = 2  # past "P6"
    while len(tokens) < 3:
        if i >= len(buf):
            raise ValueError(f"{path}: truncated PPM header")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace():
                j += 1
            tokens.append(buf[i:j])
            i = j
    return tokens, i + 1  # single whitespace after maxval


def ppm_read(path):
    """Read a binary P6 PPM into a [3,H,W] float32 image in [-1,1]."""
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 PPM")
    tokens, start = _ppm_tokens(buf, path)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ValueError(f"{path}: malformed PPM header") from e
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}, only 255 is accepted")
    need = w * h * 3
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start) \
        if len(buf) - start >= need else None
    if raw is None:
        raise ValueError(f"{path}: pixel data truncated")
    return from_bytes(raw.reshape(h, w, 3).transpose(2, 0, 1))


def _resize_nearest(img, size):
    c, h, w = img.shape
    if (h, w) == (size, size):
        return img
    ys = (np.arange(size) * h // size).astype(np.int64)
    xs = (np.arange(size) * w // size).astype(np.int64)
    return img[:, ys][:, :, xs]


def load_image_folder(path, image_size=32):
    """Load every .ppm in a directory; labels come from labels.csv when present."""
    names = sorted(n for n in os.listdir(path) if n.endswith(".ppm"))
    if not names:
        raise ValueError(f"no .ppm files found in {path!r}")
    label_map = {}
    label_file = os.path.join(path, "labels.csv")
    if os.path.exists(label_file):
        with open(label_file, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                fname, cls = line.rsplit(",", 1)
                label_map[fname] = int(cls)
    else:
        warnings.warn(f"{path}: no labels.csv, assigning class 0 to every image")
    images = np.stack([_resize_nearest(ppm_read(os.path.join(path, n)), image_size)
                       for n in names])
    labels = np.array([label_map.get(n, 0) for n in names], dtype=np.int64)
    return Dataset(images, labels)


def batch_iter(dataset, batch_size, seed):
    """Endless batches; each epoch is a fresh seeded shuffle, partial tail dropped."""
    n = len(dataset)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            yield dataset.images[idx], dataset.labels[idx]
