"""Datasets: a synthetic shapes generator and a PPM/PGM directory loader."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

SHAPES = ("square", "disc", "cross", "hbars", "vbars", "ring", "triangle", "diagonal", "xcross", "frame")


@dataclass
class Dataset:
    """Images ``(N, H, W, C)`` in [0, 1] with integer labels.

    ``boxes`` holds ``(row0, col0, row1, col1)`` (end-exclusive) object boxes
    for synthetic data, ``None`` otherwise.
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    boxes: np.ndarray | None = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices],
            self.labels[indices],
            self.n_classes,
            None if self.boxes is None else self.boxes[indices],
            [self.names[i] for i in indices] if self.names else [],
        )


@dataclass
class SynthSpec:
    n_classes: int = 2
    image_size: tuple = (32, 32, 3)
    per_class: int | list = 100
    noise: float = 0.2
    shape_size: tuple = (10, 16)
    background: float = 0.5


def _shape_mask(kind: str, size: int) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size]
    mid = (size - 1) / 2
    t = max(1, size // 5)
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "disc":
        return (r - mid) ** 2 + (c - mid) ** 2 <= (size / 2) ** 2
    if kind == "cross":
        return (np.abs(r - mid) < t) | (np.abs(c - mid) < t)
    if kind == "hbars":
        return (r // t) % 2 == 0
    if kind == "vbars":
        return (c // t) % 2 == 0
    if kind == "ring":
        d = np.sqrt((r - mid) ** 2 + (c - mid) ** 2)
        return (d <= size / 2) & (d >= size / 2 - t)
    if kind == "triangle":
        return c <= r
    if kind == "diagonal":
        return np.abs(r - c) < t
    if kind == "xcross":
        return (np.abs(r - c) < t) | (np.abs(r + c - (size - 1)) < t)
    frame = np.ones((size, size), bool)
    frame[t:-t, t:-t] = False
    return frame


def _texture(rng, h, w, c):
    raw = rng.uniform(-1.0, 1.0, size=(h, w, c))
    smooth = ndimage.gaussian_filter(raw, sigma=(1.0, 1.0, 0), mode="wrap")
    peak = np.abs(smooth).max()
    return smooth / peak if peak > 0 else smooth


def generate_synthetic_dataset(spec: SynthSpec, seed: int = 0) -> Dataset:
    """One class-determined shape per image at a random position over textured noise.

    The shape's colour is random, so only its geometry identifies the class.
    Pixels outside the recorded box differ from ``spec.background`` by at most
    ``spec.noise``.
    """
    if not 2 <= spec.n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in 2..{len(SHAPES)}")
    counts = spec.per_class if isinstance(spec.per_class, (list, tuple)) else [spec.per_class] * spec.n_classes
    h, w, ch = spec.image_size
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, k, dtype=np.int64) for k, n in enumerate(counts)])
    labels = labels[rng.permutation(len(labels))]
    images = np.empty((len(labels), h, w, ch), dtype=np.float32)
    boxes = np.empty((len(labels), 4), dtype=np.int64)
    lo, hi = spec.shape_size
    for i, label in enumerate(labels):
        size = int(rng.integers(lo, hi + 1))
        r0 = int(rng.integers(0, h - size + 1))
        c0 = int(rng.integers(0, w - size + 1))
        # far enough from the background that the shape is visible in every channel mix
        colour = rng.uniform(0.0, 0.25, size=ch) + rng.choice([0.0, 0.75], size=ch)
        if np.abs(colour - spec.background).max() < 0.3:
            colour[rng.integers(ch)] = 1.0
        img = np.full((h, w, ch), spec.background, dtype=np.float64)
        if spec.noise > 0:
            img += spec.noise * _texture(rng, h, w, ch)
        mask = _shape_mask(SHAPES[label], size)
        rows, cols = np.nonzero(mask)
        img[r0 + rows, c0 + cols] = colour
        if spec.noise > 0:
            img[r0 + rows, c0 + cols] += 0.5 * spec.noise * rng.uniform(-1, 1, size=(len(rows), ch))
        images[i] = np.clip(img, 0.0, 1.0)
        boxes[i] = (r0 + rows.min(), c0 + cols.min(), r0 + rows.max() + 1, c0 + cols.max() + 1)
    return Dataset(images, labels, spec.n_classes, boxes)


# ---------------------------------------------------------------------------
# netpbm I/O

def _read_token(data: bytes, pos: int):
    while pos < len(data):
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("malformed header: unexpected end of data")
    return data[start:pos], pos


def read_netpbm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM (P5) or PPM (P6) file; returns raw integer pixels ``(H, W, C)`` and maxval."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: malformed header, expected P5 or P6, got {magic!r}")
    try:
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        m_tok, pos = _read_token(data, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed header ({exc})") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: malformed header, bad size or maxval")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2" if maxval > 255 else np.uint8)
    need = width * height * channels * dtype.itemsize
    if len(data) - pos < need:
        raise ValueError(f"{path}: truncated pixel data at offset {len(data)}, need {need} bytes after {pos}")
    pix = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    return pix.reshape(height, width, channels), maxval


def write_netpbm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    h, w, c = pixels.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    dtype = np.dtype(">u2" if maxval > 255 else np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=dtype).tobytes())


def load_image_dataset(dir_path, labels_csv="labels.csv", n_classes: int | None = None) -> Dataset:
    """Load ``.ppm``/``.pgm`` images listed in a ``filename,label`` CSV, in CSV order.

    8-bit pixels are scaled to [0, 1].
    """
    root = Path(dir_path)
    csv_path = Path(labels_csv) if Path(labels_csv).is_absolute() else root / labels_csv
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{csv_path}: no samples listed")
    if set(rows[0].keys()) != {"filename", "label"}:
        raise ValueError(f"{csv_path}: expected columns filename,label, got {list(rows[0].keys())}")
    images, labels, shape = [], [], None
    for row in rows:
        path = root / row["filename"]
        if not path.is_file():
            raise ValueError(f"{csv_path}: references {row['filename']} which is not in {root}")
        pix, maxval = read_netpbm(path)
        img = (pix.astype(np.float64) / maxval).astype(np.float32)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(f"{path}: dimension mismatch, {img.shape} vs {shape}")
        images.append(img)
        labels.append(int(row["label"]))
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"{csv_path}: labels must lie in [0, {n_classes})")
    return Dataset(np.stack(images), labels, n_classes, None, [r["filename"] for r in rows])
