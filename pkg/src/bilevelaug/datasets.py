"""Synthetic classification tasks with controllable invariances, and tensor file IO.

translated_glyphs: one fixed thin glyph per class on a 16x16 canvas; training
images are centered, test images are integer-translated, so the train/test
gap is exactly a translation invariance the augmenter can close.

hue_shifted_blobs: class = glyph shape, but each class also gets its own base
hue at train time; test images are hue-rotated, so a classifier that takes
the color shortcut fails at test time unless hue augmentation forced it onto
the shape feature.  The generator rotates hue with the same math as the
differentiable color op, which makes the op its own oracle for the shift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor
from .vision import hue_rotate_values

GLYPH_SIZE = 7


def _glyph_patterns() -> list[np.ndarray]:
    cross = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    cross[GLYPH_SIZE // 2, :] = 1.0
    cross[:, GLYPH_SIZE // 2] = 1.0
    square = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    square[0, :] = square[-1, :] = 1.0
    square[:, 0] = square[:, -1] = 1.0
    diagonal = np.eye(GLYPH_SIZE)
    tee = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    tee[0, :] = 1.0
    tee[:, GLYPH_SIZE // 2] = 1.0
    return [cross, square, diagonal, tee]


GLYPHS = _glyph_patterns()


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int
    split: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError("images must be (N, C, H, W) with one label per image")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "translated_glyphs"
    image_size: int = 16
    num_classes: int = 4
    samples_per_class: int = 100
    test_samples_per_class: int = 100
    train_translate_px: int = 0
    test_translate_px: int = 3
    train_hue_range: float = 0.0
    test_hue_range: float = 0.25
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > len(GLYPHS):
            raise ValueError(f"num_classes must be in [2, {len(GLYPHS)}]")
        if self.test_translate_px < self.train_translate_px:
            raise ValueError("test translation range must contain the train range")
        if self.test_hue_range < self.train_hue_range:
            raise ValueError("test hue range must contain the train range")

    def manifest(self) -> dict:
        return {
            "task": self.task,
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "samples_per_class": self.samples_per_class,
            "test_samples_per_class": self.test_samples_per_class,
            "train_translate_px": self.train_translate_px,
            "test_translate_px": self.test_translate_px,
            "train_hue_range": self.train_hue_range,
            "test_hue_range": self.test_hue_range,
            "noise_sigma": self.noise_sigma,
        }


_AA_KERNEL = np.array([0.25, 0.5, 0.25])


def glyph_canvas(class_idx: int, size: int) -> np.ndarray:
    """The centered, noise-free glyph for a class, shape (size, size).

    Strokes are rendered with a light anti-aliasing blur so that subpixel
    warps of a canvas stay on the same image manifold as integer shifts;
    razor-thin binary strokes would make every fractional translation look
    like a different (dimmer) glyph.
    """
    off = (size - GLYPH_SIZE) // 2
    canvas = np.zeros((size, size))
    canvas[off : off + GLYPH_SIZE, off : off + GLYPH_SIZE] = GLYPHS[class_idx]
    canvas = np.apply_along_axis(lambda r: np.convolve(r, _AA_KERNEL, mode="same"), 0, canvas)
    canvas = np.apply_along_axis(lambda r: np.convolve(r, _AA_KERNEL, mode="same"), 1, canvas)
    peak = canvas.max()
    return np.clip(canvas / peak, 0.0, 1.0) if peak > 0 else canvas


def shift_images(images: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Integer-shift each image by (dy, dx), filling vacated pixels with zeros."""
    images = np.asarray(images)
    out = np.zeros_like(images)
    _, _, h, w = images.shape
    for i, (dy, dx) in enumerate(np.asarray(offsets, dtype=int)):
        ys = slice(max(dy, 0), min(h + dy, h))
        xs = slice(max(dx, 0), min(w + dx, w))
        ys_src = slice(max(-dy, 0), min(h - dy, h))
        xs_src = slice(max(-dx, 0), min(w - dx, w))
        out[i, :, ys, xs] = images[i, :, ys_src, xs_src]
    return out


def _check_glyph_fits(size: int, max_px: int):
    margin = (size - GLYPH_SIZE) // 2
    if max_px > margin:
        raise ValueError(
            f"glyph does not fit: translation {max_px}px exceeds the {margin}px margin of a {size}px canvas"
        )


def gen_translated_glyphs(spec: SyntheticTaskSpec, rng) -> tuple[Dataset, Dataset]:
    """Centered train glyphs, integer-translated test glyphs, additive noise."""
    _check_glyph_fits(spec.image_size, max(spec.train_translate_px, spec.test_translate_px))

    def make(split, n_per, max_px):
        images, labels, offsets, bases = [], [], [], []
        for cls in range(spec.num_classes):
            canvas = glyph_canvas(cls, spec.image_size)
            for _ in range(n_per):
                base = canvas + rng.normal(0.0, spec.noise_sigma, canvas.shape)
                base = np.clip(base, 0.0, 1.0)[None]
                if max_px > 0:
                    off = rng.integers(-max_px, max_px + 1, size=2)
                else:
                    off = np.zeros(2, dtype=int)
                images.append(shift_images(base[None], off[None])[0])
                labels.append(cls)
                offsets.append(off)
                bases.append(base)
        meta = {
            "offsets": np.array(offsets),
            "bases": np.array(bases),
            "manifest": spec.manifest(),
        }
        return Dataset(np.array(images), np.array(labels), spec.num_classes, split, meta)

    train = make("train", spec.samples_per_class, spec.train_translate_px)
    test = make("test", spec.test_samples_per_class, spec.test_translate_px)
    return train, test


def blob_base(class_idx: int, size: int) -> np.ndarray:
    """Class-shaped colored glyph on a chroma-free gray background, (3, size, size).

    Values stay well below 1.0 so the color pipeline's worst-case additive
    brightness (+0.5 at a freshly initialized augmenter) cannot clamp-saturate
    the image; saturated pixels carry no gradient.
    """
    mask = glyph_canvas(class_idx, size)
    # Mostly-chromatic shape signal: the luma contrast against the background
    # is kept small so hue-robust features are required, and peak values stay
    # far enough below 1.0 that the color pipeline's worst-case brightness
    # cannot clamp-saturate the glyph away.
    fg = np.array([0.50, 0.16, 0.16])
    bg = 0.2  # gray: zero chroma, invariant under hue rotation
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = bg + mask * (fg[c] - bg)
    return img


def class_base_hue(class_idx: int, num_classes: int) -> float:
    return -0.5 + (class_idx + 0.5) / num_classes


def gen_hue_shifted_blobs(spec: SyntheticTaskSpec, rng) -> tuple[Dataset, Dataset]:
    """Shape = class; hue correlates with class at train time but drifts at test."""

    def make(split, n_per, hue_range):
        images, labels, shifts = [], [], []
        for cls in range(spec.num_classes):
            base = blob_base(cls, spec.image_size)
            base_hue = class_base_hue(cls, spec.num_classes)
            for _ in range(n_per):
                shift = rng.uniform(-hue_range, hue_range) if hue_range > 0 else 0.0
                img = hue_rotate_values(base, base_hue + shift)
                img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
                images.append(np.clip(img, 0.0, 1.0))
                labels.append(cls)
                shifts.append(shift)
        meta = {"hue_shifts": np.array(shifts), "manifest": spec.manifest()}
        return Dataset(np.array(images), np.array(labels), spec.num_classes, split, meta)

    train = make("train", spec.samples_per_class, spec.train_hue_range)
    test = make("test", spec.test_samples_per_class, spec.test_hue_range)
    return train, test


def generate(spec: SyntheticTaskSpec, rng) -> tuple[Dataset, Dataset]:
    if spec.task == "translated_glyphs":
        return gen_translated_glyphs(spec, rng)
    if spec.task == "hue_shifted_blobs":
        return gen_hue_shifted_blobs(spec, rng)
    raise ValueError(f"unknown task {spec.task!r}")


# ---------------------------------------------------------------------------
# BLVT tensor container: bit-exact, little-endian, float64 payloads.


MAGIC = b"BLVT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Corrupt or unsupported BLVT file."""


def save_tensors(path, named) -> None:
    """Write named float64 tensors; the round trip through load is bitwise exact."""
    entries = []
    seen = set()
    for name, value in named.items():
        try:
            encoded = name.encode("ascii")
        except UnicodeEncodeError:
            raise FormatError(f"tensor name must be ASCII: {name!r}") from None
        if name in seen:
            raise FormatError(f"duplicate tensor name: {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(value.value if isinstance(value, Tensor) else value, dtype="<f8")
        entries.append((encoded, arr))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
        for encoded, arr in entries:
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise FormatError("bad magic; not a BLVT file")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("ascii")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            n_items = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 8 * n_items)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last entry")
    return out
