"""Differentiable image transformations.

Affine warps use corner-aligned normalized coordinates: x_norm(j) maps column
j to 2j/(W-1) - 1, so the image corners sit exactly at (-1,-1) and (1,1).
Sampling is bilinear with zero padding: corner pixels outside the image
contribute zeros.  Color operators run in a fixed order (hue, saturation,
contrast, brightness) followed by a clamp to [0,1], and all-zero parameters
are the identity.

Hue is a rotation of the chroma plane of a fixed luma/chroma decomposition,
which keeps it differentiable everywhere (no HSV-style argmax kinks).
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tape import ShapeMismatch, Tensor

# Luma/chroma decomposition used for all color math (rows: Y, I, Q).
YIQ_FROM_RGB = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
RGB_FROM_YIQ = np.linalg.inv(YIQ_FROM_RGB)

# Sample positions this close to a pixel center snap onto it, so an exact
# identity matrix reproduces the input bitwise despite the normalize/
# denormalize round trip.  The shift is a constant, so gradients are intact.
_SNAP_EPS = 1e-9


class AffineMatrix:
    """A batch of 2x3 affine maps acting on normalized coordinates."""

    def __init__(self, params: Tensor):
        if params.ndim != 3 or params.shape[1:] != (2, 3):
            raise ShapeMismatch(f"affine params must be (batch, 2, 3), got {params.shape}")
        if not np.all(np.isfinite(params.value)):
            raise ValueError("affine matrix entries must be finite")
        self.params = params

    @property
    def batch(self) -> int:
        return self.params.shape[0]

    @classmethod
    def identity(cls, batch: int, tape=None) -> "AffineMatrix":
        eye = np.tile(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), (batch, 1, 1))
        t = tape.constant(eye) if tape is not None else Tensor(eye)
        return cls(t)

    @classmethod
    def from_values(cls, values, tape=None) -> "AffineMatrix":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        t = tape.constant(arr) if tape is not None else Tensor(arr)
        return cls(t)

    def determinants(self) -> np.ndarray:
        """Determinant of the linear part, per batch element (diagnostic only)."""
        m = self.params.value
        return m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]

    def identity_deltas(self) -> np.ndarray:
        """Absolute deviation of each entry from the identity map."""
        eye = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        return np.abs(self.params.value - eye)


class ColorParams:
    """Per-image color transform amplitudes; zero everywhere is the identity.

    Ranges: hue in [-0.5, 0.5] (full chroma rotation at the extremes),
    saturation in [0, 1], contrast in [-1, 1], brightness in [0, 1].
    Saturation and contrast act as a (1 + p) factor around the identity.
    """

    RANGES = {
        "hue": (-0.5, 0.5),
        "saturation": (0.0, 1.0),
        "contrast": (-1.0, 1.0),
        "brightness": (0.0, 1.0),
    }

    def __init__(self, hue: Tensor, saturation: Tensor, contrast: Tensor, brightness: Tensor):
        fields = {
            "hue": hue,
            "saturation": saturation,
            "contrast": contrast,
            "brightness": brightness,
        }
        batch = None
        for name, t in fields.items():
            if t.ndim != 1:
                raise ShapeMismatch(f"{name} must be a (batch,) tensor, got {t.shape}")
            if batch is None:
                batch = t.shape[0]
            elif t.shape[0] != batch:
                raise ShapeMismatch("color parameter batch sizes differ")
            lo, hi = self.RANGES[name]
            if np.any(t.value < lo) or np.any(t.value > hi):
                raise ValueError(f"{name} outside [{lo}, {hi}]")
        self.hue = hue
        self.saturation = saturation
        self.contrast = contrast
        self.brightness = brightness
        self.batch = batch

    @classmethod
    def identity(cls, batch: int, tape=None) -> "ColorParams":
        def zeros():
            z = np.zeros(batch)
            return tape.constant(z) if tape is not None else Tensor(z)

        return cls(zeros(), zeros(), zeros(), zeros())

    def abs_means(self) -> np.ndarray:
        return np.array(
            [
                np.mean(np.abs(self.hue.value)),
                np.mean(np.abs(self.saturation.value)),
                np.mean(np.abs(self.contrast.value)),
                np.mean(np.abs(self.brightness.value)),
            ]
        )


def check_image_batch(img: Tensor, color: bool = False) -> tuple[int, int, int, int]:
    if img.ndim != 4:
        raise ShapeMismatch(f"image batch must be (batch, channel, height, width), got {img.shape}")
    b, c, h, w = img.shape
    if c not in (1, 3):
        raise ShapeMismatch(f"image batch must have 1 or 3 channels, got {c}")
    if color and c != 3:
        raise ShapeMismatch("color transforms require 3-channel images")
    return b, c, h, w


def normalized_coords(n: int) -> np.ndarray:
    """Corner-aligned normalized coordinates for n samples: 2i/(n-1) - 1."""
    return 2.0 * np.arange(n) / (n - 1) - 1.0


def affine_grid(mat: AffineMatrix, height: int, width: int) -> Tensor:
    """Sample coordinates (batch, H, W, 2) produced by the affine map.

    grid[b, i, j] = mat_b @ (x_norm(j), y_norm(i), 1); differentiable in mat.
    """
    if height < 2 or width < 2:
        raise ValueError(f"degenerate grid size {height}x{width}; need at least 2x2")
    m = mat.params if isinstance(mat, AffineMatrix) else mat
    b = m.shape[0]
    xs = np.broadcast_to(normalized_coords(width).reshape(1, 1, width), (1, height, width))
    ys = np.broadcast_to(normalized_coords(height).reshape(1, height, 1), (1, height, width))

    def entry(row, col):
        return ops.reshape(ops.slice_(m, ((0, b), (row, row + 1), (col, col + 1))), (b, 1, 1))

    a, bb, tx = entry(0, 0), entry(0, 1), entry(0, 2)
    c, d, ty = entry(1, 0), entry(1, 1), entry(1, 2)
    xc = Tensor(np.ascontiguousarray(xs))
    yc = Tensor(np.ascontiguousarray(ys))
    xo = a * xc + bb * yc + tx
    yo = c * xc + d * yc + ty
    return ops.concat(
        [ops.reshape(xo, (b, height, width, 1)), ops.reshape(yo, (b, height, width, 1))], axis=3
    )


def _snap_near_integers(t: Tensor) -> Tensor:
    nearest = np.rint(t.value)
    delta = np.where(np.abs(t.value - nearest) <= _SNAP_EPS, nearest - t.value, 0.0)
    if not np.any(delta != 0.0):
        return t
    return ops.add(t, Tensor(delta))


def grid_sample_bilinear(img: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of img at normalized grid locations, zero padding.

    Gradients flow to both the image (linearly) and the grid coordinates.
    """
    b, c, h, w = check_image_batch(img)
    if grid.ndim != 4 or grid.shape != (b, h, w, 2):
        raise ShapeMismatch(f"grid shape {grid.shape} does not match image {img.shape}")

    gx = ops.reshape(ops.slice_(grid, ((0, b), (0, h), (0, w), (0, 1))), (b, h, w))
    gy = ops.reshape(ops.slice_(grid, ((0, b), (0, h), (0, w), (1, 2))), (b, h, w))
    px = _snap_near_integers(ops.mul(ops.add(gx, 1.0), (w - 1) / 2.0))
    py = _snap_near_integers(ops.mul(ops.add(gy, 1.0), (h - 1) / 2.0))

    x0 = np.floor(px.value)
    y0 = np.floor(py.value)
    wx = ops.reshape(ops.sub(px, Tensor(x0)), (b, 1, h, w))
    wy = ops.reshape(ops.sub(py, Tensor(y0)), (b, 1, h, w))

    out = None
    for dy in (0, 1):
        for dx in (0, 1):
            ys = y0 + dy
            xs = x0 + dx
            valid = ((ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)).astype(np.float64)
            iy = np.clip(ys, 0, h - 1).astype(np.intp)
            ix = np.clip(xs, 0, w - 1).astype(np.intp)
            fx = wx if dx == 1 else ops.sub(1.0, wx)
            fy = wy if dy == 1 else ops.sub(1.0, wy)
            weight = ops.mul(ops.mul(fy, fx), Tensor(valid.reshape(b, 1, h, w)))
            term = ops.mul(weight, ops.gather_hw(img, iy, ix))
            out = term if out is None else ops.add(out, term)
    return out


def luma(img: Tensor) -> Tensor:
    """Per-pixel luma of a 3-channel image, shape (batch, 1, H, W)."""
    b, _, h, w = check_image_batch(img, color=True)
    r = ops.slice_(img, ((0, b), (0, 1), (0, h), (0, w)))
    g = ops.slice_(img, ((0, b), (1, 2), (0, h), (0, w)))
    bl = ops.slice_(img, ((0, b), (2, 3), (0, h), (0, w)))
    wy = YIQ_FROM_RGB[0]
    return float(wy[0]) * r + float(wy[1]) * g + float(wy[2]) * bl


def _rotate_hue(img: Tensor, hue: Tensor) -> Tensor:
    b, _, h, w = check_image_batch(img, color=True)
    r = ops.slice_(img, ((0, b), (0, 1), (0, h), (0, w)))
    g = ops.slice_(img, ((0, b), (1, 2), (0, h), (0, w)))
    bl = ops.slice_(img, ((0, b), (2, 3), (0, h), (0, w)))
    m = YIQ_FROM_RGB.tolist()
    y = m[0][0] * r + m[0][1] * g + m[0][2] * bl
    ci = m[1][0] * r + m[1][1] * g + m[1][2] * bl
    cq = m[2][0] * r + m[2][1] * g + m[2][2] * bl
    angle = ops.reshape(ops.mul(hue, 2.0 * math.pi), (b, 1, 1, 1))
    ca = ops.cos(angle)
    sa = ops.sin(angle)
    ci2 = ca * ci - sa * cq
    cq2 = sa * ci + ca * cq
    inv = RGB_FROM_YIQ.tolist()
    channels = []
    for row in range(3):
        channels.append(inv[row][0] * y + inv[row][1] * ci2 + inv[row][2] * cq2)
    return ops.concat(channels, axis=1)


def hue_rotate_values(img: np.ndarray, hue: float) -> np.ndarray:
    """Plain-array twin of the hue stage, used by dataset generators."""
    arr = np.asarray(img, dtype=np.float64)
    yiq = np.einsum("rc,...chw->...rhw", YIQ_FROM_RGB, arr[None] if arr.ndim == 3 else arr)
    angle = 2.0 * math.pi * hue
    ca, sa = math.cos(angle), math.sin(angle)
    rot = yiq.copy()
    rot[:, 1] = ca * yiq[:, 1] - sa * yiq[:, 2]
    rot[:, 2] = sa * yiq[:, 1] + ca * yiq[:, 2]
    out = np.einsum("rc,...chw->...rhw", RGB_FROM_YIQ, rot)
    return out[0] if arr.ndim == 3 else out


def apply_color(img: Tensor, p: ColorParams) -> Tensor:
    """Hue, saturation, contrast, brightness in that order, then clamp to [0,1]."""
    b, _, h, w = check_image_batch(img, color=True)
    if p.batch != b:
        raise ShapeMismatch("color parameter batch does not match image batch")

    out = _rotate_hue(img, p.hue)

    gray = luma(out)
    sat = ops.reshape(ops.add(p.saturation, 1.0), (b, 1, 1, 1))
    out = gray + sat * (out - gray)

    mean_luma = ops.mean(luma(out), axis=(1, 2, 3), keepdims=True)
    con = ops.reshape(ops.add(p.contrast, 1.0), (b, 1, 1, 1))
    out = mean_luma + con * (out - mean_luma)

    out = out + ops.reshape(p.brightness, (b, 1, 1, 1))
    return ops.clamp(out, 0.0, 1.0)


def apply_augment(img: Tensor, mat: AffineMatrix | None, p: ColorParams | None, flags) -> Tensor:
    """Apply the enabled stages: color first, then the affine warp.

    Color runs before warping so the per-image contrast statistics are not
    polluted by the zero-padded border the warp introduces.
    """
    flags = frozenset(flags)
    unknown = flags - {"affine", "color"}
    if unknown:
        raise ValueError(f"unknown transform flags: {sorted(unknown)}")
    out = img
    if "color" in flags:
        if p is None:
            raise ValueError("color transform enabled but no color parameters given")
        out = apply_color(out, p)
    if "affine" in flags:
        if mat is None:
            raise ValueError("affine transform enabled but no affine matrix given")
        _, _, h, w = check_image_batch(out)
        out = grid_sample_bilinear(out, affine_grid(mat, h, w))
    return out


def random_flip(images, axis: str, rng, p: float = 0.5, mask=None):
    """Flip each batch element with probability p; not differentiable.

    Operates on plain arrays: this is a fixed, predefined op applied outside
    the learned pipeline.  Returns (flipped, mask) so a flip can be undone.
    """
    arr = np.array(images.value if isinstance(images, Tensor) else images, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeMismatch("random_flip expects (batch, channel, height, width)")
    try:
        ax = {"horizontal": 3, "vertical": 2}[axis]
    except KeyError:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}") from None
    if mask is None:
        mask = rng.random(arr.shape[0]) < p
    mask = np.asarray(mask, dtype=bool)
    arr[mask] = np.flip(arr[mask], axis=ax)
    return arr, mask
