"""Augmenter networks (noise -> transform parameters) and desk-scale classifiers.

The augmenter is an MLP ending in tanh.  Its raw output u in (-1,1)^n is
mapped to transform parameters so that u = 0 gives the identity affine map,
zero hue and zero contrast; saturation and brightness map through (u+1)/2 and
therefore start mid-range at 0.5 with a zero-initialized final layer, and are
learned downward.  The final layer is initialized to zero so training starts
from (near-)identity transformations instead of destroying images at step 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tape import ShapeMismatch, Tensor
from .vision import AffineMatrix, ColorParams

AUGMENTER_SIZES = ("small", "medium", "large")
VALID_PARAM_COUNTS = (2, 4, 6, 10)

# n_params per enabled transform set
TRANSFORM_PARAMS = {
    ("translation",): 2,
    ("color",): 4,
    ("affine",): 6,
    ("affine", "color"): 10,
}


@dataclass(frozen=True)
class ParamBounds:
    """Reachable perturbation box around the identity affine map."""

    affine_linear_bound: float = 0.25
    affine_translation_bound: float = 0.30

    def __post_init__(self):
        if self.affine_linear_bound <= 0 or self.affine_translation_bound <= 0:
            raise ValueError("affine bounds must be positive")


@dataclass(frozen=True)
class AugmenterSpec:
    size: str = "small"
    n_params: int = 6
    dropout_rate: float = 0.2
    bounds: ParamBounds = field(default_factory=ParamBounds)

    def __post_init__(self):
        if self.size not in AUGMENTER_SIZES:
            raise ValueError(f"augmenter size must be one of {AUGMENTER_SIZES}, got {self.size!r}")
        if self.n_params not in VALID_PARAM_COUNTS:
            raise ValueError(f"n_params must be one of {VALID_PARAM_COUNTS}, got {self.n_params}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    @property
    def noise_dim(self) -> int:
        return self.n_params if self.size == "small" else 100

    def layer_widths(self) -> list[int]:
        n = self.n_params
        if self.size == "small":
            return [n, n, 10 * n, n]
        if self.size == "medium":
            return [100, 64, 32, n]
        return [100, 512, 1024, 1024, 512, n]

    @classmethod
    def for_transforms(cls, transforms, size="small", bounds=None) -> "AugmenterSpec":
        key = tuple(sorted(set(transforms)))
        if key not in TRANSFORM_PARAMS:
            raise ValueError(f"unsupported transform set: {transforms}")
        return cls(size=size, n_params=TRANSFORM_PARAMS[key], bounds=bounds or ParamBounds())

    def transform_flags(self) -> frozenset:
        if self.n_params in (2, 6):
            return frozenset({"affine"})
        if self.n_params == 4:
            return frozenset({"color"})
        return frozenset({"affine", "color"})


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "mlp"
    input_shape: tuple[int, int, int] = (1, 16, 16)
    hidden: tuple[int, ...] = (64,)
    channels: int = 8
    num_classes: int = 4
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.kind not in ("mlp", "small_cnn"):
            raise ValueError(f"classifier kind must be 'mlp' or 'small_cnn', got {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")


def glorot_uniform(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_weights(spec, tape, rng, output_scale: float = 0.0) -> dict[str, Tensor]:
    """Initialize a parameter set for an AugmenterSpec or ClassifierSpec.

    Hidden layers are Glorot-uniform.  The augmenter's final layer is zero by
    default, so the augmenter starts exactly at the identity transform; an
    optional output_scale multiplies a Glorot draw for that layer instead,
    seeding a tiny output spread while staying near-identity.
    """
    if isinstance(spec, AugmenterSpec):
        widths = spec.layer_widths()
        params: dict[str, Tensor] = {}
        last = len(widths) - 2
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i == last:
                if output_scale:
                    w = output_scale * glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out))
                else:
                    w = np.zeros((fan_in, fan_out))
            else:
                w = glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out))
            params[f"w{i}"] = tape.leaf(w, requires_grad=True)
            params[f"b{i}"] = tape.leaf(np.zeros(fan_out), requires_grad=True)
        return params
    if isinstance(spec, ClassifierSpec):
        params = {}
        if spec.kind == "mlp":
            dims = [int(np.prod(spec.input_shape)), *spec.hidden, spec.num_classes]
            for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
                params[f"w{i}"] = tape.leaf(glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out)), requires_grad=True)
                params[f"b{i}"] = tape.leaf(np.zeros(fan_out), requires_grad=True)
        else:
            c_in = spec.input_shape[0]
            f = spec.channels
            for i, (ci, co) in enumerate(((c_in, f), (f, f))):
                fan_in, fan_out = ci * 9, co * 9
                params[f"conv{i}"] = tape.leaf(glorot_uniform(rng, fan_in, fan_out, (co, ci, 3, 3)), requires_grad=True)
                params[f"cbias{i}"] = tape.leaf(np.zeros(co), requires_grad=True)
            params["head_w"] = tape.leaf(glorot_uniform(rng, f, spec.num_classes, (f, spec.num_classes)), requires_grad=True)
            params["head_b"] = tape.leaf(np.zeros(spec.num_classes), requires_grad=True)
        return params
    raise TypeError(f"unknown spec type: {type(spec).__name__}")


def parameter_count(spec) -> int:
    """Closed-form parameter count matching init_weights exactly."""
    if isinstance(spec, AugmenterSpec):
        widths = spec.layer_widths()
        return sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))
    if isinstance(spec, ClassifierSpec):
        if spec.kind == "mlp":
            dims = [int(np.prod(spec.input_shape)), *spec.hidden, spec.num_classes]
            return sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))
        c_in, f = spec.input_shape[0], spec.channels
        conv = (c_in * 9 + 1) * f + (f * 9 + 1) * f
        return conv + (f + 1) * spec.num_classes
    raise TypeError(f"unknown spec type: {type(spec).__name__}")


def sample_noise(batch: int, dim: int, rng, tape=None) -> Tensor:
    """Standard normal noise, reproducible from the rng's seed/state."""
    if batch < 1 or dim < 1:
        raise ValueError("noise batch and dim must be positive")
    values = rng.standard_normal((batch, dim))
    return tape.constant(values) if tape is not None else Tensor(values)


def _mlp_core(x: Tensor, params: dict[str, Tensor], n_layers: int, activation, dropout_rate, train_mode, rng):
    h = x
    for i in range(n_layers - 1):
        h = activation(ops.add(ops.matmul(h, params[f"w{i}"]), params[f"b{i}"]))
        if train_mode and dropout_rate > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng handle")
            mask = ops.dropout_mask(rng, h.shape, dropout_rate)
            h = ops.dropout(h, Tensor(mask))
    last = n_layers - 1
    return ops.add(ops.matmul(h, params[f"w{last}"]), params[f"b{last}"])


def augmenter_forward(spec: AugmenterSpec, noise: Tensor, weights, train_mode: bool, rng=None):
    """Map a noise batch to per-image transform parameters.

    Returns (AffineMatrix or None, ColorParams or None) depending on which
    transform group the spec covers.  The tanh output u is mapped entrywise:
    affine = identity + u * bounds, hue = u/2, saturation = (u+1)/2,
    contrast = u, brightness = (u+1)/2, so every output respects its range
    regardless of the weights.
    """
    if noise.ndim != 2 or noise.shape[1] != spec.noise_dim:
        raise ShapeMismatch(f"noise must be (batch, {spec.noise_dim}), got {noise.shape}")
    b = noise.shape[0]
    n_layers = len(spec.layer_widths()) - 1
    u = ops.tanh(_mlp_core(noise, weights, n_layers, ops.relu, spec.dropout_rate, train_mode, rng))

    def col(j):
        return ops.slice_(u, ((0, b), (j, j + 1)))

    def as_vec(t):
        return ops.reshape(t, (b,))

    bounds = spec.bounds
    mat = None
    colors = None
    if spec.n_params == 2:
        zero = Tensor(np.zeros((b, 1)))
        tx = ops.mul(col(0), bounds.affine_translation_bound)
        ty = ops.mul(col(1), bounds.affine_translation_bound)
        delta = ops.concat([zero, zero, tx, zero, zero, ty], axis=1)
        mat = _delta_to_matrix(delta, b)
    elif spec.n_params in (6, 10):
        scale = np.array([bounds.affine_linear_bound, bounds.affine_linear_bound, bounds.affine_translation_bound] * 2)
        delta = ops.mul(ops.slice_(u, ((0, b), (0, 6))), Tensor(scale))
        mat = _delta_to_matrix(delta, b)
    if spec.n_params in (4, 10):
        off = 0 if spec.n_params == 4 else 6
        hue = as_vec(ops.mul(col(off), 0.5))
        sat = as_vec(ops.mul(ops.add(col(off + 1), 1.0), 0.5))
        con = as_vec(col(off + 2))
        bri = as_vec(ops.mul(ops.add(col(off + 3), 1.0), 0.5))
        colors = ColorParams(hue, sat, con, bri)
    return mat, colors


def _delta_to_matrix(delta: Tensor, batch: int) -> AffineMatrix:
    eye = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return AffineMatrix(ops.add(ops.reshape(delta, (batch, 2, 3)), Tensor(eye)))


def classifier_forward(spec: ClassifierSpec, img: Tensor, weights) -> Tensor:
    """Logits of shape (batch, num_classes); differentiable in weights and image."""
    if img.ndim != 4 or img.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"image batch {img.shape} does not match input shape {spec.input_shape}")
    b = img.shape[0]
    if spec.kind == "mlp":
        h = ops.reshape(img, (b, int(np.prod(spec.input_shape))))
        n_layers = len(spec.hidden) + 1
        return _mlp_core(h, weights, n_layers, ops.relu, 0.0, False, None)
    h = ops.leaky_relu(ops.conv2d(img, weights["conv0"], weights["cbias0"]), spec.leaky_slope)
    h = ops.leaky_relu(ops.conv2d(h, weights["conv1"], weights["cbias1"]), spec.leaky_slope)
    pooled = ops.mean(h, axis=(2, 3))
    return ops.add(ops.matmul(pooled, weights["head_w"]), weights["head_b"])
