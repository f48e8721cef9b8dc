"""Augmenter and classifier networks."""

import numpy as np
import pytest

from bilevelaug import ops
from bilevelaug.networks import (
    AugmenterSpec,
    ClassifierSpec,
    ParamBounds,
    augmenter_forward,
    classifier_forward,
    init_weights,
    parameter_count,
    sample_noise,
)
from bilevelaug.rng import SeedStreams
from bilevelaug.tape import ShapeMismatch, Tape, Tensor
from bilevelaug.vision import apply_augment


def make_augmenter(n_params=6, size="small", tape=None, seed=0, output_scale=0.0):
    spec = AugmenterSpec(size=size, n_params=n_params)
    tape = tape or Tape()
    weights = init_weights(spec, tape, np.random.default_rng(seed), output_scale=output_scale)
    return spec, tape, weights


def test_small_spec_layer_widths():
    assert AugmenterSpec(size="small", n_params=6).layer_widths() == [6, 6, 60, 6]
    assert AugmenterSpec(size="medium", n_params=4).layer_widths() == [100, 64, 32, 4]
    assert AugmenterSpec(size="large", n_params=10).layer_widths() == [100, 512, 1024, 1024, 512, 10]


def test_spec_rejects_bad_params():
    with pytest.raises(ValueError):
        AugmenterSpec(size="small", n_params=5)
    with pytest.raises(ValueError):
        AugmenterSpec(size="huge", n_params=6)
    with pytest.raises(ValueError):
        ParamBounds(affine_linear_bound=-1.0)


def test_transform_mapping():
    assert AugmenterSpec.for_transforms(["translation"]).n_params == 2
    assert AugmenterSpec.for_transforms(["color"]).n_params == 4
    assert AugmenterSpec.for_transforms(["affine"]).n_params == 6
    assert AugmenterSpec.for_transforms(["affine", "color"]).n_params == 10
    with pytest.raises(ValueError):
        AugmenterSpec.for_transforms(["shear"])


def test_zero_init_emits_identity_affine_and_identity_hue_contrast():
    spec, tape, weights = make_augmenter(n_params=10)
    noise = sample_noise(5, spec.noise_dim, np.random.default_rng(1), tape)
    mat, colors = augmenter_forward(spec, noise, weights, train_mode=False)
    eye = np.tile(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), (5, 1, 1))
    assert np.array_equal(mat.params.value, eye)
    assert np.array_equal(colors.hue.value, np.zeros(5))
    assert np.array_equal(colors.contrast.value, np.zeros(5))
    # saturation/brightness sit mid-range at init by the (u+1)/2 mapping
    assert np.array_equal(colors.saturation.value, np.full(5, 0.5))
    assert np.array_equal(colors.brightness.value, np.full(5, 0.5))


def test_zero_init_affine_pipeline_reproduces_input():
    spec, tape, weights = make_augmenter(n_params=2)
    noise = sample_noise(3, spec.noise_dim, np.random.default_rng(2), tape)
    mat, colors = augmenter_forward(spec, noise, weights, train_mode=False)
    img = tape.constant(np.random.default_rng(3).random((3, 1, 8, 8)))
    out = apply_augment(img, mat, colors, spec.transform_flags())
    assert np.max(np.abs(out.value - img.value)) < 1e-10


def test_outputs_respect_bounds_for_any_weights():
    spec = AugmenterSpec(size="small", n_params=10,
                         bounds=ParamBounds(affine_linear_bound=0.25, affine_translation_bound=0.3))
    rng = np.random.default_rng(7)
    tape = Tape()
    for trial in range(20):
        weights = {}
        widths = spec.layer_widths()
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            weights[f"w{i}"] = tape.leaf(rng.normal(scale=5.0, size=(a, b)))
            weights[f"b{i}"] = tape.leaf(rng.normal(scale=5.0, size=b))
        noise = sample_noise(8, spec.noise_dim, rng, tape)
        mat, colors = augmenter_forward(spec, noise, weights, train_mode=False)
        deltas = mat.params.value - np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert np.all(np.abs(deltas[:, :, :2]) <= 0.25)
        assert np.all(np.abs(deltas[:, :, 2]) <= 0.3)
        assert np.all(np.abs(colors.hue.value) <= 0.5)
        assert np.all((colors.saturation.value >= 0) & (colors.saturation.value <= 1))
        assert np.all(np.abs(colors.contrast.value) <= 1)
        assert np.all((colors.brightness.value >= 0) & (colors.brightness.value <= 1))


def test_noise_reproducibility_and_moments():
    a = sample_noise(64, 4, np.random.default_rng(42)).value
    b = sample_noise(64, 4, np.random.default_rng(42)).value
    assert np.array_equal(a, b)
    big = sample_noise(25000, 4, np.random.default_rng(0)).value
    assert abs(big.mean()) < 0.02
    assert abs(big.var() - 1.0) < 0.05


def test_wrong_noise_dim_rejected():
    spec, tape, weights = make_augmenter(n_params=6)
    with pytest.raises(ShapeMismatch):
        augmenter_forward(spec, tape.constant(np.zeros((2, 3))), weights, train_mode=False)


def test_parameter_count_closed_form():
    spec = AugmenterSpec(size="small", n_params=6)
    tape = Tape()
    weights = init_weights(spec, tape, np.random.default_rng(0))
    total = sum(w.size for w in weights.values())
    assert total == parameter_count(spec) == 828


def test_init_determinism_and_glorot_bounds():
    spec = AugmenterSpec(size="medium", n_params=4)
    w1 = init_weights(spec, Tape(), np.random.default_rng(9))
    w2 = init_weights(spec, Tape(), np.random.default_rng(9))
    for k in w1:
        assert np.array_equal(w1[k].value, w2[k].value)
    widths = spec.layer_widths()
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-2], widths[1:-1])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(w1[f"w{i}"].value) <= limit)
    # final layer zero
    last = len(widths) - 2
    assert not w1[f"w{last}"].value.any()
    assert not w1[f"b{last}"].value.any()


def test_init_output_scale_seeds_near_identity():
    spec, tape, weights = make_augmenter(n_params=2, output_scale=0.05)
    last = len(spec.layer_widths()) - 2
    assert weights[f"w{last}"].value.any()
    noise = sample_noise(16, spec.noise_dim, np.random.default_rng(0), tape)
    mat, _ = augmenter_forward(spec, noise, weights, train_mode=False)
    deltas = np.abs(mat.params.value - np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    assert 0 < deltas.max() < 0.02


def test_classifier_zero_head_gives_uniform_logits():
    spec = ClassifierSpec(kind="mlp", input_shape=(1, 4, 4), hidden=(), num_classes=5)
    tape = Tape()
    weights = {
        "w0": tape.leaf(np.zeros((16, 5)), requires_grad=True),
        "b0": tape.leaf(np.zeros(5), requires_grad=True),
    }
    img = tape.constant(np.random.default_rng(0).random((3, 1, 4, 4)))
    logits = classifier_forward(spec, img, weights)
    assert np.array_equal(logits.value, np.zeros((3, 5)))
    loss = ops.softmax_cross_entropy(logits, np.array([0, 2, 4]))
    assert loss.value == pytest.approx(np.log(5.0))


def test_classifier_batch_independence():
    spec = ClassifierSpec(kind="small_cnn", input_shape=(3, 8, 8), channels=4, num_classes=4)
    tape = Tape()
    weights = init_weights(spec, tape, np.random.default_rng(1))
    imgs = np.random.default_rng(2).random((5, 3, 8, 8))
    logits = classifier_forward(spec, tape.constant(imgs), weights).value
    perm = np.array([3, 1, 4, 0, 2])
    logits_perm = classifier_forward(spec, tape.constant(imgs[perm]), weights).value
    assert np.allclose(logits_perm, logits[perm], atol=1e-12)


def test_classifier_image_gradient_matches_finite_differences():
    spec = ClassifierSpec(kind="mlp", input_shape=(1, 4, 4), hidden=(6,), num_classes=3)
    streams = SeedStreams(3)
    tape = Tape()
    weights = init_weights(spec, tape, streams.get("init"))
    img = np.random.default_rng(4).random((2, 1, 4, 4))
    labels = np.array([0, 2])

    leaf = tape.leaf(img, requires_grad=True)
    loss = ops.softmax_cross_entropy(classifier_forward(spec, leaf, weights), labels)
    grad = ops.backward(loss, [leaf])[leaf].value

    def f(x):
        return ops.softmax_cross_entropy(classifier_forward(spec, x, weights), labels)

    fd = ops.finite_diff_gradient(f, Tensor(img), h=1e-5).value
    assert np.allclose(grad, fd, rtol=1e-4, atol=1e-8)


def test_classifier_shape_mismatch():
    spec = ClassifierSpec(kind="mlp", input_shape=(1, 8, 8), hidden=(4,), num_classes=2)
    tape = Tape()
    weights = init_weights(spec, tape, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        classifier_forward(spec, tape.constant(np.zeros((1, 1, 4, 4))), weights)


def test_classifier_determinism():
    spec = ClassifierSpec(kind="small_cnn", input_shape=(1, 6, 6), channels=3, num_classes=2)
    tape = Tape()
    weights = init_weights(spec, tape, np.random.default_rng(5))
    img = tape.constant(np.random.default_rng(6).random((2, 1, 6, 6)))
    a = classifier_forward(spec, img, weights).value
    b = classifier_forward(spec, img, weights).value
    assert np.array_equal(a, b)
