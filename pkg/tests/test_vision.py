"""Differentiable warping and color transforms."""

import numpy as np
import pytest

from bilevelaug import ops
from bilevelaug.tape import ShapeMismatch, Tape, Tensor
from bilevelaug.vision import (
    AffineMatrix,
    ColorParams,
    affine_grid,
    apply_augment,
    apply_color,
    grid_sample_bilinear,
    hue_rotate_values,
    random_flip,
)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_identity_grid_corners():
    grid = affine_grid(AffineMatrix.identity(1), 3, 3).value
    assert np.allclose(grid[0, 0, 0], [-1.0, -1.0])
    assert np.allclose(grid[0, 2, 2], [1.0, 1.0])
    assert np.allclose(grid[0, 1, 1], [0.0, 0.0])


def test_translation_shifts_x_coordinates():
    mat = AffineMatrix.from_values([[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]])
    base = affine_grid(AffineMatrix.identity(1), 3, 3).value
    moved = affine_grid(mat, 3, 3).value
    assert np.allclose(moved[..., 0], base[..., 0] + 0.5)
    assert np.allclose(moved[..., 1], base[..., 1])


def test_grid_gradient_wrt_translation():
    t = Tape()
    m = t.leaf([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]], requires_grad=True)
    loss = ops.sum_(affine_grid(AffineMatrix(m), 4, 4))
    g = ops.backward(loss, [m])[m].value
    assert g[0, 0, 2] == pytest.approx(16.0)
    assert g[0, 1, 2] == pytest.approx(16.0)


def test_degenerate_grid_size_rejected():
    with pytest.raises(ValueError):
        affine_grid(AffineMatrix.identity(1), 1, 4)


def test_identity_sample_is_bitwise_exact(rng):
    img = rng.random((2, 3, 7, 5))
    t = Tape()
    x = t.constant(img)
    out = grid_sample_bilinear(x, affine_grid(AffineMatrix.identity(2, tape=t), 7, 5))
    assert np.array_equal(out.value, img)


def test_one_pixel_translation_shifts_columns(rng):
    w = 6
    ramp = np.tile(np.arange(w, dtype=float), (1, 1, 4, 1)) / w
    tx = 2.0 / (w - 1)
    mat = AffineMatrix.from_values([[1.0, 0.0, tx], [0.0, 1.0, 0.0]])
    out = grid_sample_bilinear(Tensor(ramp), affine_grid(mat, 4, w)).value
    # sampling one pixel to the right: column j reads source column j+1
    assert np.allclose(out[0, 0, :, :-1], ramp[0, 0, :, 1:], atol=1e-12)
    assert np.allclose(out[0, 0, :, -1], 0.0)


def test_sample_linearity_in_image(rng):
    a = rng.random((1, 1, 5, 5))
    b = rng.random((1, 1, 5, 5))
    mat = AffineMatrix.from_values([[0.9, 0.1, 0.2], [-0.05, 1.1, -0.1]])
    grid = affine_grid(mat, 5, 5)

    def sample(img):
        return grid_sample_bilinear(Tensor(img), grid).value

    mixed = sample(2.0 * a + 3.0 * b)
    assert np.allclose(mixed, 2.0 * sample(a) + 3.0 * sample(b), atol=1e-12)


def test_translation_composition(rng):
    img = rng.random((1, 1, 9, 9))
    t1 = AffineMatrix.from_values([[1, 0, 0.125], [0, 1, 0.25]])
    t2 = AffineMatrix.from_values([[1, 0, 0.25], [0, 1, -0.125]])
    t12 = AffineMatrix.from_values([[1, 0, 0.375], [0, 1, 0.125]])

    def warp(x, mat):
        return grid_sample_bilinear(Tensor(x), affine_grid(mat, 9, 9)).value

    twice = warp(warp(img, t1), t2)
    once = warp(img, t12)
    # compare away from the zero-padded border
    assert np.allclose(twice[..., 3:6, 3:6], once[..., 3:6, 3:6], atol=1e-10)


def test_color_identity(rng):
    img = rng.random((2, 3, 4, 4))
    out = apply_color(Tensor(img), ColorParams.identity(2))
    assert np.max(np.abs(out.value - img)) < 1e-12


def test_brightness_is_additive():
    img = np.full((1, 3, 4, 4), 0.25)
    p = ColorParams(Tensor([0.0]), Tensor([0.0]), Tensor([0.0]), Tensor([0.5]))
    out = apply_color(Tensor(img), p)
    assert np.allclose(out.value, 0.75, atol=1e-12)


def test_hue_round_trip(rng):
    img = rng.uniform(0.25, 0.7, (1, 3, 5, 5))
    h = 0.23
    fwd = hue_rotate_values(img, h)
    back = hue_rotate_values(fwd, -h)
    assert np.max(np.abs(back - img)) < 1e-10


def test_hue_rotation_changes_chroma_not_luma(rng):
    img = rng.uniform(0.2, 0.8, (1, 3, 6, 6))
    rotated = hue_rotate_values(img, 0.31)
    luma = np.array([0.299, 0.587, 0.114])
    before = np.einsum("c,bchw->bhw", luma, img)
    after = np.einsum("c,bchw->bhw", luma, rotated)
    assert np.allclose(before, after, atol=1e-10)


def test_color_requires_three_channels():
    with pytest.raises(ShapeMismatch):
        apply_color(Tensor(np.ones((1, 1, 4, 4))), ColorParams.identity(1))


def test_color_param_ranges_enforced():
    with pytest.raises(ValueError):
        ColorParams(Tensor([0.7]), Tensor([0.0]), Tensor([0.0]), Tensor([0.0]))
    with pytest.raises(ValueError):
        ColorParams(Tensor([0.0]), Tensor([-0.1]), Tensor([0.0]), Tensor([0.0]))


def test_augment_disabled_is_identity(rng):
    img = rng.random((1, 3, 4, 4))
    out = apply_augment(Tensor(img), None, None, set())
    assert np.array_equal(out.value, img)


def test_augment_affine_only_matches_composition(rng):
    img = rng.random((1, 3, 6, 6))
    mat = AffineMatrix.from_values([[1.0, 0.04, -0.1], [0.02, 0.97, 0.08]])
    via_augment = apply_augment(Tensor(img), mat, None, {"affine"}).value
    direct = grid_sample_bilinear(Tensor(img), affine_grid(mat, 6, 6)).value
    assert np.array_equal(via_augment, direct)


def test_augment_rejects_unknown_flag(rng):
    with pytest.raises(ValueError):
        apply_augment(Tensor(rng.random((1, 3, 4, 4))), None, None, {"rotate"})


def test_full_pipeline_gradients_match_finite_differences(rng):
    img = rng.uniform(0.3, 0.55, (1, 3, 5, 5))
    # irrational-ish entries keep every sample position away from the
    # integer-aligned kinks of floor()
    base_mat = np.array([[[1.0137, 0.0313, 0.0821], [-0.0419, 0.9613, -0.0687]]])
    color_vals = [rng.uniform(-0.25, 0.25, 1), rng.uniform(0.05, 0.2, 1),
                  rng.uniform(-0.15, 0.15, 1), rng.uniform(0.03, 0.12, 1)]

    def loss_of(mat_t, hue_t, sat_t, con_t, bri_t, img_t):
        p = ColorParams(hue_t, sat_t, con_t, bri_t)
        return ops.mean(apply_augment(img_t, AffineMatrix(mat_t), p, {"affine", "color"}))

    t = Tape()
    leaves = [t.leaf(base_mat, requires_grad=True)] + [t.leaf(v, requires_grad=True) for v in color_vals]
    img_leaf = t.leaf(img, requires_grad=True)
    loss = loss_of(*leaves, img_leaf)
    grads = ops.backward(loss, leaves + [img_leaf])

    values = [base_mat, *color_vals, img]
    for i, leaf in enumerate(leaves + [img_leaf]):
        def f(v, i=i):
            args = [Tensor(x) for x in values]
            args[i] = v
            return loss_of(*args)

        fd = ops.finite_diff_gradient(f, Tensor(values[i]), h=1e-5).value
        assert np.allclose(grads[leaf].value, fd, rtol=1e-4, atol=1e-8)


def test_random_flip_probability_zero_is_identity(rng):
    img = rng.random((4, 1, 5, 5))
    out, mask = random_flip(img, "horizontal", rng, p=0.0)
    assert np.array_equal(out, img)
    assert not mask.any()


def test_random_flip_twice_same_mask_is_identity(rng):
    img = rng.random((6, 3, 5, 5))
    out, mask = random_flip(img, "vertical", rng)
    back, _ = random_flip(out, "vertical", rng, mask=mask)
    assert np.array_equal(back, img)


def test_random_flip_reverses_columns():
    ramp = np.tile(np.arange(5.0), (1, 1, 4, 1))
    out, _ = random_flip(ramp, "horizontal", np.random.default_rng(0), mask=[True])
    assert np.array_equal(out[0, 0, 0], ramp[0, 0, 0][::-1])


def test_determinant_diagnostic():
    mat = AffineMatrix.from_values([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    assert mat.determinants()[0] == pytest.approx(6.0)
