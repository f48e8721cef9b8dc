"""Finite-difference and analytic oracle suites.

Each suite returns a list of CheckResult rows so the CLI can print one line
per check and the test suite can assert on the same results.  Gradient
checks compare reverse-mode gradients against central finite differences
(h = 1e-5) with per-coordinate tolerance |a - b| <= 1e-8 + 1e-4 * |b|, on
inputs drawn in [-2, 2] that keep a 0.05 margin from the kinks of relu,
leaky_relu and clamp, and away from integer-aligned sample positions.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import engine, ops
from .networks import (
    AugmenterSpec,
    ClassifierSpec,
    augmenter_forward,
    classifier_forward,
    init_weights,
)
from .tape import Tape, Tensor
from .vision import AffineMatrix, ColorParams, affine_grid, apply_augment, apply_color, grid_sample_bilinear

REL_TOL = 1e-4
ABS_TOL = 1e-8
FD_STEP = 1e-5
KINK_MARGIN = 0.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    max_err: float
    detail: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.name:<34} cases={self.cases:<4} max_err={self.max_err:.3e}{extra}"


def _away_from(rng, shape, lo, hi, kinks=(), margin=KINK_MARGIN):
    """Uniform values in [lo, hi] at least `margin` away from every kink."""
    x = rng.uniform(lo, hi, size=shape)
    for _ in range(64):
        bad = np.zeros(x.shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
    raise RuntimeError("could not sample away from kinks")


def _violation(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest tolerance-normalized deviation; <= 1 means within tolerance."""
    denom = ABS_TOL + REL_TOL * np.abs(numeric)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _check_case(input_values, apply_fn):
    """Compare backward() against finite differences for every input."""
    tape = Tape()
    leaves = [tape.leaf(v, requires_grad=True) for v in input_values]
    loss = apply_fn(leaves)
    grads = ops.backward(loss, leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(t, i=i):
            vals = [Tensor(v) for v in input_values]
            vals[i] = t
            return apply_fn(vals)

        fd = ops.finite_diff_gradient(f, Tensor(input_values[i]), h=FD_STEP)
        worst = max(worst, _violation(grads[leaf].value, fd.value))
    return worst


def _elementwise_case(op, kinks=(), lo=-2.0, hi=2.0):
    def make(rng):
        x = _away_from(rng, (3, 4), lo, hi, kinks)
        w = rng.normal(size=(3, 4))
        return [x], lambda ts: ops.sum_(ops.mul(op(ts[0]), Tensor(w)))
    return make


def _weighted(op, *input_makers, out_shape):
    """Case builder: random inputs, loss = sum(op(inputs) * fixed random weight)."""

    def make(rng):
        values = [maker(rng) for maker in input_makers]
        w = rng.normal(size=out_shape)
        return values, lambda ts: ops.sum_(ops.mul(op(*ts), Tensor(w)))

    return make


def _box(shape, lo=-2.0, hi=2.0):
    return lambda rng: rng.uniform(lo, hi, shape)


def _case_builders():
    cases = {}
    cases["add"] = _weighted(ops.add, _box((3, 4)), _box((4,)), out_shape=(3, 4))
    cases["sub"] = _weighted(ops.sub, _box((3, 4)), _box((3, 4)), out_shape=(3, 4))
    cases["neg"] = _elementwise_case(ops.neg)
    cases["mul"] = _weighted(ops.mul, _box((3, 4)), _box((1, 4)), out_shape=(3, 4))
    cases["div"] = _weighted(
        ops.div,
        _box((3, 4)),
        lambda rng: _away_from(rng, (3, 4), -2, 2, kinks=(0.0,), margin=0.2),
        out_shape=(3, 4),
    )
    cases["matmul"] = _weighted(ops.matmul, _box((3, 4)), _box((4, 2)), out_shape=(3, 2))
    cases["permute"] = _weighted(lambda t: ops.permute(t, (2, 0, 1)), _box((2, 3, 4)), out_shape=(4, 2, 3))
    cases["reshape"] = _weighted(lambda t: ops.reshape(t, (2, 6)), _box((3, 4)), out_shape=(2, 6))
    cases["concat"] = _weighted(
        lambda a, b: ops.concat([a, b], axis=1), _box((3, 2)), _box((3, 3)), out_shape=(3, 5)
    )
    cases["slice"] = _weighted(lambda t: ops.slice_(t, ((1, 3), (0, 4))), _box((4, 5)), out_shape=(2, 4))
    cases["insert"] = _weighted(
        lambda t: ops.insert(t, ((1, 3), (2, 5)), (4, 6)), _box((2, 3)), out_shape=(4, 6)
    )
    cases["relu"] = _elementwise_case(ops.relu, kinks=(0.0,))
    cases["leaky_relu"] = _elementwise_case(lambda t: ops.leaky_relu(t, 0.2), kinks=(0.0,))
    cases["tanh"] = _elementwise_case(ops.tanh)
    cases["sigmoid"] = _elementwise_case(ops.sigmoid)
    cases["log"] = _elementwise_case(ops.log, lo=0.1, hi=2.0)
    cases["exp"] = _elementwise_case(ops.exp)
    cases["sin"] = _elementwise_case(ops.sin)
    cases["cos"] = _elementwise_case(ops.cos)
    cases["clamp"] = _elementwise_case(lambda t: ops.clamp(t, -1.0, 1.0), kinks=(-1.0, 1.0))
    cases["sum"] = _weighted(lambda t: ops.sum_(t, axis=(0, 2)), _box((3, 4, 2)), out_shape=(4,))
    cases["mean"] = _weighted(lambda t: ops.mean(t, axis=1), _box((3, 4)), out_shape=(3,))

    def dropout_case(rng):
        x = rng.uniform(-2, 2, (3, 4))
        mask = ops.dropout_mask(rng, (3, 4), 0.2)
        w = rng.normal(size=(3, 4))
        return [x], lambda ts: ops.sum_(ops.mul(ops.dropout(ts[0], Tensor(mask)), Tensor(w)))

    cases["dropout"] = dropout_case

    def gather_case(rng):
        img = rng.uniform(-2, 2, (2, 3, 5, 5))
        iy = rng.integers(0, 5, (2, 4, 4))
        ix = rng.integers(0, 5, (2, 4, 4))
        w = rng.normal(size=(2, 3, 4, 4))
        return [img], lambda ts: ops.sum_(ops.mul(ops.gather_hw(ts[0], iy, ix), Tensor(w)))

    cases["gather_hw"] = gather_case

    def scatter_case(rng):
        src = rng.uniform(-2, 2, (2, 3, 3, 3))
        iy = rng.integers(0, 5, (2, 3, 3))
        ix = rng.integers(0, 5, (2, 3, 3))
        w = rng.normal(size=(2, 3, 5, 5))
        return [src], lambda ts: ops.sum_(ops.mul(ops.scatter_hw(ts[0], iy, ix, (5, 5)), Tensor(w)))

    cases["scatter_hw"] = scatter_case

    def conv_case(rng):
        x = rng.uniform(-2, 2, (2, 2, 4, 4))
        k = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, (3,))
        w = rng.normal(size=(2, 3, 4, 4))
        return [x, k, b], lambda ts: ops.sum_(ops.mul(ops.conv2d(ts[0], ts[1], ts[2]), Tensor(w)))

    cases["conv2d"] = conv_case

    def ce_case(rng):
        logits = rng.uniform(-2, 2, (4, 3))
        labels = rng.integers(0, 3, 4)
        return [logits], lambda ts: ops.softmax_cross_entropy(ts[0], labels)

    cases["softmax_cross_entropy"] = ce_case

    def grid_case(rng):
        mat = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]) + rng.uniform(-0.2, 0.2, (1, 2, 3))
        w = rng.normal(size=(1, 4, 5, 2))
        return [mat], lambda ts: ops.sum_(ops.mul(affine_grid(AffineMatrix(ts[0]), 4, 5), Tensor(w)))

    cases["affine_grid"] = grid_case

    def sample_case(rng):
        img = rng.uniform(0, 1, (1, 1, 5, 5))
        # keep sample positions off pixel centers so floor() is stable
        mat = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]) + rng.uniform(0.02, 0.15, (1, 2, 3)) * rng.choice([-1, 1], (1, 2, 3))
        w = rng.normal(size=(1, 1, 5, 5))

        def fn(ts):
            grid = affine_grid(AffineMatrix(ts[1]), 5, 5)
            return ops.sum_(ops.mul(grid_sample_bilinear(ts[0], grid), Tensor(w)))

        return [img, mat], fn

    cases["grid_sample_bilinear"] = sample_case

    def color_case(rng):
        # unsaturated images and mild params keep every pixel off the clamp
        img = rng.uniform(0.25, 0.6, (2, 3, 4, 4))
        hue = rng.uniform(-0.4, 0.4, 2)
        sat = rng.uniform(0.05, 0.3, 2)
        con = rng.uniform(-0.2, 0.2, 2)
        bri = rng.uniform(0.02, 0.2, 2)

        def fn(ts):
            p = ColorParams(ts[1], ts[2], ts[3], ts[4])
            return ops.mean(apply_color(ts[0], p))

        return [img, hue, sat, con, bri], fn

    cases["apply_color"] = color_case

    def augment_case(rng):
        img = rng.uniform(0.3, 0.55, (1, 3, 5, 5))
        mat = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]) + rng.uniform(0.02, 0.12, (1, 2, 3)) * rng.choice([-1, 1], (1, 2, 3))
        hue = rng.uniform(-0.3, 0.3, 1)
        sat = rng.uniform(0.05, 0.2, 1)
        con = rng.uniform(-0.15, 0.15, 1)
        bri = rng.uniform(0.02, 0.15, 1)

        def fn(ts):
            p = ColorParams(ts[2], ts[3], ts[4], ts[5])
            out = apply_augment(ts[0], AffineMatrix(ts[1]), p, {"affine", "color"})
            return ops.mean(out)

        return [img, mat, hue, sat, con, bri], fn

    cases["apply_augment"] = augment_case

    return cases


def gradient_suite(cases_per_op: int = 100, seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks for every primitive and vision transform."""
    results = []
    builders = _case_builders()
    # composites sampled more lightly: each case runs many coordinates
    light = {"conv2d", "grid_sample_bilinear", "apply_color", "apply_augment", "affine_grid",
             "gather_hw", "scatter_hw"}
    for name, builder in builders.items():
        rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
        n = max(cases_per_op // 4, 25) if name in light else cases_per_op
        worst = 0.0
        for _ in range(n):
            values, fn = builder(rng)
            worst = max(worst, _check_case(values, fn))
        results.append(CheckResult(name, worst <= 1.0, n, worst))
    results.append(_double_backward_check(seed))
    return results


def _double_backward_check(seed: int, n_cases: int = 40) -> CheckResult:
    """Hessian-vector products vs central differences of the first gradient."""
    rng = np.random.default_rng((seed, 0x2B))
    worst = 0.0
    for _ in range(n_cases):
        x0 = rng.uniform(-1.5, 1.5, (4,))
        v = rng.normal(size=(4,))
        w = rng.normal(size=(4,))

        def scalar(xt):
            return ops.sum_(ops.mul(ops.tanh(ops.mul(xt, xt)), Tensor(w)))

        def grad_at(values):
            tape = Tape()
            leaf = tape.leaf(values, requires_grad=True)
            return ops.backward(scalar(leaf), [leaf])[leaf].value

        tape = Tape()
        x = tape.leaf(x0, requires_grad=True)
        g = ops.backward(scalar(x), [x], retain_graph=True)[x]
        hv = ops.backward(ops.sum_(ops.mul(g, Tensor(v))), [x])[x].value
        h = 1e-5
        hv_num = (grad_at(x0 + h * v) - grad_at(x0 - h * v)) / (2 * h)
        denom = 1e-7 + 1e-3 * np.abs(hv_num)
        worst = max(worst, float(np.max(np.abs(hv - hv_num) / denom)))
    return CheckResult("double_backward", worst <= 1.0, n_cases, worst)


# ---------------------------------------------------------------------------
# analytic / unroll oracles


class _QuadraticToy:
    """Inner 0.5*(w - th)^2, outer 0.5*(w - a)^2; closed-form hypergradient."""

    def __init__(self, w0=0.0, th0=1.0, a=2.0):
        self.omega0 = {"w": np.array(w0)}
        self.theta0 = {"th": np.array(th0)}
        self.a = a

    def inner_loss(self, omega, theta, step):
        d = ops.sub(omega["w"], theta["th"])
        return ops.mul(0.5, ops.mul(d, d))

    def val_loss(self, omega):
        d = ops.sub(omega["w"], self.a)
        return ops.mul(0.5, ops.mul(d, d))


class LinearFeatureShiftToy:
    """Linear softmax model; theta shifts the training features (2 parameters)."""

    def __init__(self, seed=3, n_train=8, n_val=6, n_features=2):
        rng = np.random.default_rng(seed)
        self.x_train = rng.normal(size=(n_train, n_features))
        self.y_train = rng.integers(0, 2, n_train)
        self.x_val = rng.normal(size=(n_val, n_features))
        self.y_val = rng.integers(0, 2, n_val)
        self.omega0 = {"w": rng.normal(size=(n_features, 2)) * 0.3}
        self.theta0 = {"shift": np.array([0.3, -0.2])}

    def inner_loss(self, omega, theta, step):
        shifted = ops.add(Tensor(self.x_train), theta["shift"])
        return ops.softmax_cross_entropy(ops.matmul(shifted, omega["w"]), self.y_train)

    def val_loss(self, omega):
        return ops.softmax_cross_entropy(ops.matmul(Tensor(self.x_val), omega["w"]), self.y_val)

    def val_after_sgd(self, shift, steps, lr) -> float:
        """Plain (graph-free) rollout used as the finite-difference target."""
        w = self.omega0["w"].copy()
        for t in range(steps):
            tape = Tape()
            wt = tape.leaf(w, requires_grad=True)
            th = tape.leaf(shift, requires_grad=True)
            loss = self.inner_loss({"w": wt}, {"shift": th}, t)
            g = ops.backward(loss, [wt])
            w = w - lr * g[wt].value
        return float(self.val_loss({"w": Tensor(w)}).value)


def _run_truncated(problem, steps, window_size, lr):
    tape = Tape()
    state = engine.TrainState(
        tape,
        {k: tape.leaf(v, requires_grad=True) for k, v in problem.omega0.items()},
        {k: tape.leaf(v, requires_grad=True) for k, v in problem.theta0.items()},
    )
    window = engine.UnrollWindow(window_size)
    for t in range(steps):
        start = tape.checkpoint()
        loss = problem.inner_loss(state.omega, state.theta, t)
        engine.apply_inner_update(state, window, loss, lr, None, start)
    gm = engine.hypergrad_on_loss(window, problem.val_loss(state.omega), state)
    return np.concatenate([np.atleast_1d(gm.by_id(t.node_id).value) for t in state.theta.values()])


def oracle_suite() -> list[CheckResult]:
    """Hypergradient oracles: closed forms, unroll equivalence, finite differences."""
    results = []

    toy = _QuadraticToy()
    gm = engine.full_unroll_hypergrad(toy, steps=1, inner_lr=0.1)
    hg = float(np.atleast_1d(list(gm.values())[0].value)[0])
    err = abs(hg - (-0.19))
    results.append(CheckResult("scalar_quadratic_closed_form", err <= 1e-12, 1, err))

    # T-step quadratic: hypergrad = (w_T - a) * (1 - (1-lr)^T)
    worst = 0.0
    for steps in range(1, 7):
        gm = engine.full_unroll_hypergrad(toy, steps=steps, inner_lr=0.1)
        hg = float(np.atleast_1d(list(gm.values())[0].value)[0])
        w = 0.0
        for _ in range(steps):
            w -= 0.1 * (w - 1.0)
        expected = (w - 2.0) * (1.0 - 0.9**steps)
        worst = max(worst, abs(hg - expected))
    results.append(CheckResult("quadratic_geometric_series", worst <= 1e-12, 6, worst))

    lin = LinearFeatureShiftToy()
    lr = 0.2
    worst = 0.0
    for t in range(1, 6):
        truncated = _run_truncated(lin, steps=t, window_size=t, lr=lr)
        gm = engine.full_unroll_hypergrad(lin, steps=t, inner_lr=lr)
        full = np.concatenate([np.atleast_1d(g.value) for g in gm.values()])
        worst = max(worst, float(np.max(np.abs(truncated - full))))
    results.append(CheckResult("truncated_equals_full_unroll", worst <= 1e-10, 5, worst))

    worst = 0.0
    h = 1e-6
    for t in range(1, 6):
        gm = engine.full_unroll_hypergrad(lin, steps=t, inner_lr=lr)
        analytic = np.concatenate([np.atleast_1d(g.value) for g in gm.values()])
        fd = np.zeros(2)
        for i in range(2):
            up = lin.theta0["shift"].copy()
            dn = lin.theta0["shift"].copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (lin.val_after_sgd(up, t, lr) - lin.val_after_sgd(dn, t, lr)) / (2 * h)
        rel = float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-9)))
        worst = max(worst, rel)
    results.append(CheckResult("hypergrad_finite_difference", worst <= 1e-6, 5, worst))

    return results
