"""Differentiable operations over tape tensors.

Every primitive has a forward rule and a backward (VJP) rule.  Backward
rules are written in terms of the primitives themselves, so a backward pass
run with graph retention produces tensors that can be differentiated again.
Composite ops (conv2d, softmax_cross_entropy, mean, dropout) expand into
primitives and inherit higher-order correctness from them.

Non-smooth ops (relu, leaky_relu, clamp) use the left-derivative convention
at kink points: the gradient of the branch valid for values <= the kink.
"""

from __future__ import annotations

import numpy as np

from .tape import GradMap, NonFiniteError, Node, ShapeMismatch, TapeError, Tensor

_FORWARD = {}
_VJP = {}


def _primitive(kind):
    def wrap(fn):
        _FORWARD[kind] = fn
        return fn

    return wrap


def _vjp(kind):
    def wrap(fn):
        _VJP[kind] = fn
        return fn

    return wrap


def _find_tape(args):
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            return a.tape
    return None


def _wrap(x, tape):
    """Coerce scalars/arrays to Tensor; attach constants to the active tape."""
    if isinstance(x, Tensor):
        if x.tape is not None and tape is not None and x.tape is not tape:
            raise TapeError("operands live on different tapes")
        if x.node_id is None and tape is not None and tape.recording:
            return tape.constant(x.value)
        return x
    if tape is not None and tape.recording:
        return tape.constant(x)
    return Tensor(x)


def record_op(kind, inputs, attrs=None) -> Tensor:
    """Apply a primitive and, when the tape is recording, append its node."""
    if kind not in _FORWARD:
        raise AutodiffKindError(kind)
    tape = _find_tape(inputs)
    inputs = tuple(_wrap(x, tape) for x in inputs)
    value = _FORWARD[kind](*(t.value for t in inputs), attrs)
    if tape is not None and tape.checked and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op '{kind}' produced NaN or Inf")
    requires = any(t.requires_grad for t in inputs)
    if tape is not None and tape.recording:
        nid = tape.append(Node(kind, tuple(t.node_id for t in inputs), value, attrs, requires))
        return Tensor(value, tape, nid, requires)
    return Tensor(value)


class AutodiffKindError(TapeError):
    def __init__(self, kind):
        super().__init__(f"unknown primitive op kind: {kind!r}")


class _Ctx:
    """Access to a node's operands/output as tensors during a backward pass."""

    __slots__ = ("tape", "nid", "node")

    def __init__(self, tape, nid, node):
        self.tape = tape
        self.nid = nid
        self.node = node

    def inp(self, i) -> Tensor:
        return self.tape.tensor_for(self.node.inputs[i])

    @property
    def out(self) -> Tensor:
        return Tensor(self.node.value, self.tape, self.nid, self.node.requires_grad)

    @property
    def attrs(self):
        return self.node.attrs

    def inp_requires(self, i) -> bool:
        return self.tape.node(self.node.inputs[i]).requires_grad

    def const(self, value) -> Tensor:
        if self.tape.recording:
            return self.tape.constant(value)
        return Tensor(value)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_check(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


@_primitive("add")
def _fwd_add(a, b, attrs):
    _broadcast_check(a, b)
    return a + b


@_vjp("add")
def _bwd_add(ctx, g):
    out = []
    if ctx.inp_requires(0):
        out.append((0, _unbroadcast(g, ctx.inp(0).shape)))
    if ctx.inp_requires(1):
        out.append((1, _unbroadcast(g, ctx.inp(1).shape)))
    return out


@_primitive("sub")
def _fwd_sub(a, b, attrs):
    _broadcast_check(a, b)
    return a - b


@_vjp("sub")
def _bwd_sub(ctx, g):
    out = []
    if ctx.inp_requires(0):
        out.append((0, _unbroadcast(g, ctx.inp(0).shape)))
    if ctx.inp_requires(1):
        out.append((1, _unbroadcast(neg(g), ctx.inp(1).shape)))
    return out


@_primitive("neg")
def _fwd_neg(a, attrs):
    return -a


@_vjp("neg")
def _bwd_neg(ctx, g):
    return [(0, neg(g))]


@_primitive("mul")
def _fwd_mul(a, b, attrs):
    _broadcast_check(a, b)
    return a * b


@_vjp("mul")
def _bwd_mul(ctx, g):
    a, b = ctx.inp(0), ctx.inp(1)
    out = []
    if ctx.inp_requires(0):
        out.append((0, _unbroadcast(mul(g, b), a.shape)))
    if ctx.inp_requires(1):
        out.append((1, _unbroadcast(mul(g, a), b.shape)))
    return out


@_primitive("div")
def _fwd_div(a, b, attrs):
    _broadcast_check(a, b)
    return a / b


@_vjp("div")
def _bwd_div(ctx, g):
    a, b = ctx.inp(0), ctx.inp(1)
    out = []
    if ctx.inp_requires(0):
        out.append((0, _unbroadcast(div(g, b), a.shape)))
    if ctx.inp_requires(1):
        out.append((1, _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)))
    return out


# ---------------------------------------------------------------------------
# linear algebra / layout


@_primitive("matmul")
def _fwd_matmul(a, b, attrs):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul expects (m,k)@(k,n), got {a.shape} @ {b.shape}")
    return a @ b


@_vjp("matmul")
def _bwd_matmul(ctx, g):
    a, b = ctx.inp(0), ctx.inp(1)
    out = []
    if ctx.inp_requires(0):
        out.append((0, matmul(g, permute(b, (1, 0)))))
    if ctx.inp_requires(1):
        out.append((1, matmul(permute(a, (1, 0)), g)))
    return out


@_primitive("permute")
def _fwd_permute(a, attrs):
    axes = attrs
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"invalid permutation {axes} for ndim {a.ndim}")
    return np.transpose(a, axes)


@_vjp("permute")
def _bwd_permute(ctx, g):
    inverse = tuple(np.argsort(ctx.attrs))
    return [(0, permute(g, inverse))]


@_primitive("reshape")
def _fwd_reshape(a, attrs):
    shape = attrs
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    return a.reshape(shape)


@_vjp("reshape")
def _bwd_reshape(ctx, g):
    return [(0, reshape(g, ctx.inp(0).shape))]


@_primitive("concat")
def _fwd_concat(*args):
    *arrays, attrs = args
    axis = attrs
    base = list(arrays[0].shape)
    for a in arrays[1:]:
        other = list(a.shape)
        if len(other) != len(base):
            raise ShapeMismatch("concat rank mismatch")
        for d, (x, y) in enumerate(zip(base, other)):
            if d != axis and x != y:
                raise ShapeMismatch(f"concat shapes differ off-axis: {base} vs {other}")
    return np.concatenate(arrays, axis=axis)


@_vjp("concat")
def _bwd_concat(ctx, g):
    axis = ctx.attrs
    out = []
    offset = 0
    for i in range(len(ctx.node.inputs)):
        width = ctx.inp(i).shape[axis]
        if ctx.inp_requires(i):
            regions = tuple(
                (offset, offset + width) if d == axis else (0, n)
                for d, n in enumerate(g.shape)
            )
            out.append((i, slice_(g, regions)))
        offset += width
    return out


@_primitive("slice")
def _fwd_slice(a, attrs):
    regions = attrs
    if len(regions) != a.ndim:
        raise ShapeMismatch("slice regions must cover every axis")
    for (start, stop), n in zip(regions, a.shape):
        if not (0 <= start <= stop <= n):
            raise ShapeMismatch(f"slice ({start},{stop}) out of bounds for size {n}")
    return a[tuple(slice(s, e) for s, e in regions)]


@_vjp("slice")
def _bwd_slice(ctx, g):
    return [(0, insert(g, ctx.attrs, ctx.inp(0).shape))]


@_primitive("insert")
def _fwd_insert(a, attrs):
    regions, out_shape = attrs
    extents = tuple(e - s for s, e in regions)
    if extents != a.shape:
        raise ShapeMismatch(f"insert regions {extents} do not match value shape {a.shape}")
    out = np.zeros(out_shape, dtype=np.float64)
    out[tuple(slice(s, e) for s, e in regions)] = a
    return out


@_vjp("insert")
def _bwd_insert(ctx, g):
    regions, _ = ctx.attrs
    return [(0, slice_(g, regions))]


# ---------------------------------------------------------------------------
# nonlinearities


@_primitive("relu")
def _fwd_relu(a, attrs):
    return np.maximum(a, 0.0)


@_vjp("relu")
def _bwd_relu(ctx, g):
    mask = (ctx.inp(0).value > 0.0).astype(np.float64)
    return [(0, mul(g, ctx.const(mask)))]


@_primitive("leaky_relu")
def _fwd_leaky_relu(a, attrs):
    slope = attrs
    return np.where(a > 0.0, a, slope * a)


@_vjp("leaky_relu")
def _bwd_leaky_relu(ctx, g):
    slope = ctx.attrs
    factor = np.where(ctx.inp(0).value > 0.0, 1.0, slope)
    return [(0, mul(g, ctx.const(factor)))]


@_primitive("tanh")
def _fwd_tanh(a, attrs):
    return np.tanh(a)


@_vjp("tanh")
def _bwd_tanh(ctx, g):
    y = ctx.out
    return [(0, mul(g, sub(ctx.const(1.0), mul(y, y))))]


@_primitive("sigmoid")
def _fwd_sigmoid(a, attrs):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@_vjp("sigmoid")
def _bwd_sigmoid(ctx, g):
    y = ctx.out
    return [(0, mul(g, mul(y, sub(ctx.const(1.0), y))))]


@_primitive("log")
def _fwd_log(a, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


@_vjp("log")
def _bwd_log(ctx, g):
    return [(0, div(g, ctx.inp(0)))]


@_primitive("exp")
def _fwd_exp(a, attrs):
    return np.exp(a)


@_vjp("exp")
def _bwd_exp(ctx, g):
    return [(0, mul(g, ctx.out))]


@_primitive("sin")
def _fwd_sin(a, attrs):
    return np.sin(a)


@_vjp("sin")
def _bwd_sin(ctx, g):
    return [(0, mul(g, cos(ctx.inp(0))))]


@_primitive("cos")
def _fwd_cos(a, attrs):
    return np.cos(a)


@_vjp("cos")
def _bwd_cos(ctx, g):
    return [(0, mul(g, neg(sin(ctx.inp(0)))))]


@_primitive("clamp")
def _fwd_clamp(a, attrs):
    lo, hi = attrs
    if lo >= hi:
        raise ShapeMismatch(f"clamp requires lo < hi, got ({lo}, {hi})")
    return np.clip(a, lo, hi)


@_vjp("clamp")
def _bwd_clamp(ctx, g):
    lo, hi = ctx.attrs
    x = ctx.inp(0).value
    mask = ((x > lo) & (x <= hi)).astype(np.float64)
    return [(0, mul(g, ctx.const(mask)))]


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@_primitive("sum")
def _fwd_sum(a, attrs):
    axis, keepdims = attrs
    return np.sum(a, axis=axis, keepdims=keepdims)


@_vjp("sum")
def _bwd_sum(ctx, g):
    axis, keepdims = ctx.attrs
    in_shape = ctx.inp(0).shape
    if axis is not None and not keepdims:
        kd = tuple(1 if d in axis else n for d, n in enumerate(in_shape))
        g = reshape(g, kd)
    return [(0, add(g, ctx.const(np.zeros(in_shape))))]


# ---------------------------------------------------------------------------
# indexed reads/writes of the spatial plane (used by grid sampling)


def _hw_flat_index(iy, ix, height, width):
    if np.any(iy < 0) or np.any(iy >= height) or np.any(ix < 0) or np.any(ix >= width):
        raise ShapeMismatch("gather/scatter index out of bounds")
    return (iy.astype(np.intp) * width + ix.astype(np.intp))


@_primitive("gather_hw")
def _fwd_gather_hw(img, attrs):
    iy, ix = attrs
    if img.ndim != 4:
        raise ShapeMismatch("gather_hw expects a (batch, channel, height, width) array")
    b, c, h, w = img.shape
    flat = _hw_flat_index(iy, ix, h, w).reshape(b, 1, -1)
    taken = np.take_along_axis(img.reshape(b, c, h * w), np.broadcast_to(flat, (b, c, flat.shape[-1])), axis=2)
    return taken.reshape(b, c, iy.shape[1], iy.shape[2])


@_vjp("gather_hw")
def _bwd_gather_hw(ctx, g):
    iy, ix = ctx.attrs
    _, _, h, w = ctx.inp(0).shape
    return [(0, scatter_hw(g, iy, ix, (h, w)))]


@_primitive("scatter_hw")
def _fwd_scatter_hw(src, attrs):
    iy, ix, (h, w) = attrs
    b, c, hs, ws = src.shape
    flat = _hw_flat_index(iy, ix, h, w).reshape(b, 1, hs * ws)
    out = np.zeros((b, c, h * w), dtype=np.float64)
    bidx = np.arange(b).reshape(b, 1, 1)
    cidx = np.arange(c).reshape(1, c, 1)
    np.add.at(out, (bidx, cidx, flat), src.reshape(b, c, hs * ws))
    return out.reshape(b, c, h, w)


@_vjp("scatter_hw")
def _bwd_scatter_hw(ctx, g):
    iy, ix, _ = ctx.attrs
    return [(0, gather_hw(g, iy, ix))]


# ---------------------------------------------------------------------------
# public op functions


def add(a, b):
    return record_op("add", (a, b))


def sub(a, b):
    return record_op("sub", (a, b))


def neg(a):
    return record_op("neg", (a,))


def mul(a, b):
    return record_op("mul", (a, b))


def div(a, b):
    return record_op("div", (a, b))


def matmul(a, b):
    return record_op("matmul", (a, b))


def permute(a, axes):
    return record_op("permute", (a,), tuple(axes))


def reshape(a, shape):
    return record_op("reshape", (a,), tuple(int(n) for n in shape))


def concat(tensors, axis):
    if not tensors:
        raise ShapeMismatch("concat requires at least one tensor")
    return record_op("concat", tuple(tensors), int(axis))


def slice_(a, regions):
    return record_op("slice", (a,), tuple((int(s), int(e)) for s, e in regions))


def insert(a, regions, out_shape):
    regions = tuple((int(s), int(e)) for s, e in regions)
    return record_op("insert", (a,), (regions, tuple(int(n) for n in out_shape)))


def relu(a):
    return record_op("relu", (a,))


def leaky_relu(a, slope):
    return record_op("leaky_relu", (a,), float(slope))


def tanh(a):
    return record_op("tanh", (a,))


def sigmoid(a):
    return record_op("sigmoid", (a,))


def log(a):
    return record_op("log", (a,))


def exp(a):
    return record_op("exp", (a,))


def sin(a):
    return record_op("sin", (a,))


def cos(a):
    return record_op("cos", (a,))


def clamp(a, lo, hi):
    return record_op("clamp", (a,), (float(lo), float(hi)))


def sum_(a, axis=None, keepdims=False):
    a = a if isinstance(a, Tensor) else Tensor(a)
    return record_op("sum", (a,), (_norm_axis(axis, a.ndim), bool(keepdims)))


def gather_hw(img, iy, ix):
    return record_op("gather_hw", (img,), (np.asarray(iy), np.asarray(ix)))


def scatter_hw(src, iy, ix, hw):
    return record_op("scatter_hw", (src,), (np.asarray(iy), np.asarray(ix), (int(hw[0]), int(hw[1]))))


# ---------------------------------------------------------------------------
# composites


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(d for d, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


def mean(a, axis=None, keepdims=False):
    a = a if isinstance(a, Tensor) else Tensor(a)
    axis_n = _norm_axis(axis, a.ndim)
    if axis_n is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[d] for d in axis_n]))
    return mul(sum_(a, axis=axis_n, keepdims=keepdims), 1.0 / count)


def dropout(a, mask):
    """Elementwise product with an externally supplied, pre-scaled mask.

    The mask carries 0 or 1/keep_prob entries so the forward pass stays
    replayable: all randomness lives in the RNG that built the mask.
    """
    return mul(a, mask)


def dropout_mask(rng, shape, rate):
    keep = rng.random(size=shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def conv2d(x, w, bias=None):
    """3x3 convolution, stride 1, symmetric zero padding (same spatial size).

    Expanded into pad/slice/matmul primitives so second-order gradients come
    from primitive closure rather than bespoke conv backward rules.
    """
    if x.ndim != 4:
        raise ShapeMismatch("conv2d input must be (batch, channel, height, width)")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeMismatch("conv2d kernel must be (filters, channel, 3, 3)")
    b, c, h, wd = x.shape
    f, cw = w.shape[0], w.shape[1]
    if cw != c:
        raise ShapeMismatch(f"conv2d channel mismatch: image {c}, kernel {cw}")
    padded = insert(x, ((0, b), (0, c), (1, h + 1), (1, wd + 1)), (b, c, h + 2, wd + 2))
    cols = []
    for ky in range(3):
        for kx in range(3):
            patch = slice_(padded, ((0, b), (0, c), (ky, ky + h), (kx, kx + wd)))
            cols.append(reshape(permute(patch, (0, 2, 3, 1)), (b * h * wd, c)))
    patches = concat(cols, axis=1)
    w2 = reshape(permute(w, (2, 3, 1, 0)), (9 * c, f))
    out = matmul(patches, w2)
    if bias is not None:
        out = add(out, bias)
    return permute(reshape(out, (b, h, wd, f)), (0, 3, 1, 2))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    The row max is subtracted as a constant, which stabilizes exp without
    changing the gradient (softmax is shift invariant).
    """
    if logits.ndim != 2:
        raise ShapeMismatch("logits must be (batch, classes)")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels must have shape ({n},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ShapeMismatch("label out of range")
    shift = np.max(logits.value, axis=1, keepdims=True)
    z = sub(logits, _wrap_const(logits, shift))
    lse = log(sum_(exp(z), axis=1, keepdims=True))
    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), labels.astype(np.intp)] = 1.0
    true_logit = sum_(mul(z, _wrap_const(logits, onehot)), axis=1, keepdims=True)
    return mean(sub(lse, true_logit))


def _wrap_const(like, value):
    tape = like.tape
    if tape is not None and tape.recording:
        return tape.constant(value)
    return Tensor(value)


# ---------------------------------------------------------------------------
# backward / detach / finite differences


def detach(x: Tensor) -> Tensor:
    """Same values, no lineage: gradients do not flow past this point."""
    if x.tape is not None and x.tape.recording:
        return x.tape.constant(x.value)
    return Tensor(x.value)


def backward(loss: Tensor, wrt, retain_graph: bool = False) -> GradMap:
    """Reverse-mode gradients of a scalar with respect to target tensors.

    Targets are treated as boundaries: the accumulated adjoint is captured
    there and not propagated further.  With ``retain_graph=True`` every
    returned gradient is itself a recorded node of the same tape, so it can
    be differentiated again.  Targets unreachable from the loss get zeros.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node_id is None:
        raise TapeError("loss is not recorded on a tape")
    targets = list(wrt)
    for t in targets:
        if t.node_id is None or t.tape is not tape:
            raise TapeError("differentiation target is not on the loss's tape")
    wrt_ids = {t.node_id for t in targets}

    # Ancestors of the loss along grad-requiring edges.
    ancestors = set()
    stack = [loss.node_id]
    while stack:
        nid = stack.pop()
        if nid in ancestors:
            continue
        ancestors.add(nid)
        for iid in tape.node(nid).inputs:
            if tape.node(iid).requires_grad and iid not in ancestors:
                stack.append(iid)

    # Keep only nodes on a path from the loss down to some target.
    leads = set(wrt_ids & ancestors)
    for nid in sorted(ancestors):
        if nid in leads:
            continue
        if any(i in leads for i in tape.node(nid).inputs):
            leads.add(nid)

    captured: dict[int, Tensor] = {}
    prev_recording = tape.recording
    tape.recording = retain_graph
    try:
        grads: dict[int, Tensor] = {}
        seed = tape.constant(np.ones_like(loss.value)) if retain_graph else Tensor(np.ones_like(loss.value))
        grads[loss.node_id] = seed
        order = sorted(leads | {loss.node_id}, reverse=True)
        for nid in order:
            g = grads.pop(nid, None)
            if g is None:
                continue
            if nid in wrt_ids:
                captured[nid] = g
                continue
            node = tape.node(nid)
            if node.kind == "leaf":
                continue
            ctx = _Ctx(tape, nid, node)
            for pos, gin in _VJP[node.kind](ctx, g):
                iid = node.inputs[pos]
                if iid not in leads:
                    continue
                if iid in grads:
                    grads[iid] = add(grads[iid], gin)
                else:
                    grads[iid] = gin
    finally:
        tape.recording = prev_recording

    result = {}
    for t in targets:
        if t.node_id in captured:
            result[t.node_id] = captured[t.node_id]
        else:
            zeros = np.zeros_like(t.value)
            result[t.node_id] = tape.constant(zeros) if retain_graph else Tensor(zeros)
    return GradMap(result)


def finite_diff_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued tensor function.

    Deliberately independent of the tape: ``f`` is evaluated on plain
    tensors, so this is a valid oracle for ``backward``.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    base = np.array(x.value, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy()))
        flat[i] = orig - h
        fm = f(Tensor(base.copy()))
        flat[i] = orig
        fp_v, fm_v = float(fp.value), float(fm.value)
        if not (np.isfinite(fp_v) and np.isfinite(fm_v)):
            raise NonFiniteError("function returned non-finite value during finite differences")
        gflat[i] = (fp_v - fm_v) / (2.0 * h)
    return Tensor(grad)
