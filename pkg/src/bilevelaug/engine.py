"""Online approximate bilevel optimizer with truncated unrolled differentiation.

The classifier takes recorded SGD steps whose update expressions stay on the
tape, so the last K updates form a differentiable chain from the validation
loss back to the augmenter parameters.  Evicted steps are severed (their
incoming classifier parameters become leaves) and their tape range is
released, which truncates the hypergradient to exactly K retained updates
and keeps memory proportional to K times the size of one step's graph.

The augmenter parameters are held fixed within one retained window: outer
updates create fresh parameter leaves, and the window-capacity <= update-period
constraint guarantees every record seen by a hypergradient was built under
the current parameters (asserted at hypergradient time).
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import ExperimentConfig, MetricsRecord, OptimConfig
from .datasets import Dataset
from .networks import (
    AugmenterSpec,
    ClassifierSpec,
    ParamBounds,
    augmenter_forward,
    classifier_forward,
    init_weights,
    sample_noise,
)
from .rng import SeedStreams
from .tape import GradMap, Tape, TapeError, Tensor
from .vision import AffineMatrix, affine_grid, apply_augment, grid_sample_bilinear, random_flip


def px_to_normalized(px: float, size: int) -> float:
    """Pixel offsets -> normalized grid coordinates (corner-aligned)."""
    return 2.0 * px / (size - 1)


def translate_batch(images: np.ndarray, offsets_px: np.ndarray) -> np.ndarray:
    """Warp-based translation of a plain image batch by per-image pixel offsets."""
    b, _, h, w = images.shape
    mats = np.tile(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), (b, 1, 1))
    mats[:, 0, 2] = px_to_normalized(offsets_px[:, 0], w)
    mats[:, 1, 2] = px_to_normalized(offsets_px[:, 1], h)
    x = Tensor(images)
    grid = affine_grid(AffineMatrix(Tensor(mats)), h, w)
    return grid_sample_bilinear(x, grid).value


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite training loss at inner step {step}")
        self.step = step


class MemoryGuardError(RuntimeError):
    """A full unroll exceeded its node budget."""


@dataclass
class StepRecord:
    """Bookkeeping for one retained differentiable inner update."""

    start: int
    end: int
    omega_in_ids: tuple[int, ...]
    omega_out: dict[str, Tensor]
    theta_ids: tuple[int, ...]
    loss_value: float

    def omega_out_ids(self) -> tuple[int, ...]:
        return tuple(t.node_id for t in self.omega_out.values())


class UnrollWindow:
    """Ring buffer of the last K retained inner-update graphs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self._steps: deque[StepRecord] = deque()

    def __len__(self) -> int:
        return len(self._steps)

    def records(self) -> tuple[StepRecord, ...]:
        return tuple(self._steps)

    def push(self, rec: StepRecord) -> StepRecord | None:
        """Append a record; returns the evicted record once over capacity."""
        self._steps.append(rec)
        if len(self._steps) > self.capacity:
            return self._steps.popleft()
        return None

    def oldest_start(self) -> int:
        return self._steps[0].start

    def live_theta_ids(self) -> set[int]:
        ids: set[int] = set()
        for rec in self._steps:
            ids.update(rec.theta_ids)
        return ids


@dataclass
class TrainState:
    tape: Tape
    omega: dict[str, Tensor]
    theta: dict[str, Tensor] | None = None
    classifier_spec: ClassifierSpec | None = None
    augmenter_spec: AugmenterSpec | None = None
    transform_flags: frozenset = frozenset()
    frozen_theta: frozenset = frozenset()
    step: int = 0
    outer_steps: int = 0
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_factor(grad_values, clip_norm) -> float:
    """Global-norm clip factor; exactly 1.0 when the clip is inactive."""
    if clip_norm is None:
        return 1.0
    total = 0.0
    for g in grad_values:
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= clip_norm:
        return 1.0
    return clip_norm / norm


def apply_inner_update(state: TrainState, window: UnrollWindow, loss: Tensor, inner_lr: float,
                       clip_norm=None, start: int | None = None) -> None:
    """One recorded SGD step: omega_new = omega - lr * grad, kept differentiable.

    The gradient is computed with graph retention, so omega_new remains a
    function of everything the loss depended on, including the augmenter
    parameters through the augmented batch.
    """
    tape = state.tape
    if start is None:
        start = window.records()[-1].end if len(window) else 0
    names = list(state.omega)
    params = [state.omega[k] for k in names]
    grads = ops.backward(loss, params, retain_graph=True)
    lr_eff = float(inner_lr) * clip_factor((grads[p].value for p in params), clip_norm)
    new = {}
    for k in names:
        new[k] = ops.sub(state.omega[k], ops.mul(lr_eff, grads[state.omega[k]]))
    theta_ids = tuple(t.node_id for t in state.theta.values()) if state.theta else ()
    rec = StepRecord(
        start=start,
        end=tape.next_id,
        omega_in_ids=tuple(p.node_id for p in params),
        omega_out=new,
        theta_ids=theta_ids,
        loss_value=float(loss.value),
    )
    evicted = window.push(rec)
    if evicted is not None:
        _release_step(state, window, evicted)
    state.omega = new
    state.step += 1


def _release_step(state: TrainState, window: UnrollWindow, evicted: StepRecord) -> None:
    """Sever the truncation boundary and free the evicted step's subgraph."""
    tape = state.tape
    out_ids = evicted.omega_out_ids()
    for nid in out_ids:
        tape.sever(nid)
    keep = set(out_ids)
    keep.update(t.node_id for t in state.omega.values())
    if state.theta:
        keep.update(t.node_id for t in state.theta.values())
    # Everything from the evicted step up to the next retained step dies,
    # including transient validation-loss graphs built between steps.
    tape.drop_range(evicted.start, window.oldest_start(), keep=keep)
    tape.drop(evicted.omega_in_ids)
    stale_theta = set(evicted.theta_ids) - window.live_theta_ids() - keep
    tape.drop(stale_theta)


def hypergrad_on_loss(window: UnrollWindow, val_loss: Tensor, state: TrainState) -> GradMap:
    """Backpropagate a validation loss through the retained updates into theta."""
    if len(window) == 0:
        raise TapeError("unroll window is empty; run an inner step first")
    if not state.theta:
        raise TapeError("no augmenter parameters to differentiate")
    current = tuple(t.node_id for t in state.theta.values())
    for rec in window.records():
        if rec.theta_ids != current:
            raise TapeError("window holds a step recorded under stale augmenter parameters")
    return ops.backward(val_loss, list(state.theta.values()), retain_graph=False)


def hypergrad_truncated(window: UnrollWindow, val_images, val_labels, state: TrainState):
    """Hypergradient of the clean-validation loss; returns (gradmap, val_loss).

    No augmentation touches the validation batch: it enters the graph as a
    constant leaf feeding the classifier directly.
    """
    if len(val_labels) == 0:
        raise ValueError("validation batch is empty")
    x = state.tape.constant(val_images)
    logits = classifier_forward(state.classifier_spec, x, state.omega)
    val_loss = ops.softmax_cross_entropy(logits, val_labels)
    return hypergrad_on_loss(window, val_loss, state), float(val_loss.value)


def full_unroll_hypergrad(problem, steps: int, inner_lr: float, node_budget: int = 2_000_000) -> GradMap:
    """Exact derivative of the final validation loss w.r.t. theta, theta fixed.

    Retains every update graph (window capacity = steps); a test oracle for
    the truncated estimate, not a training path.
    """
    tape = Tape()
    omega = {k: tape.leaf(v, requires_grad=True) for k, v in problem.omega0.items()}
    theta = {k: tape.leaf(v, requires_grad=True) for k, v in problem.theta0.items()}
    state = TrainState(tape, omega, theta)
    window = UnrollWindow(steps)
    for t in range(steps):
        start = tape.checkpoint()
        loss = problem.inner_loss(state.omega, state.theta, t)
        apply_inner_update(state, window, loss, inner_lr, clip_norm=None, start=start)
        if len(tape) > node_budget:
            raise MemoryGuardError(f"unroll exceeded {node_budget} nodes at step {t}")
    val_loss = problem.val_loss(state.omega)
    return hypergrad_on_loss(window, val_loss, state)


def outer_step(state: TrainState, hypergrad: GradMap, cfg: OptimConfig, outer_lr=None) -> None:
    """Update theta with the configured outer optimizer; frozen names are kept.

    Updated parameters become fresh leaves so retained step records keep
    referencing the values they were built with until they are evicted.
    """
    if not state.theta:
        raise TapeError("no augmenter parameters to update")
    lr = cfg.outer_lr if outer_lr is None else float(outer_lr)
    names = [k for k in state.theta if k not in state.frozen_theta]
    grads = {}
    for k in names:
        g = np.array(hypergrad[state.theta[k]].value)
        if cfg.weight_decay:
            g += cfg.weight_decay * state.theta[k].value
        grads[k] = g
    factor = clip_factor(grads.values(), cfg.clip_norm)
    state.outer_steps += 1
    new_theta = dict(state.theta)
    for k in names:
        g = grads[k] * factor
        value = state.theta[k].value
        if cfg.outer_optimizer == "sgd":
            updated = value - lr * g
        else:
            m = state.opt_m.setdefault(k, np.zeros_like(value))
            v = state.opt_v.setdefault(k, np.zeros_like(value))
            m[:] = 0.9 * m + 0.1 * g
            v[:] = 0.999 * v + 0.001 * g * g
            t = state.outer_steps
            m_hat = m / (1.0 - 0.9**t)
            v_hat = v / (1.0 - 0.999**t)
            updated = value - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        new_theta[k] = state.tape.leaf(updated, requires_grad=True)
    state.theta = new_theta


def inner_step(state: TrainState, window: UnrollWindow | None, images, labels,
               cfg: OptimConfig, noise_rng=None, dropout_rng=None, inner_lr=None) -> dict:
    """One inner classifier update on a (possibly augmented) training batch.

    With an augmenter present the step graph is retained in the window; a
    plain run computes the same update values eagerly and releases its graph
    immediately, so both paths produce bitwise-identical parameters.
    """
    tape = state.tape
    start = tape.checkpoint()
    x = tape.constant(images)
    stats = {"mean_abs_affine_delta": 0.0, "mean_abs_color": 0.0}
    lr = cfg.inner_lr if inner_lr is None else float(inner_lr)
    learned = state.theta is not None
    if learned:
        spec = state.augmenter_spec
        noise = sample_noise(len(labels), spec.noise_dim, noise_rng, tape)
        mat, colors = augmenter_forward(spec, noise, state.theta, train_mode=True, rng=dropout_rng)
        x_in = apply_augment(x, mat, colors, state.transform_flags)
        if mat is not None:
            stats["mean_abs_affine_delta"] = float(np.mean(mat.identity_deltas()))
        if colors is not None:
            stats["mean_abs_color"] = float(np.mean(colors.abs_means()))
    else:
        x_in = x
    logits = classifier_forward(state.classifier_spec, x_in, state.omega)
    loss = ops.softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss.value):
        raise NonFiniteLossError(state.step)
    stats["train_loss"] = float(loss.value)
    if learned:
        apply_inner_update(state, window, loss, lr, cfg.clip_norm, start)
    else:
        names = list(state.omega)
        params = [state.omega[k] for k in names]
        grads = ops.backward(loss, params, retain_graph=False)
        lr_eff = lr * clip_factor((grads[p].value for p in params), cfg.clip_norm)
        updated = {k: state.omega[k].value - (lr_eff * grads[state.omega[k]].value) for k in names}
        old_ids = [p.node_id for p in params]
        tape.drop_range(start, tape.next_id)
        tape.drop(old_ids)
        state.omega = {k: tape.leaf(v, requires_grad=True) for k, v in updated.items()}
        state.step += 1
    return stats


def evaluate_accuracy(spec: ClassifierSpec, omega, images, labels, augment_fn=None) -> float:
    """Classification accuracy with recording off (no tape growth)."""
    tape = next(iter(omega.values())).tape
    prev = tape.recording
    tape.recording = False
    try:
        x = Tensor(np.asarray(images))
        if augment_fn is not None:
            x = augment_fn(x)
        logits = classifier_forward(spec, x, omega)
    finally:
        tape.recording = prev
    pred = np.argmax(logits.value, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def _plain_val_loss(state: TrainState, images, labels) -> float:
    tape = state.tape
    prev = tape.recording
    tape.recording = False
    try:
        logits = classifier_forward(state.classifier_spec, Tensor(np.asarray(images)), state.omega)
        loss = ops.softmax_cross_entropy(logits, labels)
    finally:
        tape.recording = prev
    return float(loss.value)


def build_classifier_spec(config: ExperimentConfig) -> ClassifierSpec:
    channels = 3 if config.task.name == "hue_shifted_blobs" else 1
    return ClassifierSpec(
        kind=config.classifier.kind,
        input_shape=(channels, config.task.image_size, config.task.image_size),
        hidden=tuple(config.classifier.hidden),
        channels=config.classifier.channels,
        num_classes=config.task.num_classes,
    )


def build_augmenter_spec(config: ExperimentConfig) -> AugmenterSpec:
    aug = config.augmenter
    bounds = ParamBounds(
        affine_linear_bound=aug.linear_bound,
        affine_translation_bound=aug.translation_bound,
    )
    return AugmenterSpec.for_transforms(aug.transforms, size=aug.size, bounds=bounds)


@dataclass
class TrainResult:
    metrics: list[MetricsRecord]
    omega_values: dict[str, np.ndarray]
    theta_values: dict[str, np.ndarray] | None
    test_accuracy: float
    val_accuracy: float
    test_accuracy_per_epoch: list[float]
    inner_steps: int
    wall_time_ms: float
    eval_used_augmenter: bool = False
    val_loss_final: float = float("nan")

    def last_epoch_val_loss(self) -> float:
        losses = [r.val_loss for r in self.metrics if r.val_loss is not None]
        n = max(len(losses) // 10, 1)
        return float(np.mean(losses[-n:])) if losses else float("nan")


def _batches(indices: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [indices[i : i + batch_size] for i in range(0, len(indices), batch_size)]


def train(config: ExperimentConfig, train_data: Dataset, test_data: Dataset,
          streams: SeedStreams) -> TrainResult:
    """Run the training protocol for modes none / predefined / learned.

    Each epoch reshuffles the training pool into an 80/20 train/validation
    split.  Inner steps run on train batches; in learned mode each group of
    J inner steps is followed by a hypergradient on the next validation
    minibatch (always disjoint from the inner batches) and an outer update.
    """
    mode = config.mode
    if mode not in ("none", "predefined", "learned"):
        raise ValueError(f"train() does not handle mode {mode!r}")
    t_begin = time.perf_counter()
    tape = Tape()
    init_rng = streams.get("init")
    classifier_spec = build_classifier_spec(config)
    omega = init_weights(classifier_spec, tape, init_rng)
    state = TrainState(tape, omega, classifier_spec=classifier_spec)
    window = None
    if mode == "learned":
        aug_spec = build_augmenter_spec(config)
        state.augmenter_spec = aug_spec
        state.transform_flags = aug_spec.transform_flags()
        state.theta = init_weights(aug_spec, tape, init_rng,
                                   output_scale=config.augmenter.init_output_scale)
        last = len(aug_spec.layer_widths()) - 2
        frozen = set()
        if config.augmenter.freeze_output_layer:
            frozen |= {f"w{last}", f"b{last}"}
        if not config.augmenter.train_output_bias:
            frozen.add(f"b{last}")
        state.frozen_theta = frozenset(frozen)
        window = UnrollWindow(config.optim.unroll_steps)

    n = len(train_data)
    val_n = n // 5
    if val_n < 1 or n - val_n < 1:
        raise ValueError(f"dataset too small to split: {n} samples")

    data_rng = streams.get("data")
    noise_rng = streams.get("noise")
    dropout_rng = streams.get("dropout")
    flip_rng = streams.get("flip")
    predefined_rng = streams.get("predefined")

    rows: list[MetricsRecord] = []
    test_acc_per_epoch: list[float] = []
    val_accuracy = 0.0
    iteration = 0
    full_theta = state.theta
    fixed_split = None
    if not config.resplit_per_epoch:
        fixed = data_rng.permutation(n)
        fixed_split = (fixed[:val_n], fixed[val_n:])
    for epoch in range(config.epochs):
        warming = mode == "learned" and epoch < config.augment_warmup_epochs
        state.theta = None if warming else full_theta
        if fixed_split is None:
            perm = data_rng.permutation(n)
            val_idx = perm[:val_n]
            train_idx = perm[val_n:]
        else:
            val_idx, train_idx = fixed_split
            train_idx = data_rng.permutation(train_idx)
        train_batches = _batches(train_idx, config.batch_size)
        val_batches = _batches(val_idx, config.batch_size)
        val_cursor = 0
        epoch_lr = config.optim.inner_lr_at(epoch, config.epochs)
        for idx in train_batches:
            t0 = time.perf_counter()
            images = train_data.images[idx]
            labels = train_data.labels[idx]
            if config.flip is not None:
                images, _ = random_flip(images, config.flip, flip_rng)
            if mode == "predefined" and config.predefined_translate_px > 0:
                px = config.predefined_translate_px
                offsets = predefined_rng.uniform(-px, px, size=(len(idx), 2))
                images = translate_batch(images, offsets)
            stats = inner_step(state, window, images, labels, config.optim, noise_rng, dropout_rng,
                               inner_lr=epoch_lr)
            val_loss = None
            if state.step % config.optim.steps_per_outer == 0:
                vidx = val_batches[val_cursor % len(val_batches)]
                val_cursor += 1
                v_images = train_data.images[vidx]
                v_labels = train_data.labels[vidx]
                if mode == "learned" and not warming:
                    gm, val_loss = hypergrad_truncated(window, v_images, v_labels, state)
                    outer_step(state, gm, config.optim,
                               outer_lr=config.optim.outer_lr_at(epoch - config.augment_warmup_epochs))
                    full_theta = state.theta
                else:
                    val_loss = _plain_val_loss(state, v_images, v_labels)
            rows.append(
                MetricsRecord(
                    epoch=epoch,
                    iteration=iteration,
                    train_loss=stats["train_loss"],
                    val_loss=val_loss,
                    test_accuracy=None,
                    mean_abs_affine_delta=stats["mean_abs_affine_delta"],
                    mean_abs_color=stats["mean_abs_color"],
                    wall_time_ms=(time.perf_counter() - t0) * 1e3,
                )
            )
            iteration += 1
        test_acc = evaluate_accuracy(classifier_spec, state.omega, test_data.images, test_data.labels)
        rows[-1].test_accuracy = test_acc
        test_acc_per_epoch.append(test_acc)
        val_accuracy = evaluate_accuracy(
            classifier_spec, state.omega, train_data.images[val_idx], train_data.labels[val_idx]
        )

    state.theta = full_theta
    result = TrainResult(
        metrics=rows,
        omega_values={k: np.array(t.value) for k, t in state.omega.items()},
        theta_values={k: np.array(t.value) for k, t in state.theta.items()} if state.theta else None,
        test_accuracy=test_acc_per_epoch[-1],
        val_accuracy=val_accuracy,
        test_accuracy_per_epoch=test_acc_per_epoch,
        inner_steps=state.step,
        wall_time_ms=(time.perf_counter() - t_begin) * 1e3,
    )
    result.val_loss_final = result.last_epoch_val_loss()
    return result
