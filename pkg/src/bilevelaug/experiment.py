"""Experiment execution: baseline strategies, artifacts, and run aggregation.

Five modes:
  none                 plain supervised training, no augmentation
  predefined           fixed-range random integer translations on train batches
  transform_invariant  augmenter trained first-order on the same data as the
                       classifier; its transform is also applied at test time
  validated_magnitude  grid search over a single translation magnitude, one
                       full training per grid point, best validation accuracy wins
  learned              the bilevel engine (validation-driven augmenter updates)

Every run writes metrics.csv, summary.json and weights.blvt into its output
directory; (config, seed) determines every byte except wall-time fields.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ops
from .config import (
    METRICS_COLUMNS,
    ConfigError,
    ExperimentConfig,
    MetricsRecord,
)
from .datasets import Dataset, SyntheticTaskSpec, generate, save_tensors
from .engine import (
    TrainResult,
    TrainState,
    UnrollWindow,
    build_augmenter_spec,
    build_classifier_spec,
    clip_factor,
    evaluate_accuracy,
    inner_step,
    train,
)
from .networks import augmenter_forward, classifier_forward, init_weights, sample_noise
from .rng import SeedStreams
from .tape import Tape, Tensor
from .vision import apply_augment, random_flip


def task_spec(config: ExperimentConfig) -> SyntheticTaskSpec:
    t = config.task
    return SyntheticTaskSpec(
        task=t.name,
        image_size=t.image_size,
        num_classes=t.num_classes,
        samples_per_class=t.samples_per_class,
        test_samples_per_class=t.test_samples_per_class,
        train_translate_px=t.train_translate_px,
        test_translate_px=t.test_translate_px,
        train_hue_range=t.train_hue_range,
        test_hue_range=t.test_hue_range,
        noise_sigma=t.noise_sigma,
    )


def make_data(config: ExperimentConfig, streams: SeedStreams) -> tuple[Dataset, Dataset]:
    return generate(task_spec(config), streams.get("task"))


def run_transform_invariant(config: ExperimentConfig, train_data: Dataset, test_data: Dataset,
                            streams: SeedStreams) -> TrainResult:
    """STN-style variant: augmenter and classifier share data and loss.

    First-order only (no unrolled graph); the learned transformation is also
    applied when evaluating, with deterministic evaluation noise.
    """
    t_begin = time.perf_counter()
    tape = Tape()
    init_rng = streams.get("init")
    classifier_spec = build_classifier_spec(config)
    omega = init_weights(classifier_spec, tape, init_rng)
    enabled = bool(config.augmenter and config.augmenter.transforms)
    aug_spec = None
    theta = None
    flags = frozenset()
    frozen_theta: set[str] = set()
    if enabled:
        aug_spec = build_augmenter_spec(config)
        theta = init_weights(aug_spec, tape, init_rng, output_scale=config.augmenter.init_output_scale)
        flags = aug_spec.transform_flags()
        last = len(aug_spec.layer_widths()) - 2
        if config.augmenter.freeze_output_layer:
            frozen_theta |= {f"w{last}", f"b{last}"}
        if not config.augmenter.train_output_bias:
            frozen_theta.add(f"b{last}")
    state = TrainState(tape, omega, theta, classifier_spec=classifier_spec, augmenter_spec=aug_spec,
                       transform_flags=flags)

    data_rng = streams.get("data")
    noise_rng = streams.get("noise")
    dropout_rng = streams.get("dropout")
    flip_rng = streams.get("flip")
    opt = config.optim

    def eval_augment(x: Tensor) -> Tensor:
        eval_rng = streams.fresh("eval_noise")
        noise = sample_noise(x.shape[0], aug_spec.noise_dim, eval_rng)
        mat, colors = augmenter_forward(aug_spec, noise, state.theta, train_mode=False)
        return apply_augment(x, mat, colors, flags)

    rows: list[MetricsRecord] = []
    test_acc_per_epoch: list[float] = []
    n = len(train_data)
    iteration = 0
    val_accuracy = 0.0
    for epoch in range(config.epochs):
        epoch_lr = opt.inner_lr_at(epoch, config.epochs)
        epoch_outer_lr = opt.outer_lr_at(epoch)
        perm = data_rng.permutation(n)
        for idx in [perm[i : i + config.batch_size] for i in range(0, n, config.batch_size)]:
            t0 = time.perf_counter()
            images = train_data.images[idx]
            labels = train_data.labels[idx]
            if config.flip is not None:
                images, _ = random_flip(images, config.flip, flip_rng)
            start = tape.checkpoint()
            x = tape.constant(images)
            stats = {"mean_abs_affine_delta": 0.0, "mean_abs_color": 0.0}
            if enabled:
                noise = sample_noise(len(idx), aug_spec.noise_dim, noise_rng, tape)
                mat, colors = augmenter_forward(aug_spec, noise, state.theta, train_mode=True, rng=dropout_rng)
                x_in = apply_augment(x, mat, colors, flags)
                if mat is not None:
                    stats["mean_abs_affine_delta"] = float(np.mean(mat.identity_deltas()))
                if colors is not None:
                    stats["mean_abs_color"] = float(np.mean(colors.abs_means()))
            else:
                x_in = x
            logits = classifier_forward(classifier_spec, x_in, state.omega)
            loss = ops.softmax_cross_entropy(logits, labels)
            omega_names = list(state.omega)
            targets = [state.omega[k] for k in omega_names]
            theta_names = [k for k in state.theta if k not in frozen_theta] if enabled else []
            targets += [state.theta[k] for k in theta_names]
            grads = ops.backward(loss, targets, retain_graph=False)
            omega_grads = [grads[state.omega[k]].value for k in omega_names]
            lr_eff = epoch_lr * clip_factor(omega_grads, opt.clip_norm)
            new_omega = {k: state.omega[k].value - lr_eff * grads[state.omega[k]].value for k in omega_names}
            new_theta = {k: t.value for k, t in state.theta.items()} if enabled else {}
            if enabled:
                theta_grads = {}
                for k in theta_names:
                    g = np.array(grads[state.theta[k]].value)
                    if opt.weight_decay:
                        g += opt.weight_decay * state.theta[k].value
                    theta_grads[k] = g
                factor = clip_factor(theta_grads.values(), opt.clip_norm)
                state.outer_steps += 1
                for k in theta_names:
                    g = theta_grads[k] * factor
                    value = state.theta[k].value
                    if opt.outer_optimizer == "sgd":
                        new_theta[k] = value - epoch_outer_lr * g
                    else:
                        m = state.opt_m.setdefault(k, np.zeros_like(value))
                        v = state.opt_v.setdefault(k, np.zeros_like(value))
                        m[:] = 0.9 * m + 0.1 * g
                        v[:] = 0.999 * v + 0.001 * g * g
                        ts = state.outer_steps
                        m_hat = m / (1.0 - 0.9**ts)
                        v_hat = v / (1.0 - 0.999**ts)
                        new_theta[k] = value - epoch_outer_lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            old_ids = [t.node_id for t in targets]
            tape.drop_range(start, tape.next_id)
            tape.drop(old_ids)
            state.omega = {k: tape.leaf(v, requires_grad=True) for k, v in new_omega.items()}
            if enabled:
                state.theta = {k: tape.leaf(v, requires_grad=True) for k, v in new_theta.items()}
            state.step += 1
            rows.append(
                MetricsRecord(
                    epoch=epoch,
                    iteration=iteration,
                    train_loss=float(loss.value),
                    val_loss=None,
                    test_accuracy=None,
                    mean_abs_affine_delta=stats["mean_abs_affine_delta"],
                    mean_abs_color=stats["mean_abs_color"],
                    wall_time_ms=(time.perf_counter() - t0) * 1e3,
                )
            )
            iteration += 1
        test_acc = evaluate_accuracy(
            classifier_spec, state.omega, test_data.images, test_data.labels,
            augment_fn=eval_augment if enabled else None,
        )
        rows[-1].test_accuracy = test_acc
        test_acc_per_epoch.append(test_acc)
        val_accuracy = test_acc

    return TrainResult(
        metrics=rows,
        omega_values={k: np.array(t.value) for k, t in state.omega.items()},
        theta_values={k: np.array(t.value) for k, t in state.theta.items()} if enabled else None,
        test_accuracy=test_acc_per_epoch[-1],
        val_accuracy=val_accuracy,
        test_accuracy_per_epoch=test_acc_per_epoch,
        inner_steps=state.step,
        wall_time_ms=(time.perf_counter() - t_begin) * 1e3,
        eval_used_augmenter=enabled,
    )


def run_validated_magnitude(config: ExperimentConfig, train_data: Dataset, test_data: Dataset):
    """Grid search over one translation magnitude; one full training per point.

    Selection is by final-epoch validation accuracy (first best on ties).
    Returns (result_of_best, selected_magnitude, per-magnitude report).
    """
    if not config.magnitude_grid:
        raise ConfigError("validated_magnitude needs a non-empty magnitude grid")
    report = []
    best = None
    for magnitude in config.magnitude_grid:
        cfg_m = replace(config, mode="predefined", predefined_translate_px=int(magnitude))
        result = train(cfg_m, train_data, test_data, SeedStreams(config.seed))
        report.append(
            {
                "magnitude": int(magnitude),
                "val_accuracy": result.val_accuracy,
                "val_loss": result.val_loss_final,
                "test_accuracy": result.test_accuracy,
            }
        )
        # best validation accuracy; accuracy ties broken by validation loss
        key = (result.val_accuracy, -result.val_loss_final)
        if best is None or key > best[0]:
            best = (key, int(magnitude), result)
    return best[2], best[1], report


def write_metrics_csv(path, rows: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(row.to_row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, "r", newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Execute the configured mode and write metrics.csv / summary.json / weights.blvt."""
    config.validate()
    out = Path(out_dir)
    streams = SeedStreams(config.seed)
    train_data, test_data = make_data(config, streams)

    selected_magnitude = None
    magnitude_report = None
    cost_multiplier = 1.0
    if config.mode in ("none", "predefined", "learned"):
        result = train(config, train_data, test_data, streams)
    elif config.mode == "transform_invariant":
        result = run_transform_invariant(config, train_data, test_data, streams)
    else:
        result, selected_magnitude, magnitude_report = run_validated_magnitude(config, train_data, test_data)
        cost_multiplier = float(len(config.magnitude_grid))

    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", result.metrics)
    weights = {f"omega/{k}": v for k, v in result.omega_values.items()}
    if result.theta_values:
        weights.update({f"theta/{k}": v for k, v in result.theta_values.items()})
    save_tensors(out / "weights.blvt", weights)

    summary = {
        "schema_version": 1,
        "mode": config.mode,
        "seed": config.seed,
        "task": task_spec(config).manifest(),
        "config": config.to_dict(),
        "test_accuracy": result.test_accuracy,
        "val_accuracy": result.val_accuracy,
        "test_accuracy_per_epoch": result.test_accuracy_per_epoch,
        "inner_steps": result.inner_steps,
        "cost_multiplier": cost_multiplier,
        "selected_magnitude": selected_magnitude,
        "magnitude_report": magnitude_report,
        "eval_used_augmenter": result.eval_used_augmenter,
        "wall_time_ms": result.wall_time_ms,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def summarize(run_dirs) -> tuple[str, list[dict]]:
    """Aggregate summary.json files: per-mode mean/stddev plus relative cost.

    All runs must be of the same task; mixing tasks is an error.
    """
    summaries = []
    for d in run_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"missing summary.json in {d}")
        with open(path, "r", encoding="utf-8") as fh:
            summaries.append(json.load(fh))
    if not summaries:
        raise ValueError("no run directories given")
    tasks = {json.dumps(s["task"], sort_keys=True) for s in summaries}
    if len(tasks) > 1:
        raise ValueError("cannot summarize runs of different tasks")

    by_mode: dict[str, list[dict]] = {}
    for s in summaries:
        by_mode.setdefault(s["mode"], []).append(s)

    base_wall = None
    if "none" in by_mode:
        base_wall = float(np.mean([s["wall_time_ms"] for s in by_mode["none"]]))

    rows = []
    for mode in sorted(by_mode):
        group = by_mode[mode]
        accs = np.array([s["test_accuracy"] for s in group])
        wall = float(np.mean([s["wall_time_ms"] for s in group]))
        rows.append(
            {
                "mode": mode,
                "runs": len(group),
                "test_accuracy_mean": float(np.mean(accs)),
                "test_accuracy_std": float(np.std(accs)),
                "search_cost_multiplier": float(np.mean([s["cost_multiplier"] for s in group])),
                "wall_time_ratio": wall / base_wall if base_wall else 1.0,
            }
        )

    lines = [
        f"{'mode':<22} {'runs':>4} {'accuracy':>18} {'search cost':>12} {'wall ratio':>11}"
    ]
    for r in rows:
        acc = f"{100 * r['test_accuracy_mean']:.2f} +/- {100 * r['test_accuracy_std']:.2f}"
        lines.append(
            f"{r['mode']:<22} {r['runs']:>4} {acc:>18} {r['search_cost_multiplier']:>12.1f} {r['wall_time_ratio']:>11.2f}"
        )
    return "\n".join(lines), rows
