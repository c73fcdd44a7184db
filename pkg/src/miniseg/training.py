"""Training loop: pixelwise cross-entropy, SGD with momentum and inverse-time decay."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, ShapeError
from .evaluation import sweep_threshold
from .network import Model, backward, forward, forward_with_cache, parameters, save_model, validate_config


@dataclass
class Hyperparams:
    lr0: float = 0.1
    decay: float = 0.004
    momentum: float = 0.9
    batch_size: int = 10
    epochs: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ShapeError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ShapeError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ShapeError("batch_size and epochs must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_iou: float | None
    theta: float | None
    seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_iou": self.val_iou,
            "theta": self.theta,
            "seconds": self.seconds,
        }


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.epochs:
                fh.write(json.dumps(entry.to_dict()) + "\n")


def cross_entropy_loss(probs: np.ndarray, target: np.ndarray):
    """Mean pixelwise categorical cross-entropy.

    Returns (loss, dlogits) where dlogits is the gradient with respect to the
    pre-softmax logits (fused with the softmax for stability):
    (probs - one_hot(target)) / pixel_count.
    """
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ShapeError(f"probs {probs.shape} and target {target.shape} disagree")
    classes = probs.shape[1]
    if target.min() < 0 or target.max() >= classes:
        raise ShapeError(f"target values must be < {classes}")
    pixel_count = target.size
    target = target.astype(np.intp)
    p_true = np.take_along_axis(probs, target[:, None], axis=1)[:, 0]
    loss = float(-np.log(np.maximum(p_true, 1e-12)).mean())
    dlogits = probs.copy()
    np.put_along_axis(
        dlogits,
        target[:, None],
        np.take_along_axis(dlogits, target[:, None], axis=1) - 1.0,
        axis=1,
    )
    dlogits /= pixel_count
    return loss, dlogits


def lr_at(step: int, h: Hyperparams) -> float:
    """Inverse-time decayed learning rate, counted per parameter update."""
    return h.lr0 / (1.0 + h.decay * step)


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float) -> None:
    """v <- momentum*v - lr*g; p <- p + v, in place for every learnable array."""
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * g
        p += v


def _stack(samples):
    images = np.concatenate([s.image for s in samples], axis=0)
    targets = np.stack([s.target for s in samples], axis=0)
    return images, targets


def _validate_epoch(model, images, targets, chunk=16):
    losses = []
    probs_all = []
    for start in range(0, images.shape[0], chunk):
        probs = forward(model, images[start : start + chunk])
        loss, _ = cross_entropy_loss(probs, targets[start : start + chunk])
        losses.append(loss * probs.shape[0])
        probs_all.append(probs)
    probs_all = np.concatenate(probs_all, axis=0)
    sweep = sweep_threshold(probs_all, targets, class_id=1)
    return float(np.sum(losses) / images.shape[0]), sweep.theta, sweep.iou


def train(model: Model, split, h: Hyperparams, run_dir=None):
    """Train in place for h.epochs epochs; returns (model, history).

    All images must share one resolution that is valid for the model's config.
    When run_dir is given, a checkpoint and a history line are written per epoch.
    """
    if not split.train:
        raise ShapeError("training set is empty")
    shapes = {s.image.shape for s in split.train + split.validation}
    if len(shapes) != 1:
        raise ShapeError(f"mixed image resolutions in dataset: {sorted(shapes)}")
    images, targets = _stack(split.train)
    validate_config(model.config, (images.shape[2], images.shape[3]))
    val_images, val_targets = (None, None)
    if split.validation:
        val_images, val_targets = _stack(split.validation)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(h.seed)
    params = parameters(model)
    velocity: dict[str, np.ndarray] = {}
    history = TrainHistory()
    step = 0
    n = images.shape[0]
    for epoch in range(1, h.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        batch_losses = []
        for lo in range(0, n, h.batch_size):
            batch = order[lo : lo + h.batch_size]
            probs, caches = forward_with_cache(model, images[batch], train=True)
            loss, dlogits = cross_entropy_loss(probs, targets[batch])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(model, caches, dlogits)
            sgd_momentum_step(params, grads, velocity, lr_at(step, h), h.momentum)
            step += 1
            batch_losses.append(loss)
        val_loss = val_theta = val_iou = None
        if val_images is not None:
            val_loss, val_theta, val_iou = _validate_epoch(model, val_images, val_targets)
        history.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=val_loss,
                val_iou=val_iou,
                theta=val_theta,
                seconds=time.perf_counter() - started,
            )
        )
        if run_dir is not None:
            save_model(model, run_dir / f"epoch_{epoch:03d}.smk")
            history.write_jsonl(run_dir / "history.jsonl")
    return model, history
