"""Pixelwise cross-entropy training with momentum SGD, plus gradient checking."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, EvalResult, evaluate
from .errors import DataError, ShapeError
from .model import (Model, backward_model, check_config, forward, forward_cached, predict_batch,
                    update_running_stats)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    class_weights: tuple | None = None
    holdout_fraction: float = 0.1

    def __post_init__(self):
        # lr = 0 is accepted so a no-op run can be checked
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    pixel_accuracy: float
    iou: list


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    holdout: list = field(default_factory=list)
    seconds: float = field(default=0.0, compare=False)

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    def to_kv(self) -> list[str]:
        lines = []
        for e in self.epochs:
            ious = ",".join(f"{v:.6f}" for v in e.iou)
            lines.append(f"epoch={e.epoch} loss={e.loss:.6f} pixel_accuracy={e.pixel_accuracy:.6f} iou={ious}")
        lines.append(f"holdout={','.join(str(i) for i in self.holdout)}")
        lines.append(f"seconds={self.seconds:.2f}")
        return lines


def _labels_array(target, shape) -> np.ndarray:
    if isinstance(target, (list, tuple)):
        target = np.stack([np.asarray(t) for t in target])
    t = np.asarray(target)
    if t.ndim == 2:
        t = t[None]
    if t.shape != (shape[0], shape[2], shape[3]):
        raise ShapeError(f"target shape {t.shape} does not match probabilities {shape}")
    return t.astype(np.intp)


def cross_entropy_pixelwise(probs, target, class_weights=None):
    """Weighted mean of ``-log p(true class)`` over pixels.

    Returns ``(loss, grad_logits)`` where the gradient is taken with respect
    to the softmax input: ``(p - onehot) * weight / pixel_count``.
    """
    probs = np.asarray(probs)
    n, c, h, w = probs.shape
    t = _labels_array(target, probs.shape)
    if t.size and (t.min() < 0 or t.max() >= c):
        raise DataError(f"target label outside [0, {c})")
    weights = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,):
        raise DataError(f"{weights.size} class weights for {c} classes")
    count = n * h * w
    p_true = np.take_along_axis(probs, t[:, None], axis=1)[:, 0]
    pix_w = weights[t]
    tiny = np.finfo(probs.dtype).tiny
    loss = float(np.sum(pix_w * -np.log(np.maximum(p_true.astype(np.float64), tiny))) / count)
    grad = probs.copy()
    np.put_along_axis(grad, t[:, None], p_true[:, None] - 1, axis=1)
    grad *= (pix_w / count).astype(probs.dtype)[:, None]
    return loss, grad


def sgd_step(params, grads, velocity, hyper: Hyperparams):
    """Momentum SGD on aligned lists of arrays.

    ``v <- momentum * v - lr * g``; ``p <- p + v``. Returns new lists.
    """
    if not len(params) == len(grads) == len(velocity):
        raise ShapeError("params, grads and velocity must have the same length")
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v2 = (hyper.momentum * v - hyper.learning_rate * g).astype(p.dtype)
        new_p.append(p + v2)
        new_v.append(v2)
    return new_p, new_v


def split_holdout(n: int, hyper: Hyperparams):
    """Seeded shuffle into ``(train_indices, holdout_indices)``."""
    order = np.random.default_rng(hyper.seed).permutation(n)
    k = int(round(n * hyper.holdout_fraction)) if n > 1 else 0
    k = min(k, n - 1)
    return sorted(order[k:].tolist()), sorted(order[:k].tolist())


def predict_dataset(model: Model, ds: Dataset, batch: int = 1) -> list:
    # one image per forward keeps results independent of batch composition
    preds = []
    for i in range(0, len(ds), batch):
        probs = forward(model, np.concatenate(ds.images[i:i + batch]), "infer")
        preds += predict_batch(probs)
    return preds


def evaluate_model(model: Model, ds: Dataset) -> EvalResult:
    return evaluate(predict_dataset(model, ds), ds.masks, ds.class_count)


def train(model: Model, dataset: Dataset, hyper: Hyperparams, callback=None):
    """Shuffled mini-batch SGD; returns ``(trained_model, report)``.

    Holdout metrics are computed after every epoch in inference mode. The
    result is a pure function of ``(model, dataset, hyper)``.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    check_config(model.config)
    if dataset.class_count != model.config.class_count:
        raise DataError(f"dataset has {dataset.class_count} classes, model {model.config.class_count}")
    start = time.perf_counter()
    train_idx, hold_idx = split_holdout(len(dataset), hyper)
    holdout = dataset.subset(hold_idx if hold_idx else train_idx)
    rng = np.random.default_rng([hyper.seed, 1])
    keys = [(i, name) for i, name, _ in model.trainable()]
    velocity = [np.zeros_like(model.params[i][name]) for i, name in keys]
    report = TrainReport(holdout=hold_idx)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(train_idx)
        total, seen = 0.0, 0
        for b in range(0, len(order), hyper.batch_size):
            idx = order[b:b + hyper.batch_size]
            x = np.concatenate([dataset.images[i] for i in idx])
            y = np.stack([dataset.masks[i] for i in idx])
            probs, trace = forward_cached(model, x, "train")
            loss, g = cross_entropy_pixelwise(probs, y, hyper.class_weights)
            grads = backward_model(model, trace, g)
            model = update_running_stats(model, trace)
            new_p, velocity = sgd_step([model.params[i][n] for i, n in keys],
                                       [grads[i][n] for i, n in keys], velocity, hyper)
            params = [None if p is None else dict(p) for p in model.params]
            for (i, name), arr in zip(keys, new_p):
                params[i][name] = arr
            model = Model(model.config, params)
            total += loss * len(idx)
            seen += len(idx)
        res = evaluate_model(model, holdout)
        stats = EpochStats(epoch, total / seen, res.pixel_accuracy, res.iou)
        report.epochs.append(stats)
        log.info("epoch %d loss %.4f acc %.4f iou %s", epoch, stats.loss, stats.pixel_accuracy,
                 " ".join(f"{v:.3f}" for v in stats.iou))
        if callback is not None:
            callback(stats)
    report.seconds = time.perf_counter() - start
    return model, report


# -- gradient checking ---------------------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(loss_fn, arr: np.ndarray, epsilon: float) -> np.ndarray:
    """Central differences ``(f(x+e) - f(x-e)) / 2e`` for every element of ``arr`` (restored after)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + epsilon
        fp = loss_fn()
        flat[j] = orig - epsilon
        fm = loss_fn()
        flat[j] = orig
        out[j] = (fp - fm) / (2 * epsilon)
    return grad


def model_gradients(model: Model, image, target, class_weights=None):
    probs, trace = forward_cached(model, image, "train")
    loss, g = cross_entropy_pixelwise(probs, target, class_weights)
    return loss, backward_model(model, trace, g)


def grad_check(model: Model, image, target, epsilon: float = 1e-3, class_weights=None,
               grad_fn=model_gradients, reduction: str = "global") -> float:
    """Relative error between analytic and central-difference parameter gradients.

    Everything runs in float64 with batchnorm in training mode so the
    batch-statistics chain is exercised. With ``reduction="global"`` the
    error is ``|a - n| / max(|a|, |n|)`` over the whole gradient vector;
    ``"tensor"`` takes the worst such ratio per parameter array and
    ``"element"`` the worst single entry. ``grad_fn`` can be swapped to
    test the harness itself.

    Central differences are only meaningful where no ReLU or max-pool
    decision flips inside the perturbation; see :func:`kink_crossings`.
    """
    if reduction not in ("global", "tensor", "element"):
        raise ValueError(f"unknown reduction {reduction!r}")
    m64 = model.astype(np.float64)
    x = np.asarray(image, dtype=np.float64)
    _, grads = grad_fn(m64, x, target, class_weights)

    def loss_fn():
        probs = forward(m64, x, "train")
        return cross_entropy_pixelwise(probs, target, class_weights)[0]

    analytic, numeric = [], []
    for i, name, arr in m64.trainable():
        numeric.append(numeric_gradient(loss_fn, arr, epsilon).ravel())
        analytic.append(np.asarray(grads[i][name], dtype=np.float64).ravel())
    if reduction == "element":
        return float(max(relative_error(a, n).max() for a, n in zip(analytic, numeric)))
    if reduction == "tensor":
        return float(max(_norm_error(a, n) for a, n in zip(analytic, numeric)))
    return _norm_error(np.concatenate(analytic), np.concatenate(numeric))


def _norm_error(a, n, floor: float = 1e-12) -> float:
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def _decisions(model: Model, x) -> bytes:
    _, trace = forward_cached(model, x, "train")
    parts = []
    for spec, cache in zip(model.config.layers, trace.caches):
        if spec.kind == "sepconv_relu":
            parts.append(cache[1].state["mask"].tobytes())
        elif spec.kind == "maxpool":
            parts.append(cache.state["idx"].tobytes())
    return b"".join(parts)


def kink_crossings(model: Model, image, epsilon: float = 1e-3) -> int:
    """Count single-parameter +-epsilon perturbations that flip a ReLU or max-pool decision."""
    m64 = model.astype(np.float64)
    x = np.asarray(image, dtype=np.float64)
    base = _decisions(m64, x)
    count = 0
    for _, _, arr in m64.trainable():
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            for step in (epsilon, -epsilon):
                flat[j] = orig + step
                count += _decisions(m64, x) != base
            flat[j] = orig
    return count
