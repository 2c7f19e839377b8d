"""Source-domain training: float64 forward/backward and SGD with momentum.

BN layers run on batch statistics while training and keep an EMA of them
(biased variance) as the stored statistics used later at inference.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import BatchNorm2d, Conv2d, NormMode, ReLU, SegModel, Upsample, forward
from .rng import make_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.05
    sgd_momentum: float = 0.9
    seed: int = 0
    bn_train_momentum: float = 0.1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.bn_train_momentum <= 1.0:
            raise ValueError("bn_train_momentum must lie in [0, 1]")


@dataclass
class TrainingLog:
    init_loss: float = float("nan")
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# float64 graph


def _params64(model: SegModel) -> list[np.ndarray]:
    return [np.asarray(p, dtype=np.float64).copy() for p in model.parameters()]


def forward_train(model: SegModel, params: list, x: np.ndarray):
    """Forward pass with batch-statistics BN; returns logits and a tape.

    ``params`` is the float64 list matching ``model.parameters()``.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = []
    batch_stats = []
    k = 0
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            w, b = params[k], params[k + 1]
            k += 2
            shape = x.shape
            y, cols = T.conv2d_f64(x, w, b, layer.stride, layer.pad, layer.dilation, return_cols=True)
            tape.append(("conv", layer, (shape, cols, w)))
            x = y
        elif isinstance(layer, BatchNorm2d):
            g, beta = params[k], params[k + 1]
            k += 2
            mean, var = T.channel_stats(x)
            batch_stats.append((mean, var))
            inv = 1.0 / np.sqrt(var + layer.eps)
            xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
            tape.append(("bn", layer, (xhat, inv, g)))
            x = xhat * g[None, :, None, None] + beta[None, :, None, None]
        elif isinstance(layer, ReLU):
            mask = x > 0
            tape.append(("relu", layer, mask))
            x = x * mask
        elif isinstance(layer, Upsample):
            ah = T.bilinear_matrix(x.shape[2], x.shape[2] * layer.factor)
            aw = T.bilinear_matrix(x.shape[3], x.shape[3] * layer.factor)
            tape.append(("up", layer, (ah, aw)))
            x = np.einsum("oh,nchw,pw->ncop", ah, x, aw, optimize=True)
    return x, tape, batch_stats


def backward_train(tape, dout: np.ndarray) -> list[np.ndarray]:
    """Reverse sweep over the tape; gradients in ``model.parameters()`` order."""
    grads: list = []
    g = dout
    for pos in range(len(tape) - 1, -1, -1):
        kind, layer, cache = tape[pos]
        if kind == "conv":
            shape, cols, w = cache
            n, out_c, oh, ow = g.shape
            g2 = g.reshape(n, out_c, oh * ow)
            dw = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(w.shape)
            db = g2.sum(axis=(0, 2))
            grads += [db, dw]
            if pos > 0:
                dcols = np.matmul(w.reshape(out_c, -1).T, g2)
                p = layer.pad
                padded = (shape[0], shape[1], shape[2] + 2 * p, shape[3] + 2 * p)
                kh, kw = w.shape[2:]
                dxp = T.col2im(dcols, padded, kh, kw, layer.stride, layer.dilation, oh, ow)
                g = dxp[:, :, p:p + shape[2], p:p + shape[3]] if p else dxp
        elif kind == "bn":
            xhat, inv, gamma = cache
            m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            grads += [dbeta, dgamma]
            dxhat = g * gamma[None, :, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            g = inv[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
        elif kind == "relu":
            g = g * cache
        elif kind == "up":
            ah, aw = cache
            g = np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True)
    grads.reverse()
    return grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits."""
    p = T.softmax_f64(logits, axis=1)
    n, k, h, w = logits.shape
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    count = n * h * w
    picked = np.take_along_axis(p, labels[:, None].astype(np.int64), axis=1)
    loss = -np.log(np.maximum(picked, 1e-300)).sum() / count
    return float(loss), (p - onehot) / count


def quadratic_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """0.5 * mean over pixels of the squared distance to the one-hot target."""
    n, k, h, w = logits.shape
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    diff = logits - onehot
    count = n * h * w
    return float(0.5 * (diff ** 2).sum() / count), diff / count


LOSSES = {"cross_entropy": cross_entropy, "quadratic": quadratic_loss}


# ---------------------------------------------------------------------------
# training loop


def _stack(scenes, idx):
    images = np.concatenate([scenes[i].image for i in idx], axis=0)
    masks = np.stack([scenes[i].mask for i in idx], axis=0)
    return images, masks


def pixel_accuracy(model: SegModel, scenes, batch_size: int = 8) -> float:
    correct = total = 0
    for start in range(0, len(scenes), batch_size):
        images, masks = _stack(scenes, range(start, min(start + batch_size, len(scenes))))
        pred = forward(model, images, NormMode.STORED).probs.argmax(axis=1)
        correct += int((pred == masks).sum())
        total += masks.size
    return correct / total


def _write_back(model: SegModel, params: list, ema: list) -> None:
    k = 0
    bn = 0
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            layer.weight = params[k].astype(T.DTYPE)
            layer.bias = params[k + 1].astype(T.DTYPE)
            k += 2
        elif isinstance(layer, BatchNorm2d):
            layer.scale = params[k].astype(T.DTYPE)
            layer.shift = params[k + 1].astype(T.DTYPE)
            layer.stored_mean = ema[bn][0].astype(T.DTYPE)
            layer.stored_var = ema[bn][1].astype(T.DTYPE)
            k += 2
            bn += 1


def train_source(scenes, model_init: SegModel, config: TrainConfig | None = None,
                 eval_sets: dict | None = None, loss: str = "cross_entropy"):
    """Train ``model_init`` (a copy) on labelled scenes.

    ``eval_sets`` maps a name to a scene list; the clean mIoU on each (stored
    statistics, batches of ``config.batch_size`` in the given order) lands in
    ``log.metrics[f"{name}_miou"]``.
    """
    from .metrics import ConfusionMatrix  # local import to keep module layering flat

    config = config or TrainConfig()
    if not scenes:
        raise ValueError("training set is empty")
    model = model_init.copy()
    k_classes = model.num_classes
    for i, s in enumerate(scenes):
        if s.mask.min() < 0 or s.mask.max() >= k_classes:
            raise ValueError(f"scene {i} has labels outside [0, {k_classes})")
    loss_fn = LOSSES[loss]
    params = _params64(model)
    velocity = [np.zeros_like(p) for p in params]
    ema = [(np.asarray(l.stored_mean, np.float64).copy(), np.asarray(l.stored_var, np.float64).copy())
           for l in model.bn_layers]
    bs = config.batch_size
    n = len(scenes)
    train_log = TrainingLog(config=asdict(config))

    batches = [list(range(s, min(s + bs, n))) for s in range(0, n, bs)]
    init = [loss_fn(forward_train(model, params, _stack(scenes, b)[0])[0], _stack(scenes, b)[1])[0]
            for b in batches]
    train_log.init_loss = float(np.mean(init))

    mom = config.bn_train_momentum
    for epoch in range(config.epochs):
        order = make_rng(("shuffle", config.seed, epoch)).permutation(n)
        losses, correct, total = [], 0, 0
        for b, start in enumerate(range(0, n, bs)):
            images, masks = _stack(scenes, order[start:start + bs])
            logits, tape, stats = forward_train(model, params, images)
            value, dlogits = loss_fn(logits, masks)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            grads = backward_train(tape, dlogits)
            for p, v, g in zip(params, velocity, grads):
                v *= config.sgd_momentum
                v += g
                p -= config.learning_rate * v
            for (rm, rv), (bm, bv) in zip(ema, stats):
                rm *= 1.0 - mom
                rm += mom * bm
                rv *= 1.0 - mom
                rv += mom * bv
            losses.append(value)
            correct += int((logits.argmax(axis=1) == masks).sum())
            total += masks.size
        train_log.epoch_loss.append(float(np.mean(losses)))
        train_log.epoch_accuracy.append(correct / total)
        log.info("epoch %d loss %.4f acc %.4f", epoch, train_log.epoch_loss[-1], train_log.epoch_accuracy[-1])

    if config.epochs:
        _write_back(model, params, ema)
    train_log.metrics["train_pixel_accuracy"] = pixel_accuracy(model, scenes, bs)
    for name, subset in (eval_sets or {}).items():
        cm = ConfusionMatrix(k_classes)
        for start in range(0, len(subset), bs):
            images, masks = _stack(subset, range(start, min(start + bs, len(subset))))
            cm.accumulate(masks, forward(model, images, NormMode.STORED).probs.argmax(axis=1))
        train_log.metrics[f"{name}_miou"] = cm.iou()[1]
    return model, train_log


# ---------------------------------------------------------------------------
# gradient check


def grad_check(model: SegModel, x, labels, loss: str = "cross_entropy", samples: int = 200,
               step: float = 1e-5, seed: int = 0, floor: float = 1e-2) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; with the default
    floor and a 1e-2 tolerance this accepts absolute errors up to 1e-4.
    """
    loss_fn = LOSSES[loss]
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    params = _params64(model)
    logits, tape, _ = forward_train(model, params, x)
    _, dlogits = loss_fn(logits, labels)
    grads = backward_train(tape, dlogits)

    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = make_rng(("gradcheck", seed))
    flat = np.arange(total) if total <= samples else np.sort(rng.choice(total, samples, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for f in flat:
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        idx = np.unravel_index(int(f - offsets[which]), params[which].shape)
        p = params[which]
        orig = p[idx]
        p[idx] = orig + step
        up = loss_fn(forward_train(model, params, x)[0], labels)[0]
        p[idx] = orig - step
        down = loss_fn(forward_train(model, params, x)[0], labels)[0]
        p[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = grads[which][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
