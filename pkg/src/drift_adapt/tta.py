"""Backpropagation-free test-time adaptation.

Two running estimates are advanced once per incoming batch:

* distribution matching: per-BN-layer running mean/variance with a
  geometrically decaying momentum ``alpha``;
* instance matching: per-class feature prototypes built from confident
  pixels, with their own decaying momentum ``beta``.  Distances to the
  prototypes give a second class map that is blended with the network's
  own softmax output.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import NormMode, SegModel, forward


@dataclass(frozen=True)
class DmConfig:
    alpha0: float = 0.9
    gamma_dm: float = 0.95

    def __post_init__(self):
        if not 0 <= self.alpha0 <= 1:
            raise ValueError(f"alpha0 must be in [0, 1], got {self.alpha0}")
        # gamma == 1 keeps the momentum fixed (constant-momentum baseline)
        if not 0 < self.gamma_dm <= 1:
            raise ValueError(f"gamma_dm must be in (0, 1], got {self.gamma_dm}")


@dataclass(frozen=True)
class ImConfig:
    beta0: float = 0.9
    gamma_im: float = 0.95
    p0: float = 0.5
    gamma_blend: float = 0.2
    tau: float = 1.0

    def __post_init__(self):
        if not 0 <= self.beta0 <= 1:
            raise ValueError(f"beta0 must be in [0, 1], got {self.beta0}")
        if not 0 < self.gamma_im <= 1:
            raise ValueError(f"gamma_im must be in (0, 1], got {self.gamma_im}")
        if not 0 <= self.p0 <= 1:
            raise ValueError(f"p0 must be in [0, 1], got {self.p0}")
        if not 0 <= self.gamma_blend <= 1:
            raise ValueError(f"gamma_blend must be in [0, 1], got {self.gamma_blend}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def decay_momentum(m: float, gamma: float) -> float:
    if not 0 < gamma < 1:
        raise ValueError(f"decay factor must be in (0, 1), got {gamma}")
    return m * gamma


def _advance(m: float, gamma: float) -> float:
    return m if gamma == 1 else decay_momentum(m, gamma)


# ---------------------------------------------------------------------------
# distribution matching


@dataclass
class BnAdaptState:
    means: list  # per BN layer, float64 (C,)
    variances: list
    alpha: float
    alpha0: float
    gamma_dm: float
    step: int = 0

    @classmethod
    def from_model(cls, model: SegModel, config: DmConfig = DmConfig()) -> "BnAdaptState":
        means = [np.asarray(l.stored_mean, dtype=np.float64).copy() for l in model.bn_layers]
        variances = [np.asarray(l.stored_var, dtype=np.float64).copy() for l in model.bn_layers]
        return cls(means, variances, config.alpha0, config.alpha0, config.gamma_dm)

    def copy(self) -> "BnAdaptState":
        return BnAdaptState([m.copy() for m in self.means], [v.copy() for v in self.variances],
                            self.alpha, self.alpha0, self.gamma_dm, self.step)

    def fold_layer(self, layer: int, batch_mean, batch_var) -> tuple[np.ndarray, np.ndarray]:
        """Blend one layer's batch statistics in with the current momentum (in place)."""
        batch_mean = np.asarray(batch_mean, dtype=np.float64)
        batch_var = np.asarray(batch_var, dtype=np.float64)
        if batch_mean.shape != self.means[layer].shape or batch_var.shape != self.variances[layer].shape:
            raise ValueError(f"layer {layer}: batch stats shape {batch_mean.shape} does not match "
                             f"running stats {self.means[layer].shape}")
        if np.any(batch_var < 0):
            raise ValueError(f"layer {layer}: negative batch variance")
        a = self.alpha
        self.means[layer] = (1.0 - a) * self.means[layer] + a * batch_mean
        self.variances[layer] = (1.0 - a) * self.variances[layer] + a * batch_var
        return self.means[layer], self.variances[layer]

    def advance(self) -> None:
        self.step += 1
        self.alpha = _advance(self.alpha, self.gamma_dm)


def dm_update(state: BnAdaptState, batch_stats) -> BnAdaptState:
    """Fold per-layer ``(mean, var)`` batch statistics into a new state."""
    if len(batch_stats) != len(state.means):
        raise ValueError(f"batch stats cover {len(batch_stats)} layers, state has {len(state.means)}")
    new = state.copy()
    for l, (m, v) in enumerate(batch_stats):
        new.fold_layer(l, m, v)
    new.advance()
    return new


# ---------------------------------------------------------------------------
# instance matching


def batch_class_centers(features, probs, p0: float, num_classes: int | None = None) -> dict:
    """Mean feature of confidently predicted pixels, per class.

    Returns ``{class: (center, count)}`` for classes with at least one pixel
    whose argmax is the class and whose max probability is >= ``p0``.
    """
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(probs)
    if f.shape[0] != p.shape[0] or f.shape[2:] != p.shape[2:]:
        raise T.ShapeError(f"features {f.shape} and probabilities {p.shape} are not aligned")
    k = p.shape[1] if num_classes is None else num_classes
    c = f.shape[1]
    labels = p.argmax(axis=1).ravel()
    keep = p.max(axis=1).ravel() >= p0
    flat = f.transpose(0, 2, 3, 1).reshape(-1, c)
    labels, flat = labels[keep], flat[keep]
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, c))
    np.add.at(sums, labels, flat)
    return {i: (sums[i] / counts[i], int(counts[i])) for i in range(k) if counts[i] > 0}


@dataclass
class PrototypeBank:
    centers: np.ndarray  # (K, C) float64, rows meaningful where present
    present: np.ndarray  # (K,) bool
    beta: float
    beta0: float
    gamma_im: float
    step: int = 0

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int, config: ImConfig = ImConfig()) -> "PrototypeBank":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes, dtype=bool),
                   config.beta0, config.beta0, config.gamma_im)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.centers.copy(), self.present.copy(), self.beta, self.beta0,
                             self.gamma_im, self.step)

    @property
    def num_present(self) -> int:
        return int(self.present.sum())


def im_update(bank: PrototypeBank, centers: dict) -> PrototypeBank:
    new = bank.copy()
    b = new.beta
    for i, (center, _count) in centers.items():
        center = np.asarray(center, dtype=np.float64)
        if center.shape != (new.centers.shape[1],):
            raise ValueError(f"class {i}: center has shape {center.shape}, bank expects "
                             f"({new.centers.shape[1]},)")
        if new.present[i]:
            new.centers[i] = (1.0 - b) * new.centers[i] + b * center
        else:
            new.centers[i] = center
            new.present[i] = True
    new.step += 1
    new.beta = _advance(new.beta, new.gamma_im)
    return new


def prototype_distances(features, bank: PrototypeBank) -> np.ndarray:
    """Squared Euclidean distance to every center divided by C, shape (n, K, h, w)."""
    f = np.asarray(features, dtype=np.float64)
    c = f.shape[1]
    if c != bank.centers.shape[1]:
        raise T.ShapeError(f"features have {c} channels, prototypes have {bank.centers.shape[1]}")
    diff = f[:, None] - bank.centers[None, :, :, None, None]
    return (diff ** 2).sum(axis=2) / c


def im_predict(features, bank: PrototypeBank, tau: float = 1.0) -> np.ndarray:
    """Softmax of negative scaled distances over the present classes."""
    if bank.num_present == 0:
        raise ValueError("prototype bank is empty; fall back to the network prediction")
    d = prototype_distances(features, bank)
    d = np.where(bank.present[None, :, None, None], d, np.inf)
    z = -(d - d.min(axis=1, keepdims=True)) / tau
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(T.DTYPE)


def blend_predictions(probs, proto_probs, gamma_blend: float) -> np.ndarray:
    probs = np.asarray(probs)
    proto_probs = np.asarray(proto_probs)
    if probs.shape != proto_probs.shape:
        raise T.ShapeError(f"cannot blend {probs.shape} with {proto_probs.shape}")
    if not 0 <= gamma_blend <= 1:
        raise ValueError("gamma_blend must be in [0, 1]")
    if gamma_blend == 0:
        return probs.copy()
    if gamma_blend == 1:
        return proto_probs.copy()
    return ((1.0 - gamma_blend) * probs + gamma_blend * proto_probs).astype(T.DTYPE)


# ---------------------------------------------------------------------------
# one adaptation step


@dataclass
class StepOutput:
    masks: np.ndarray  # (n, h, w) labels
    dm_state: BnAdaptState
    bank: PrototypeBank
    probs: np.ndarray  # L at input resolution
    proto_probs: np.ndarray | None  # P upsampled, None when the bank is empty
    blended: np.ndarray  # M
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.masks, self.dm_state, self.bank))


def adapt_step(model: SegModel, dm_state: BnAdaptState, bank: PrototypeBank, images,
               im_config: ImConfig = ImConfig(), use_dm: bool = True, use_im: bool = True) -> StepOutput:
    """Predict one batch and advance both running estimates.

    With ``use_dm`` each BN layer folds its input statistics into the running
    estimate and normalizes with the updated value before the next layer
    runs.  Without it the stored source statistics are used and ``dm_state``
    is returned unchanged.  ``use_im=False`` skips the prototype branch.
    """
    images = getattr(images, "images", images)
    if use_dm:
        dm = dm_state.copy()
        out = forward(model, images, NormMode.OVERRIDE, override=dm.fold_layer)
        dm.advance()
    else:
        dm = dm_state
        out = forward(model, images, NormMode.STORED)

    h, w = out.probs.shape[2:]
    proto = None
    new_bank = bank
    blended = out.probs
    if use_im:
        centers = batch_class_centers(out.features, out.probs_low, im_config.p0, model.num_classes)
        new_bank = im_update(bank, centers)
        if new_bank.num_present:
            p_low = im_predict(out.features, new_bank, im_config.tau)
            proto = T.bilinear_upsample(p_low, h, w)
            blended = blend_predictions(out.probs, proto, im_config.gamma_blend)
    masks = blended.argmax(axis=1)
    return StepOutput(masks, dm, new_bank, out.probs, proto, blended)


# ---------------------------------------------------------------------------
# state snapshots

SNAPSHOT_MAGIC = b"DTAS"
SNAPSHOT_VERSION = 1


def save_snapshot(dm_state: BnAdaptState, bank: PrototypeBank, path) -> None:
    """Binary layout (little-endian):

    magic "DTAS", u8 version,
    f64 alpha, f64 alpha0, f64 gamma_dm, u64 dm step, u32 layer count,
      per layer: u32 C, C f64 means, C f64 variances;
    f64 beta, f64 beta0, f64 gamma_im, u64 bank step, u32 K, u32 feature dim,
      K u8 presence flags, K*dim f64 centers.
    """
    parts = [SNAPSHOT_MAGIC, struct.pack("<B", SNAPSHOT_VERSION),
             struct.pack("<dddQI", dm_state.alpha, dm_state.alpha0, dm_state.gamma_dm, dm_state.step,
                         len(dm_state.means))]
    for m, v in zip(dm_state.means, dm_state.variances):
        parts += [struct.pack("<I", len(m)), m.astype("<f8").tobytes(), v.astype("<f8").tobytes()]
    k, c = bank.centers.shape
    parts += [struct.pack("<dddQII", bank.beta, bank.beta0, bank.gamma_im, bank.step, k, c),
              bank.present.astype(np.uint8).tobytes(), bank.centers.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_snapshot(path) -> tuple[BnAdaptState, PrototypeBank]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ValueError(f"{path}: truncated at offset {pos}, need {pos + size} bytes, have {len(raw)}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def floats(count):
        nonlocal pos
        if pos + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated at offset {pos}, need {pos + 8 * count} bytes, have {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    if raw[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    (version,) = take("<B")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    alpha, alpha0, gamma_dm, dm_step, layers = take("<dddQI")
    means, variances = [], []
    for _ in range(layers):
        (c,) = take("<I")
        means.append(floats(c))
        variances.append(floats(c))
    beta, beta0, gamma_im, bank_step, k, c = take("<dddQII")
    if pos + k > len(raw):
        raise ValueError(f"{path}: truncated at offset {pos}")
    present = np.frombuffer(raw, dtype=np.uint8, count=k, offset=pos).astype(bool)
    pos += k
    centers = floats(k * c).reshape(k, c)
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return (BnAdaptState(means, variances, alpha, alpha0, gamma_dm, dm_step),
            PrototypeBank(centers, present, beta, beta0, gamma_im, bank_step))
