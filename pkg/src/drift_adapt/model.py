"""Small encoder-decoder segmentation network with pluggable BN statistics."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .rng import box_muller, make_rng

DEFAULT_EPS = 1e-5


@dataclass
class Conv2d:
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    dilation: int = 1
    classifier: bool = False

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


@dataclass
class BatchNorm2d:
    scale: np.ndarray
    shift: np.ndarray
    stored_mean: np.ndarray
    stored_var: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        c = len(self.stored_mean)
        for name in ("scale", "shift", "stored_var"):
            if len(getattr(self, name)) != c:
                raise ValueError(f"BatchNorm2d.{name} has length {len(getattr(self, name))}, expected {c}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(np.asarray(self.stored_var) < 0):
            raise ValueError("stored_var must be non-negative")

    @property
    def channels(self) -> int:
        return len(self.stored_mean)


@dataclass
class ReLU:
    pass


@dataclass
class Upsample:
    factor: int = 4


Layer = Union[Conv2d, BatchNorm2d, ReLU, Upsample]


class NormMode(enum.Enum):
    STORED = "stored"
    BATCH = "batch"
    OVERRIDE = "override"


@dataclass
class SegModel:
    layers: list
    num_classes: int

    def __post_init__(self):
        parametric = [i for i, l in enumerate(self.layers) if isinstance(l, (Conv2d, BatchNorm2d))]
        heads = [i for i, l in enumerate(self.layers) if isinstance(l, Conv2d) and l.classifier]
        if len(heads) != 1:
            raise ValueError(f"model needs exactly one classifier layer, found {len(heads)}")
        head = self.layers[heads[0]]
        if heads[0] != parametric[-1]:
            raise ValueError("classifier must be the last parametric layer")
        if head.weight.shape[2:] != (1, 1):
            raise ValueError(f"classifier must be a 1x1 conv, got kernel {head.weight.shape[2:]}")
        if head.out_channels != self.num_classes:
            raise ValueError(f"classifier emits {head.out_channels} channels but num_classes={self.num_classes}")

    @property
    def classifier_index(self) -> int:
        return next(i for i, l in enumerate(self.layers) if isinstance(l, Conv2d) and l.classifier)

    @property
    def feature_dim(self) -> int:
        return self.layers[self.classifier_index].in_channels

    @property
    def bn_layers(self) -> list[BatchNorm2d]:
        return [l for l in self.layers if isinstance(l, BatchNorm2d)]

    @property
    def total_stride(self) -> int:
        s = 1
        for l in self.layers[:self.classifier_index]:
            if isinstance(l, Conv2d):
                s *= l.stride
        return s

    def stored_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(l.stored_mean.copy(), l.stored_var.copy()) for l in self.bn_layers]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (conv weight/bias, BN scale/shift)."""
        out = []
        for l in self.layers:
            if isinstance(l, Conv2d):
                out += [l.weight, l.bias]
            elif isinstance(l, BatchNorm2d):
                out += [l.scale, l.shift]
        return out

    def copy(self) -> "SegModel":
        import copy
        return copy.deepcopy(self)


def _kaiming(rng, shape, gain: float = 2.0) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return (np.sqrt(gain / fan_in) * box_muller(rng, shape)).astype(T.DTYPE)


def build_model(num_classes: int = 6, in_channels: int = 3, widths=(16, 32, 64, 64),
                strides=(1, 2, 2, 1), context_dilation: int = 2, seed: int = 0) -> SegModel:
    """Four conv-BN-ReLU blocks, a dilated context block and a 1x1 classifier.

    Weights use fan-in Kaiming scaling (gain 2 for ReLU blocks, 1 for the
    classifier); biases start at zero and BN at identity.
    """
    rng = make_rng(("init", seed))
    layers: list = []
    c = in_channels

    def block(c_in, c_out, stride, dilation):
        w = _kaiming(rng, (c_out, c_in, 3, 3))
        layers.append(Conv2d(w, np.zeros(c_out, T.DTYPE), stride=stride, pad=dilation, dilation=dilation))
        layers.append(BatchNorm2d(np.ones(c_out, T.DTYPE), np.zeros(c_out, T.DTYPE),
                                  np.zeros(c_out, T.DTYPE), np.ones(c_out, T.DTYPE)))
        layers.append(ReLU())

    for width, stride in zip(widths, strides):
        block(c, width, stride, 1)
        c = width
    block(c, c, 1, context_dilation)
    w = _kaiming(rng, (num_classes, c, 1, 1), gain=1.0)
    layers.append(Conv2d(w, np.zeros(num_classes, T.DTYPE), classifier=True))
    total = int(np.prod(strides))
    if total > 1:
        layers.append(Upsample(total))
    return SegModel(layers, num_classes)


# ---------------------------------------------------------------------------
# inference


def bn_apply(x, mean, var, scale, shift, eps: float = DEFAULT_EPS) -> np.ndarray:
    """scale * (x - mean) / sqrt(var + eps) + shift, per channel."""
    x = T.as_tensor(x)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    c = x.shape[1]
    for name, v in (("mean", mean), ("var", var), ("scale", scale), ("shift", shift)):
        if len(v) != c:
            raise T.ShapeError(f"bn {name} has length {len(v)} but input has {c} channels")
    if np.any(var < 0):
        raise ValueError("bn variance must be non-negative")
    k = np.asarray(scale, dtype=np.float64) / np.sqrt(var + eps)
    out = (x.astype(np.float64) - mean[None, :, None, None]) * k[None, :, None, None]
    out += np.asarray(shift, dtype=np.float64)[None, :, None, None]
    return out.astype(T.DTYPE)


# Callable form of an override: (bn_index, batch_mean, batch_var) -> (mean, var).
StatsHook = Callable[[int, np.ndarray, np.ndarray], tuple]


@dataclass
class ForwardResult:
    features: np.ndarray  # F, classifier input at the decoder resolution
    logits_low: np.ndarray
    probs_low: np.ndarray
    logits: np.ndarray  # full resolution
    probs: np.ndarray  # L
    batch_stats: list = field(default_factory=list)  # per BN layer (mean, var) of its input


def forward(model: SegModel, x, mode: NormMode = NormMode.STORED,
            override: Union[Sequence, StatsHook, None] = None) -> ForwardResult:
    """Run the network.

    ``override`` is used with ``NormMode.OVERRIDE`` and is either a sequence
    of per-BN-layer ``(mean, var)`` pairs or a callable invoked for each BN
    layer, in order, with that layer's input batch statistics.  The callable
    form lets a caller fold the statistics into running estimates and
    normalize with the result inside a single pass.
    """
    x = T.as_tensor(x, "input")
    n, _, h, w = x.shape
    stride = model.total_stride
    if h % stride or w % stride:
        raise T.ShapeError(f"input spatial size {h}x{w} not divisible by model stride {stride}")
    n_bn = len(model.bn_layers)
    if mode is NormMode.OVERRIDE:
        if override is None:
            raise ValueError("NormMode.OVERRIDE requires override statistics")
        if not callable(override) and len(override) != n_bn:
            raise ValueError(f"override provides {len(override)} layer stats, model has {n_bn} BN layers")

    stats = []
    features = logits_low = None
    bn_idx = 0
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            if layer.classifier:
                features = x
                x = layer(x)
                logits_low = x
            else:
                x = layer(x)
        elif isinstance(layer, BatchNorm2d):
            bmean, bvar = T.channel_stats(x)
            stats.append((bmean, bvar))
            if mode is NormMode.STORED:
                mean, var = layer.stored_mean, layer.stored_var
            elif mode is NormMode.BATCH:
                mean, var = bmean, bvar
            elif callable(override):
                mean, var = override(bn_idx, bmean, bvar)
            else:
                mean, var = override[bn_idx]
            x = bn_apply(x, mean, var, layer.scale, layer.shift, layer.eps)
            bn_idx += 1
        elif isinstance(layer, ReLU):
            x = T.relu(x)
        elif isinstance(layer, Upsample):
            x = T.bilinear_upsample(x, x.shape[2] * layer.factor, x.shape[3] * layer.factor)
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
    if x.shape[2:] != (h, w):
        raise T.ShapeError(f"model output {x.shape[2:]} does not match input {(h, w)}")
    return ForwardResult(
        features=features,
        logits_low=logits_low,
        probs_low=T.softmax_channels(logits_low),
        logits=x,
        probs=T.softmax_channels(x),
        batch_stats=stats,
    )


def predict(model: SegModel, x, mode: NormMode = NormMode.STORED, override=None) -> np.ndarray:
    """Per-pixel argmax labels, shape (n, h, w)."""
    return forward(model, x, mode, override).probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# weight files

WEIGHTS_MAGIC = b"DSEG"
WEIGHTS_VERSION = 1
KIND_CONV, KIND_BN, KIND_RELU, KIND_UPSAMPLE, KIND_CLASSIFIER = 1, 2, 3, 4, 5


class WeightFileError(ValueError):
    pass


def _f32(a) -> bytes:
    return np.asarray(a, dtype="<f4").tobytes()


def dump_weights(model: SegModel) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<BI", WEIGHTS_VERSION, len(model.layers))]
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            kind = KIND_CLASSIFIER if layer.classifier else KIND_CONV
            out.append(struct.pack("<B7I", kind, *layer.weight.shape, layer.stride, layer.pad, layer.dilation))
            out += [_f32(layer.weight), _f32(layer.bias)]
        elif isinstance(layer, BatchNorm2d):
            out.append(struct.pack("<BId", KIND_BN, layer.channels, layer.eps))
            out += [_f32(layer.scale), _f32(layer.shift), _f32(layer.stored_mean), _f32(layer.stored_var)]
        elif isinstance(layer, ReLU):
            out.append(struct.pack("<B", KIND_RELU))
        elif isinstance(layer, Upsample):
            out.append(struct.pack("<BI", KIND_UPSAMPLE, layer.factor))
        else:
            raise TypeError(f"cannot serialize layer {type(layer).__name__}")
    return b"".join(out)


def save_weights(model: SegModel, path) -> None:
    Path(path).write_bytes(dump_weights(model))


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, nbytes: int) -> bytes:
        end = self.pos + nbytes
        if end > len(self.raw):
            raise WeightFileError(
                f"{self.source}: truncated at offset {self.pos}: expected at least {end} bytes, "
                f"file has {len(self.raw)}")
        chunk = self.raw[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(T.DTYPE).reshape(shape)


def parse_weights(raw: bytes, source: str = "<bytes>") -> SegModel:
    r = _Reader(raw, source)
    magic = r.take(4)
    if magic != WEIGHTS_MAGIC:
        raise WeightFileError(f"{source}: bad magic {magic!r} at offset 0, expected {WEIGHTS_MAGIC!r}")
    version, count = r.unpack("<BI")
    if version != WEIGHTS_VERSION:
        raise WeightFileError(f"{source}: unsupported version {version} at offset 4")
    layers = []
    for _ in range(count):
        at = r.pos
        (kind,) = r.unpack("<B")
        if kind in (KIND_CONV, KIND_CLASSIFIER):
            o, i, kh, kw, stride, pad, dil = r.unpack("<7I")
            weight = r.floats((o, i, kh, kw))
            bias = r.floats((o,))
            layers.append(Conv2d(weight, bias, stride, pad, dil, classifier=kind == KIND_CLASSIFIER))
        elif kind == KIND_BN:
            c, eps = r.unpack("<Id")
            scale, shift, mean, var = (r.floats((c,)) for _ in range(4))
            layers.append(BatchNorm2d(scale, shift, mean, var, float(eps)))
        elif kind == KIND_RELU:
            layers.append(ReLU())
        elif kind == KIND_UPSAMPLE:
            (factor,) = r.unpack("<I")
            layers.append(Upsample(factor))
        else:
            raise WeightFileError(f"{source}: unknown layer kind {kind} at offset {at}")
    if r.pos != len(raw):
        raise WeightFileError(f"{source}: {len(raw) - r.pos} trailing bytes after offset {r.pos}")
    head = next(l for l in layers if isinstance(l, Conv2d) and l.classifier)
    return SegModel(layers, head.out_channels)


def load_weights(path) -> SegModel:
    return parse_weights(Path(path).read_bytes(), str(path))
