"""Desk-scale CNN classifiers with named, tappable layers.

Two architectures are provided, both for NCHW inputs in [0, 1]:

MiniVGG (plain conv stacks; every ``conv`` layer is a 3x3 convolution with
padding 1 followed by ReLU)::

    conv1.1(16) conv1.2(16) pool1 conv2.1(32) conv2.2(32) pool2
    conv3.1(64) conv3.2(64) conv3.3(64) pool3 flatten fc1(128) fc1.relu fc2(C)

MiniResNet (one residual block per stage)::

    conv1(16) pool1 conv2.1(32) conv2.2[res 32] pool2
    conv3.1(64) conv3.2[res 64] gap flatten fc(C)

A residual block computes ``relu(x + conv(relu(conv(x))))`` with two 3x3
convolutions that preserve the channel count.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "dense", "flatten", "residual-block")

# shallow / mid / deep tap groups per architecture, used by layer profiling.
# MiniVGG has no conv deeper than conv3.3, so its deep tap is the hidden dense layer.
TAP_GROUPS = {
    "minivgg": {"shallow": "conv1.2", "mid": "conv3.3", "deep": "fc1.relu"},
    "miniresnet": {"shallow": "conv1", "mid": "conv2.2", "deep": "conv3.2"},
}


class FrozenModelError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class WeightsFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Layer:
    name: str
    kind: str
    params: List[Tensor] = field(default_factory=list)
    # pool window, or out channels for conv / units for dense
    size: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name!r}: unknown kind {self.kind!r}")

    def param_shapes(self, in_shape: Tuple[int, ...]) -> List[Tuple[int, ...]]:
        if self.kind == "conv":
            return [(self.size, in_shape[0], 3, 3), (self.size,)]
        if self.kind == "residual-block":
            c = in_shape[0]
            return [(c, c, 3, 3), (c,), (c, c, 3, 3), (c,)]
        if self.kind == "dense":
            return [(in_shape[0], self.size), (self.size,)]
        return []

    def output_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Shape rule for one sample (no batch axis)."""
        if self.kind == "conv":
            return (self.size,) + in_shape[1:]
        if self.kind in ("maxpool", "avgpool"):
            c, h, w = in_shape
            if h < self.size or w < self.size:
                raise ad.ShapeError(f"layer {self.name}: pool window {self.size} exceeds input {h}x{w}")
            return (c, h // self.size, w // self.size)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if self.kind == "dense":
            return (self.size,)
        return in_shape

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        if self.kind == "conv":
            return ad.relu(ad.conv2d(x, p[0], p[1], stride=1, padding=1))
        if self.kind == "residual-block":
            h = ad.relu(ad.conv2d(x, p[0], p[1], stride=1, padding=1))
            h = ad.conv2d(h, p[2], p[3], stride=1, padding=1)
            return ad.relu(ad.add(x, h))
        if self.kind == "relu":
            return ad.relu(x)
        if self.kind == "maxpool":
            return ad.maxpool2d(x, self.size)
        if self.kind == "avgpool":
            return ad.avgpool2d(x, self.size)
        if self.kind == "flatten":
            return ad.flatten(x)
        return ad.dense(x, p[0], p[1])


def _minivgg_layers(num_classes: int) -> List[Layer]:
    return [
        Layer("conv1.1", "conv", size=16),
        Layer("conv1.2", "conv", size=16),
        Layer("pool1", "maxpool", size=2),
        Layer("conv2.1", "conv", size=32),
        Layer("conv2.2", "conv", size=32),
        Layer("pool2", "maxpool", size=2),
        Layer("conv3.1", "conv", size=64),
        Layer("conv3.2", "conv", size=64),
        Layer("conv3.3", "conv", size=64),
        Layer("pool3", "maxpool", size=2),
        Layer("flatten", "flatten"),
        Layer("fc1", "dense", size=128),
        Layer("fc1.relu", "relu"),
        Layer("fc2", "dense", size=num_classes),
    ]


def _miniresnet_layers(num_classes: int, spatial: int) -> List[Layer]:
    return [
        Layer("conv1", "conv", size=16),
        Layer("pool1", "maxpool", size=2),
        Layer("conv2.1", "conv", size=32),
        Layer("conv2.2", "residual-block"),
        Layer("pool2", "maxpool", size=2),
        Layer("conv3.1", "conv", size=64),
        Layer("conv3.2", "residual-block"),
        Layer("gap", "avgpool", size=spatial),
        Layer("flatten", "flatten"),
        Layer("fc", "dense", size=num_classes),
    ]


ARCHITECTURES = ("minivgg", "miniresnet")


class Model:
    """Ordered sequence of named layers mapping (N, C, H, W) images to logits."""

    def __init__(
        self,
        arch: str,
        input_shape: Tuple[int, int, int] = (1, 28, 28),
        num_classes: int = 10,
        seed: int = 0,
        name: Optional[str] = None,
        task: Optional[str] = None,
    ):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
        self.arch = arch
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.name = name or arch
        self.task = task or ("digits" if num_classes == 10 else "parity" if num_classes == 2 else f"c{num_classes}")
        self.frozen = False
        if arch == "minivgg":
            self.layers = _minivgg_layers(self.num_classes)
        else:
            self.layers = _miniresnet_layers(self.num_classes, self.input_shape[1] // 4)
        self._index = {layer.name: i for i, layer in enumerate(self.layers)}
        if len(self._index) != len(self.layers):
            raise ValueError("layer names must be unique")
        self.layer_shapes = self._audit_shapes()
        self._init_params(seed)

    def _audit_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes[layer.name] = shape
        if shape != (self.num_classes,):
            raise ad.ShapeError(f"{self.arch}: final layer yields {shape}, expected ({self.num_classes},)")
        return shapes

    def _in_shapes(self) -> List[Tuple[int, ...]]:
        shapes = [self.input_shape]
        for layer in self.layers[:-1]:
            shapes.append(self.layer_shapes[layer.name])
        return shapes

    def _init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer, in_shape in zip(self.layers, self._in_shapes()):
            params = []
            for k, shape in enumerate(layer.param_shapes(in_shape)):
                if len(shape) == 1:
                    params.append(Tensor(np.zeros(shape), requires_grad=True))
                    continue
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
                # second conv of a residual block starts small so the block begins near identity
                if layer.kind == "residual-block" and k == 2:
                    w *= 0.1
                params.append(Tensor(w, requires_grad=True))
            layer.params = params

    # -- introspection --------------------------------------------------

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> Layer:
        return self.layers[self._layer_index(name)]

    def _layer_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown layer {name!r}; available layers: {', '.join(self.layer_names)}") from None

    def depth(self, name: str) -> int:
        return self._layer_index(name)

    def default_tap(self) -> str:
        return TAP_GROUPS[self.arch]["mid"]

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    # -- state ----------------------------------------------------------

    def freeze(self) -> "Model":
        for layer in self.layers:
            layer.params = [Tensor._wrap(p.data.copy()) for p in layer.params]
        self.frozen = True
        return self

    def set_parameters(self, name: str, params: Sequence[np.ndarray]) -> None:
        if self.frozen:
            raise FrozenModelError(f"model {self.name!r} is frozen; parameters of {name!r} cannot change")
        layer = self.layer(name)
        expected = [p.shape for p in layer.params]
        got = [tuple(np.shape(p)) for p in params]
        if got != expected:
            raise ad.ShapeError(f"layer {name}: parameter shapes {got} do not match {expected}")
        layer.params = [Tensor(p, requires_grad=True) for p in params]

    # -- forward --------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ad.ShapeError(f"{self.name} expects input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_tap(x, None)[0]

    def forward_with_tap(self, x: Tensor, tap: Optional[str] = None) -> Tuple[Tensor, Optional[Tensor]]:
        """Logits plus the output of layer ``tap`` from the same pass."""
        stop = self._layer_index(tap) if tap is not None else -1
        self._check_input(x)
        feature = None
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i == stop:
                feature = h
        return h, feature

    def features(self, x: Tensor, tap: str) -> Tensor:
        """Output of layer ``tap``; layers after it are not evaluated."""
        stop = self._layer_index(tap)
        self._check_input(x)
        h = x
        for layer in self.layers[: stop + 1]:
            h = layer.forward(h)
        return h

    def predict(self, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
        out = []
        for start in range(0, len(images), batch_size):
            logits = self.forward(Tensor(images[start : start + batch_size]))
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def __repr__(self) -> str:
        return f"Model({self.name!r}, arch={self.arch}, input={self.input_shape}, classes={self.num_classes})"


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingSummary:
    epoch_loss: List[float]
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    seed: int = 0


def train(
    model: Model,
    dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 1,
    held_out=None,
) -> TrainingSummary:
    """Plain minibatch SGD on mean softmax cross-entropy; deterministic in ``seed``."""
    if model.frozen:
        raise FrozenModelError(f"model {model.name!r} is frozen")
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    labels = np.asarray(dataset.labels)
    if labels.max() >= model.num_classes:
        raise ValueError(f"label {labels.max()} out of range for {model.num_classes} classes")
    if epochs <= 0:
        return TrainingSummary(epoch_loss=[], seed=seed)

    images = np.asarray(dataset.images, dtype=np.float32)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            try:
                with Tape() as tape:
                    loss = ad.softmax_cross_entropy(model.forward(Tensor(images[idx])), labels[idx])
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(epoch, "loss is not finite")
            grads = backward(tape, loss)
            for layer in model.layers:
                if layer.params:
                    layer.params = [
                        Tensor._wrap(p.data - lr * grads[p].data, requires_grad=True) if p in grads else p
                        for p in layer.params
                    ]
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        logger.info("%s epoch %d loss %.4f", model.name, epoch, losses[-1])
    summary = TrainingSummary(epoch_loss=losses, seed=seed)
    summary.train_accuracy = float((model.predict(images) == labels).mean())
    if held_out is not None and len(held_out):
        summary.test_accuracy = float((model.predict(np.asarray(held_out.images)) == np.asarray(held_out.labels)).mean())
    return summary


backward = ad.backward


# ---------------------------------------------------------------------------
# weights file: "DRW1", u32 record count, then per layer:
#   u16 name length, utf-8 name, u8 tensor count,
#   per tensor: u8 rank, rank x u32 dims, little-endian f32 data

MAGIC = b"DRW1"


def save_weights(model: Model, path) -> None:
    for p in model.parameters():
        if not np.isfinite(p.data).all():
            raise ad.NonFiniteError(f"model {model.name!r} has non-finite parameters")
    chunks = [MAGIC, struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        name = layer.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)) + name + struct.pack("<B", len(layer.params)))
        for p in layer.params:
            chunks.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightsFormatError(f"truncated file: need {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse_weights(buf: bytes) -> List[Tuple[str, int, List[np.ndarray]]]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise WeightsFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (count,) = r.unpack("<I", "layer count")
    records = []
    for _ in range(count):
        offset = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "layer name").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightsFormatError("layer name is not valid UTF-8", offset + 2) from None
        (ntensors,) = r.unpack("<B", "tensor count")
        tensors = []
        for _ in range(ntensors):
            (rank,) = r.unpack("<B", "tensor rank")
            dims = r.unpack(f"<{rank}I", "tensor dims")
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(r.take(nbytes, f"tensor data of {name}"), dtype="<f4").reshape(dims)
            tensors.append(data)
        records.append((name, offset, tensors))
    if r.pos != len(buf):
        raise WeightsFormatError(f"{len(buf) - r.pos} trailing bytes after last record", r.pos)
    return records


def load_weights(
    path,
    arch: Optional[str] = None,
    input_hw: Tuple[int, int] = (28, 28),
    name: Optional[str] = None,
    task: Optional[str] = None,
) -> Model:
    """Rebuild a model from a weights file.

    The architecture is recognised from the layer names unless ``arch`` is
    given; channel and class counts come from the stored tensor shapes.
    """
    buf = Path(path).read_bytes()
    records = _parse_weights(buf)
    names = [r[0] for r in records]
    if arch is None:
        arch = "minivgg" if "conv3.3" in names else "miniresnet"
    first = next((t for _, _, ts in records for t in ts if t.ndim == 4), None)
    last = next((ts[0] for _, _, ts in reversed(records) if ts and ts[0].ndim == 2), None)
    if first is None or last is None:
        raise WeightsFormatError("file has no conv kernel or dense weight", 8)
    model = Model(arch, input_shape=(first.shape[1],) + tuple(input_hw), num_classes=last.shape[1], name=name, task=task)
    if len(records) != len(model.layers):
        raise WeightsFormatError(
            f"layer count {len(records)} in file differs from {len(model.layers)} in {arch} architecture", 4
        )
    for (rname, offset, tensors), layer in zip(records, model.layers):
        if rname != layer.name:
            raise WeightsFormatError(f"layer name {rname!r} where {arch} expects {layer.name!r}", offset)
        expected = [p.shape for p in layer.params]
        got = [t.shape for t in tensors]
        if got != expected:
            raise WeightsFormatError(f"layer {rname}: tensor shapes {got}, expected {expected}", offset)
        if not all(np.isfinite(t).all() for t in tensors):
            raise WeightsFormatError(f"layer {rname}: non-finite parameter", offset)
        layer.params = [Tensor(t.astype(np.float32), requires_grad=True) for t in tensors]
    return model


# ---------------------------------------------------------------------------
# models shipped with the package (trained by scripts/train_bundled.py)

BUNDLED_MODELS = {
    "minivgg-digits": "digits",
    "miniresnet-digits": "digits",
    "minivgg-parity": "parity",
}


def bundled_weights_path(name: str) -> Path:
    if name not in BUNDLED_MODELS:
        raise KeyError(f"no bundled model {name!r}; available: {', '.join(BUNDLED_MODELS)}")
    return Path(str(resources.files("drkit") / "data" / f"{name}.drw"))


def load_bundled(name: str) -> Model:
    """A frozen copy of one of the shipped models."""
    path = bundled_weights_path(name)
    return load_weights(path, name=name, task=BUNDLED_MODELS[name]).freeze()
