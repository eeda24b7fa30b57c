"""The desk-scale CNN: definition, SGD training and the SFM1 file format."""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .data import LabeledImage, stack

log = logging.getLogger(__name__)

KIND_CODES = {"conv2d": 1, "relu": 2, "maxpool": 3, "gap": 4, "linear": 5}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
MAGIC = b"SFM1"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumMismatchError(ModelFormatError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Layer:
    kind: str
    kernel: int = 0
    stride: int = 0
    pad: int = 0
    in_ch: int = 0
    out_ch: int = 0
    weights: list[np.ndarray] = field(default_factory=list)

    def weight_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "conv2d":
            return [(self.out_ch, self.in_ch, self.kernel, self.kernel), (self.out_ch,)]
        if self.kind == "linear":
            return [(self.out_ch, self.in_ch), (self.out_ch,)]
        return []


@dataclass
class Model:
    layers: list[Layer]
    class_names: list[str]
    interp_layer: int | None = None
    input_shape: tuple[int, int, int] = (3, 64, 64)

    def __post_init__(self):
        convs = [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]
        if self.interp_layer is None:
            if not convs:
                raise ValueError("model has no conv layer to interpret")
            self.interp_layer = convs[-1]
        if self.layers[self.interp_layer].kind != "conv2d":
            raise ValueError(f"interpretation layer {self.interp_layer} is not a conv layer")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def tap_index(self) -> int:
        """Last layer of the interpreted conv block (conv plus its relu/maxpool)."""
        i = self.interp_layer
        while i + 1 < len(self.layers) and self.layers[i + 1].kind in ("relu", "maxpool"):
            i += 1
        return i

    def params(self) -> list[np.ndarray]:
        return [w for layer in self.layers for w in layer.weights]

    def _run(self, x, layers, params):
        it = iter(params) if params is not None else None
        for layer in layers:
            ws = [next(it) for _ in layer.weights] if it is not None else [de.Tensor(w) for w in layer.weights]
            if layer.kind == "conv2d":
                x = de.conv2d(x, ws[0], layer.stride, layer.pad)
                x = x + de.reshape(ws[1], (1, layer.out_ch, 1, 1))
            elif layer.kind == "relu":
                x = de.relu(x)
            elif layer.kind == "maxpool":
                x = de.maxpool2d(x, layer.kernel)
            elif layer.kind == "gap":
                x = de.gap(x)
            elif layer.kind == "linear":
                x = de.linear(x, ws[0], ws[1])
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        return x

    def _split_params(self, params):
        if params is None:
            return None, None
        k = sum(len(l.weights) for l in self.layers[: self.tap_index + 1])
        return params[:k], params[k:]

    def features(self, x, params=None) -> de.Tensor:
        """Activations at the interpretation point, (N, K, h, w)."""
        front, _ = self._split_params(params)
        return self._run(de.as_tensor(x), self.layers[: self.tap_index + 1], front)

    def head(self, feats, params=None) -> de.Tensor:
        """Logits from interpretation-point activations."""
        _, back = self._split_params(params)
        return self._run(de.as_tensor(feats), self.layers[self.tap_index + 1 :], back)

    def forward(self, x, params=None) -> de.Tensor:
        return self.head(self.features(x, params), params)

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Plain inference on an (N, C, H, W) array."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = []
        with de.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(de.Tensor(images[i : i + batch_size])).data)
        return np.concatenate(out)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)


def build_default_model(num_classes: int, seed: int = 0, class_names=None, image_size: int = 64) -> Model:
    """Three conv/relu/pool blocks (16, 32, 64 channels), global average pool, linear head.

    Weights and biases are drawn from uniform(-b, b) with b = sqrt(1 / fan_in).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    in_ch = 3
    for out_ch in (16, 32, 64):
        layers.append(Layer("conv2d", kernel=3, stride=1, pad=1, in_ch=in_ch, out_ch=out_ch))
        layers.append(Layer("relu"))
        layers.append(Layer("maxpool", kernel=2, stride=2))
        in_ch = out_ch
    layers.append(Layer("gap"))
    layers.append(Layer("linear", in_ch=in_ch, out_ch=num_classes))
    for layer in layers:
        shapes = layer.weight_shapes()
        if not shapes:
            continue
        fan_in = int(np.prod(shapes[0][1:]))
        bound = math.sqrt(1.0 / fan_in)
        layer.weights = [rng.uniform(-bound, bound, size=s).astype(np.float32) for s in shapes]
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(num_classes)]
    if len(names) != num_classes:
        raise ValueError("class_names length does not match num_classes")
    return Model(layers, names, input_shape=(3, image_size, image_size))


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    seed: int
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    heldout_accuracy: list[float] = field(default_factory=list)
    final_heldout_accuracy: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "heldout_accuracy": self.heldout_accuracy,
            "final_heldout_accuracy": self.final_heldout_accuracy,
        }


def accuracy(model: Model, images: list[LabeledImage]) -> float:
    if not images:
        return 0.0
    pred = model.predict(stack(images))
    return float(np.mean(pred == np.array([im.label for im in images])))


def train(
    model: Model,
    dataset: list[LabeledImage],
    epochs: int = 15,
    lr: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
    heldout: list[LabeledImage] | None = None,
    momentum: float = 0.9,
) -> TrainReport:
    """Mini-batch SGD (heavy-ball momentum) on mean softmax cross-entropy.

    Updates ``model`` in place. ``momentum=0`` gives plain SGD, which stalls
    near chance for many epochs from the small default initialization.
    """
    if not dataset:
        raise ValueError("empty training set")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    x_all = stack(dataset)
    y_all = np.array([im.label for im in dataset])
    rng = np.random.default_rng(seed)
    report = TrainReport(seed=seed)
    velocity = [np.zeros_like(w) for w in model.params()]
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses, correct = [], 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            params = [de.Tensor(w, requires_grad=True) for w in model.params()]
            logits = model.forward(de.Tensor(x_all[idx]), params)
            loss = de.mean(de.softmax_cross_entropy(logits, y_all[idx]))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, batch starting {start}")
            grads = de.grad(loss, params)
            if not all(np.all(np.isfinite(g.data)) for g in grads):
                raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}, batch starting {start}")
            for w, v, g in zip(model.params(), velocity, grads):
                v *= momentum
                v += g.data
                w -= np.asarray(lr * v, dtype=w.dtype)
            losses.append(value * len(idx))
            correct += int(np.sum(logits.data.argmax(axis=1) == y_all[idx]))
        report.train_loss.append(float(np.sum(losses) / len(dataset)))
        report.train_accuracy.append(correct / len(dataset))
        held = accuracy(model, heldout) if heldout else float("nan")
        report.heldout_accuracy.append(held)
        log.info("epoch %d loss %.4f train acc %.3f held-out acc %.3f", epoch + 1,
                 report.train_loss[-1], report.train_accuracy[-1], held)
    report.final_heldout_accuracy = accuracy(model, heldout) if heldout else float("nan")
    return report


# ---------------------------------------------------------------- SFM1 file format
#
#   "SFM1" | u32 version | u32 layer count
#   per layer: u8 kind | u32 kernel, stride, pad, in_ch, out_ch | u64 n | n x f32
#   u32 label count | per label: u32 byte length, UTF-8 bytes
#   u32 CRC32 of everything before it
# All integers little-endian.


def model_to_bytes(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<B5I", KIND_CODES[layer.kind], layer.kernel, layer.stride,
                                 layer.pad, layer.in_ch, layer.out_ch))
        flat = np.concatenate([w.astype("<f4").reshape(-1) for w in layer.weights]) if layer.weights else np.zeros(0, "<f4")
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    parts.append(struct.pack("<I", len(model.class_names)))
    for name in model.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not an SFM1 model file")
    version, n_layers = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"file version {version}, expected {FORMAT_VERSION}")
    layers = []
    for _ in range(n_layers):
        code, kernel, stride, pad, in_ch, out_ch = r.unpack("<B5I")
        if code not in CODE_KINDS:
            raise ModelFormatError(f"unknown layer kind code {code}")
        layer = Layer(CODE_KINDS[code], kernel, stride, pad, in_ch, out_ch)
        (count,) = r.unpack("<Q")
        flat = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
        shapes = layer.weight_shapes()
        if count != sum(int(np.prod(s)) for s in shapes):
            raise ModelFormatError(f"{layer.kind} layer carries {count} weights, expected shapes {shapes}")
        off = 0
        for s in shapes:
            size = int(np.prod(s))
            layer.weights.append(flat[off : off + size].reshape(s).copy())
            off += size
        layers.append(layer)
    (n_labels,) = r.unpack("<I")
    names = []
    for _ in range(n_labels):
        (length,) = r.unpack("<I")
        names.append(r.take(length).decode("utf-8"))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:body_end]) != crc:
        raise ChecksumMismatchError("CRC32 does not match file contents")
    return Model(layers, names)


def save_model(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(model))
    tmp.replace(path)


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
