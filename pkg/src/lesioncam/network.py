"""GAP-headed convolutional classifier: construction, traced forward, training, weight IO."""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .errors import ConfigError, FormatError, NumericError, ShapeError, UsageError

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool2x2", "gap", "dropout", "fc")
WEIGHT_MAGIC = b"LCAMW1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    p: float = 0.0
    num_classes: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind == "conv":
            if self.out_channels < 1 or self.kernel_size < 1:
                raise ConfigError(f"conv needs positive out_channels and kernel_size: {self}")
            if self.stride < 1:
                raise ConfigError(f"conv stride must be >= 1: {self}")
            if self.padding < 0:
                raise ConfigError(f"conv padding must be >= 0: {self}")
        if self.kind == "dropout" and not 0 <= self.p < 1:
            raise ConfigError(f"dropout p must lie in [0, 1): {self}")
        if self.kind == "fc" and self.num_classes < 1:
            raise ConfigError(f"fc needs num_classes >= 1: {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        known = cls.__dataclass_fields__
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown layer keys {sorted(extra)}")
        return cls(**d)


def conv(out_channels, padding=1, bias=True):
    return LayerSpec("conv", out_channels=out_channels, kernel_size=3, padding=padding, bias=bias)


def _vgg_style(channels, pool_after, unpadded_tail, dropout_p, num_classes, bias=True):
    layers = []
    for i, c in enumerate(channels, start=1):
        pad = 0 if i > len(channels) - unpadded_tail else 1
        layers += [conv(c, pad, bias), LayerSpec("relu")]
        if i in pool_after:
            layers.append(LayerSpec("maxpool2x2"))
    layers += [LayerSpec("gap"), LayerSpec("dropout", p=dropout_p), LayerSpec("fc", num_classes=num_classes)]
    return layers


PAPER14_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512, 1024)
TINY_CHANNELS = (8, 8, 16, 16, 32, 32)
PRESET_INPUT_SIZE = {"paper14": 224, "tiny": 64}


def preset_layers(preset, dropout_p=0.5, num_classes=3):
    if preset == "paper14":
        return _vgg_style(PAPER14_CHANNELS, {2, 4, 7, 10}, 2, dropout_p, num_classes)
    if preset == "tiny":
        # bias-free convs: flat background maps to zero, so no class can score from background alone
        return _vgg_style(TINY_CHANNELS, {2, 4}, 2, dropout_p, num_classes, bias=False)
    raise ConfigError(f"unknown preset {preset!r}")


@dataclass
class NetworkConfig:
    preset: str = "tiny"
    layers: list[LayerSpec] = field(default_factory=list)
    input_size: int = 0
    num_classes: int = 3
    dropout_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.layers:
            if self.preset == "custom":
                raise ConfigError("custom preset requires an explicit layer list")
            self.layers = preset_layers(self.preset, self.dropout_p, self.num_classes)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        if not self.input_size:
            self.input_size = PRESET_INPUT_SIZE.get(self.preset, 0)
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown network config keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        kinds = [l.kind for l in self.layers]
        if self.input_size < 1:
            raise ConfigError("input_size must be a positive pixel count")
        if kinds.count("gap") != 1:
            raise ConfigError(f"exactly one gap layer required, found {kinds.count('gap')}")
        if kinds.count("fc") != 1:
            raise ConfigError(f"exactly one fc layer required, found {kinds.count('fc')}")
        if kinds[-1] != "fc":
            raise ConfigError("fc must be the last layer")
        g = kinds.index("gap")
        if g > kinds.index("fc"):
            raise ConfigError("gap must precede fc")
        if any(k != "dropout" for k in kinds[g + 1:-1]):
            raise ConfigError("only dropout may sit between gap and fc")
        if "conv" not in kinds[:g]:
            raise ConfigError("at least one conv layer must precede gap")
        last_conv = max(i for i, k in enumerate(kinds[:g]) if k == "conv")
        if any(k != "relu" for k in kinds[last_conv + 1:g]):
            raise ConfigError("only relu may sit between the last conv and gap")
        if self.layers[-1].num_classes != self.num_classes:
            raise ConfigError(
                f"fc num_classes {self.layers[-1].num_classes} != config num_classes {self.num_classes}"
            )
        self.feature_shape()

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, h, w) of the last conv output for this input size."""
        c, s = 3, self.input_size
        for spec in self.layers:
            if spec.kind == "conv":
                try:
                    s = nn.conv_output_size(s, spec.kernel_size, spec.stride, spec.padding)
                except ShapeError as exc:
                    raise ConfigError(str(exc)) from None
                c = spec.out_channels
            elif spec.kind == "maxpool2x2":
                if s % 2:
                    raise ConfigError(f"maxpool2x2 reached odd spatial size {s}")
                s //= 2
            elif spec.kind == "gap":
                break
            if s < 1:
                raise ConfigError("spatial size collapsed to zero")
        return c, s, s


@dataclass
class ForwardTrace:
    feature_maps: np.ndarray  # (N, K, h, w): last conv activations
    gap_vector: np.ndarray  # (N, K)
    logits: np.ndarray  # (N, C)
    probs: np.ndarray  # (N, C)


class Network:
    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.layers: list[nn.Layer] = []
        c = 3
        for spec in config.layers:
            if spec.kind == "conv":
                layer = nn.Conv2d(c, spec.out_channels, spec.kernel_size, spec.stride, spec.padding, rng, spec.bias)
                c = spec.out_channels
            elif spec.kind == "relu":
                layer = nn.ReLU()
            elif spec.kind == "maxpool2x2":
                layer = nn.MaxPool2x2()
            elif spec.kind == "gap":
                layer = nn.GlobalAvgPool()
            elif spec.kind == "dropout":
                layer = nn.Dropout(spec.p, np.random.default_rng([config.seed, 1]))
            else:
                layer = nn.Linear(c, spec.num_classes, rng)
            self.layers.append(layer)
        self.layers[0].need_input_grad = False
        self._gap_index = [l.kind for l in self.layers].index("gap")

    @property
    def fc_weights(self) -> np.ndarray:
        """(K, C) matrix of class weights applied to the GAP vector."""
        return self.layers[-1].weights.value

    @property
    def dropout_layer(self) -> nn.Dropout | None:
        return next((l for l in self.layers if isinstance(l, nn.Dropout)), None)

    def params(self) -> list[nn.Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, batch, mode="eval") -> ForwardTrace:
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        size = self.config.input_size
        if batch.ndim != 4 or batch.shape[1:] != (3, size, size):
            raise ShapeError(f"batch shape {batch.shape} does not match network input (N, 3, {size}, {size})")
        train = mode == "train"
        h = batch
        feature_maps = gap_vector = None
        for i, layer in enumerate(self.layers):
            if i == self._gap_index:
                feature_maps = h
            h = layer.forward(h, train)
            if i == self._gap_index:
                gap_vector = h
        return ForwardTrace(feature_maps, gap_vector, h, nn.softmax(h))

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def predict(self, images, batch_size=64) -> np.ndarray:
        """Eval-mode class probabilities for an (N,3,H,W) array, in chunks."""
        chunks = [self.forward(images[i:i + batch_size]).probs for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.config.num_classes), nn.DTYPE)

    def copy(self) -> "Network":
        other = Network(self.config)
        for dst, src in zip(other.params(), self.params()):
            dst.value[...] = src.value
        return other


def build_network(config: NetworkConfig) -> Network:
    return Network(config)


def images_to_tensor(images) -> np.ndarray:
    """uint8 (N,H,W,3) or (H,W,3) -> float32 (N,3,H,W) in [-2, 2], centred per image.

    Each channel has its median subtracted, which for dermoscopy puts the
    surrounding skin near zero so zero padding adds no artificial border edge.
    """
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.transpose(0, 3, 1, 2).astype(nn.DTYPE) / nn.DTYPE(255.0)
    return nn.DTYPE(2.0) * (x - np.median(x, axis=(2, 3), keepdims=True).astype(nn.DTYPE))


# ---------------------------------------------------------------- training

@dataclass
class TrainParams:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 8
    batch_size: int = 32
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainParams":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train keys {sorted(extra)}")
        return cls(**d)


def train(network: Network, images, labels, params: TrainParams, progress=None) -> list[float]:
    """Minibatch momentum SGD on (N,3,H,W) float images; returns per-epoch mean loss.

    The loss of each epoch is averaged over the minibatches seen during that
    epoch (train mode, so dropout is active).
    """
    labels = np.asarray(labels)
    if len(images) == 0:
        raise UsageError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    rng = np.random.default_rng(params.seed)
    drop = network.dropout_layer
    if drop is not None:
        drop.rng = np.random.default_rng([params.seed, 1])
    trainable = network.params()
    for p in trainable:
        p.zero_grad()
        p.velocity[...] = 0
    history = []
    for epoch in range(params.epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), params.batch_size):
            idx = order[start:start + params.batch_size]
            trace = network.forward(images[idx], "train")
            loss, grad = nn.cross_entropy(trace.probs, labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            network.backward(grad.astype(nn.DTYPE))
            nn.sgd_step(trainable, params.lr, params.momentum, params.weight_decay)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if progress:
            progress(epoch, history[-1])
    return history


# ---------------------------------------------------------------- weight files

def save_weights(network: Network, path):
    """Write ``LCAMW1`` + u32 tensor count + per tensor (4 x u32 shape, f32 data), little-endian."""
    params = network.params()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            shape = (1,) * (4 - p.value.ndim) + p.value.shape
            fh.write(struct.pack("<4I", *shape))
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def read_weight_file(path) -> list[np.ndarray]:
    """Parse a weight file into arrays with 4-D shapes; raises FormatError."""
    data = Path(path).read_bytes()
    if data[:len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    pos = len(WEIGHT_MAGIC)
    if len(data) < pos + 4:
        raise FormatError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = []
    for i in range(count):
        if len(data) < pos + 16:
            raise FormatError(f"{path}: truncated shape record for tensor {i}")
        shape = struct.unpack_from("<4I", data, pos)
        pos += 16
        nbytes = 4 * int(np.prod(shape))
        if len(data) < pos + nbytes:
            raise FormatError(f"{path}: truncated data for tensor {i}")
        arrays.append(np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape))
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return arrays


def load_weights(path, config: NetworkConfig) -> Network:
    arrays = read_weight_file(path)
    network = Network(config)
    params = network.params()
    if len(arrays) != len(params):
        raise FormatError(f"{path}: {len(arrays)} tensors but config expects {len(params)}")
    for i, (arr, p) in enumerate(zip(arrays, params)):
        want = (1,) * (4 - p.value.ndim) + p.value.shape
        if arr.shape != want:
            raise FormatError(f"{path}: tensor {i} has shape {arr.shape}, config expects {want}")
    for arr, p in zip(arrays, params):
        p.value[...] = arr.reshape(p.value.shape)
    return network
