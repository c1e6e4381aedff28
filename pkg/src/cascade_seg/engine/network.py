"""Ordered layer stacks, the Table-style 7-layer patch classifier, training steps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NoForwardState, ShapeMismatch
from .init import glorot_init
from .layers import (
    LAYER_KINDS,
    BatchNorm,
    Conv3D,
    Dropout,
    FullyConnected,
    Layer,
    MaxPool3D,
    cross_entropy_loss,
    softmax_cross_entropy_backward,
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    maps: int = 0
    size: int = 0
    stride: int = 1
    pad: int = 0
    units: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("Conv3D", "MaxPool3D") and (self.size < 1 or self.stride < 1):
            raise ValueError(f"{self.kind} needs size and stride >= 1")
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if self.kind == "Dropout" and not 0 <= self.rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")


def table1_specs(dropout: float = 0.5) -> list[LayerSpec]:
    """Two conv/BN/ReLU/max-pool stacks (32, 64 maps), dropout, FC-256, FC-2 softmax."""
    return [
        LayerSpec("Conv3D", maps=32, size=3, stride=1, pad=1),
        LayerSpec("BatchNorm"),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool3D", size=2, stride=2),
        LayerSpec("Conv3D", maps=64, size=3, stride=1, pad=1),
        LayerSpec("BatchNorm"),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool3D", size=2, stride=2),
        LayerSpec("Dropout", rate=dropout),
        LayerSpec("FullyConnected", units=256),
        LayerSpec("ReLU"),
        LayerSpec("FullyConnected", units=2),
        LayerSpec("Softmax"),
    ]


def _make_layer(spec: LayerSpec, in_shape) -> Layer:
    if spec.kind == "Conv3D":
        return Conv3D(in_shape[0], spec.maps, spec.size, spec.stride, spec.pad)
    if spec.kind == "MaxPool3D":
        return MaxPool3D(spec.size, spec.stride)
    if spec.kind == "FullyConnected":
        return FullyConnected(int(np.prod(in_shape)), spec.units)
    if spec.kind == "BatchNorm":
        return BatchNorm(in_shape[0])
    if spec.kind == "Dropout":
        return Dropout(spec.rate)
    return LAYER_KINDS[spec.kind]()


@dataclass
class Network:
    """A feed-forward stack of layers over inputs of shape ``input_shape`` (no batch axis)."""

    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    layers: list[Layer] = field(default_factory=list)
    dtype: type = np.float32

    def __post_init__(self):
        if not self.layers:
            shape = tuple(self.input_shape)
            for spec in self.specs:
                layer = _make_layer(spec, shape)
                shape = layer.output_shape(shape)
                if min(shape) < 1:
                    raise ShapeMismatch(f"{spec.kind} produces empty output {shape}")
                self.layers.append(layer)
        self._recorded = False
        self._probs = None
        # set by training and by checkpoint loading; hard-negative mining refuses untrained nets
        self.trained = False

    # ---------------------------------------------------------------- shapes
    def shape_chain(self) -> list[tuple[int, ...]]:
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    # ------------------------------------------------------------ parameters
    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield (i, name), p

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers.items():
                yield (i, name), b

    def count_parameters(self, include_batchnorm: bool = True) -> int:
        return sum(p.size for (i, _), p in self.named_parameters()
                   if include_batchnorm or not isinstance(self.layers[i], BatchNorm))

    def initialize(self, rng) -> "Network":
        """Glorot-uniform weights, zero biases, identity batch-norm."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        for layer in self.layers:
            if isinstance(layer, (Conv3D, FullyConnected)):
                layer.params["W"] = glorot_init(layer.params["W"].shape, rng, self.dtype)
                layer.params["b"] = np.zeros_like(layer.params["b"], dtype=self.dtype)
            else:
                layer.astype(self.dtype)
        return self

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = dtype
        return self

    def state_dict(self) -> dict[tuple[int, str], np.ndarray]:
        state = {k: v.copy() for k, v in self.named_parameters()}
        state.update({k: v.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state) -> None:
        for (i, name), value in state.items():
            layer = self.layers[i]
            target = layer.params if name in layer.params else layer.buffers
            if target[name].shape != value.shape:
                raise ShapeMismatch(f"layer {i} {name}: {value.shape} vs {target[name].shape}")
            target[name] = value.copy()

    def copy(self) -> "Network":
        twin = Network(list(self.specs), tuple(self.input_shape), dtype=self.dtype)
        twin.astype(self.dtype)
        twin.load_state_dict(self.state_dict())
        twin.trained = self.trained
        return twin

    # --------------------------------------------------------------- passes
    def forward(self, x, train: bool = False, rng=None) -> np.ndarray:
        """Class probabilities ``(B, 2)``. ``train`` records state for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.input_shape):
            raise ShapeMismatch(f"input {x.shape[1:]} does not match network input {self.input_shape}")
        if train and rng is not None and not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        self._recorded = train
        self._probs = x if train else None
        return x

    def backward(self, labels) -> None:
        """Fill ``layer.grads`` with gradients of the mean cross-entropy."""
        if not self._recorded or self._probs is None:
            raise NoForwardState("backward needs a preceding forward(train=True)")
        labels = np.asarray(labels)
        if len(labels) != len(self._probs):
            raise ShapeMismatch(f"{len(labels)} labels for a batch of {len(self._probs)}")
        dy = softmax_cross_entropy_backward(self._probs, labels)
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            dy = self.layers[i].backward(dy, need_dx=i > 0)
        self._recorded = False
        self._probs = None

    def loss_and_grad(self, x, labels, rng=None) -> float:
        probs = self.forward(x, train=True, rng=rng)
        loss = cross_entropy_loss(probs, labels)
        self.backward(labels)
        return loss

    def gradients(self) -> dict[tuple[int, str], np.ndarray]:
        return {(i, n): self.layers[i].grads[n] for (i, n), _ in self.named_parameters()}

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        """Lesion probability (class 1) for each patch, inference mode."""
        x = np.asarray(x)
        out = np.empty(len(x), dtype=np.float64)
        for start in range(0, len(x), batch_size):
            out[start:start + batch_size] = self.forward(x[start:start + batch_size])[:, 1]
        return out

    def evaluate(self, x, labels, batch_size: int = 256) -> tuple[float, float]:
        """Mean loss and accuracy in inference mode."""
        labels = np.asarray(labels, dtype=np.int64)
        total, correct = 0.0, 0
        for start in range(0, len(x), batch_size):
            probs = self.forward(np.asarray(x[start:start + batch_size]))
            lab = labels[start:start + batch_size]
            total += cross_entropy_loss(probs, lab) * len(lab)
            correct += int((probs.argmax(axis=1) == lab).sum())
        return total / len(labels), correct / len(labels)


def build_network(n_channels: int, p: int = 11, seed=0, dtype=np.float32,
                  specs: list[LayerSpec] | None = None, dropout: float = 0.5) -> Network:
    net = Network(specs or table1_specs(dropout), (n_channels, p, p, p), dtype=dtype)
    return net.initialize(seed)


def count_parameters(network: Network | None, include_batchnorm: bool = True) -> int:
    if network is None:
        return 0
    return network.count_parameters(include_batchnorm)
