"""CNET checkpoints: layer specs, float32 tensors and optional ADADELTA state.

Layout (little-endian)::

    "CNET" | u16 version | u8 input rank | u32 dims... | u32 layer count
    per layer: u8 kind tag | u32 maps, size, stride, pad, units | f64 rate
               | u16 tensor count | tensors
    u8 optimizer flag; if 1: f64 rho | f64 epsilon | u32 entry count
               | per entry: u32 layer index | E[g^2] tensor | E[dx^2] tensor
    tensor: u8 name length | name | u8 rank | u32 dims... | f32 payload (C order)

Parameters come before buffers within a layer, each in insertion order, so
writing a freshly read checkpoint reproduces the file byte for byte.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from ..errors import CheckpointError
from .network import LayerSpec, Network
from .optim import Adadelta, AdadeltaConfig

MAGIC = b"CNET"
VERSION = 1
KIND_TAGS = ("Conv3D", "MaxPool3D", "FullyConnected", "BatchNorm", "Dropout", "ReLU", "Softmax")
_SPEC = struct.Struct("<B5Id")


def _write_tensor(buf, name: str, arr) -> None:
    raw = name.encode("ascii")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<B", len(raw)) + raw)
    buf.write(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
    buf.write(arr.tobytes())


def _read(buf, fmt):
    size = struct.calcsize(fmt)
    data = buf.read(size)
    if len(data) != size:
        raise CheckpointError("checkpoint is truncated")
    return struct.unpack(fmt, data)


def _read_tensor(buf):
    (n,) = _read(buf, "<B")
    name = buf.read(n).decode("ascii")
    (rank,) = _read(buf, "<B")
    shape = _read(buf, f"<{rank}I")
    count = int(np.prod(shape, dtype=np.int64))
    data = buf.read(4 * count)
    if len(data) != 4 * count:
        raise CheckpointError(f"tensor {name!r} is truncated")
    return name, np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def dumps(network: Network, optimizer: Adadelta | None = None) -> bytes:
    buf = io.BytesIO()
    shape = tuple(network.input_shape)
    buf.write(MAGIC + struct.pack("<HB", VERSION, len(shape)))
    buf.write(struct.pack(f"<{len(shape)}II", *shape, len(network.layers)))
    for spec, layer in zip(network.specs, network.layers):
        buf.write(_SPEC.pack(KIND_TAGS.index(spec.kind), spec.maps, spec.size, spec.stride,
                             spec.pad, spec.units, spec.rate))
        tensors = list(layer.params.items()) + list(layer.buffers.items())
        buf.write(struct.pack("<H", len(tensors)))
        for name, arr in tensors:
            _write_tensor(buf, name, arr)
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        entries = sorted(optimizer.state.items())
        buf.write(struct.pack("<BddI", 1, optimizer.cfg.rho, optimizer.cfg.epsilon, len(entries)))
        for (idx, name), (eg2, edx2) in entries:
            buf.write(struct.pack("<I", idx))
            _write_tensor(buf, name, eg2)
            _write_tensor(buf, name, edx2)
    return buf.getvalue()


def loads(data: bytes) -> tuple[Network, Adadelta | None]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a CNET checkpoint (bad magic)")
    version, rank = _read(buf, "<HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported CNET version {version}")
    *shape, n_layers = _read(buf, f"<{rank}II")
    specs, tensors = [], []
    for _ in range(n_layers):
        tag, maps, size, stride, pad, units, rate = _read(buf, _SPEC.format)
        if tag >= len(KIND_TAGS):
            raise CheckpointError(f"unknown layer tag {tag}")
        specs.append(LayerSpec(KIND_TAGS[tag], maps, size, stride, pad, units, rate))
        (count,) = _read(buf, "<H")
        tensors.append([_read_tensor(buf) for _ in range(count)])
    try:
        net = Network(specs, tuple(shape), dtype=np.float32)
    except (ValueError, ArithmeticError) as exc:
        raise CheckpointError(f"inconsistent layer specs: {exc}") from exc
    state = {(i, name): arr for i, group in enumerate(tensors) for name, arr in group}
    expected = {k for k, _ in net.named_parameters()} | {k for k, _ in net.named_buffers()}
    if set(state) != expected:
        raise CheckpointError("checkpoint tensors do not match the layer specs")
    try:
        net.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(str(exc)) from exc
    net.trained = True
    (flag,) = _read(buf, "<B")
    optimizer = None
    if flag:
        rho, eps, count = _read(buf, "<ddI")
        optimizer = Adadelta(AdadeltaConfig(rho, eps))
        for _ in range(count):
            (idx,) = _read(buf, "<I")
            name, eg2 = _read_tensor(buf)
            _, edx2 = _read_tensor(buf)
            optimizer.state[(idx, name)] = (eg2, edx2)
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return net, optimizer


def save_checkpoint(path, network: Network, optimizer: Adadelta | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(network, optimizer))


def load_checkpoint(path) -> tuple[Network, Adadelta | None]:
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        return loads(fh.read())
