"""Whole-volume evaluation of a patch classifier without extracting patches.

Scoring every voxel of a volume patch by patch repeats almost all of the
convolution work, since neighbouring patches overlap. Here every spatial
layer is evaluated once per *position type*: along one axis, two local
positions of a layer have the same type when their receptive structure
(which taps fall on patch padding, which inputs they pool) is identical up
to translation. A type's activations are then a dense map over the volume,
indexed by the anchor voxel ``v - h + stride * j`` of local index ``j`` in
the patch centred on ``v``. Types factor over the three axes, so a layer
needs one dense map per combination of per-axis types.

The result equals the patch-by-patch forward pass up to float rounding.
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import ShapeMismatch
from .layers import BatchNorm, Conv3D, Dropout, FullyConnected, MaxPool3D, ReLU, Softmax


class _AxisTypes:
    """Per-axis type tables for the spatial layers of a network."""

    def __init__(self, p, spatial):
        self.sizes = [p]
        self.strides = [1]
        self.types = [[0] * p]
        self.keys = [[None]]
        for layer in spatial:
            n, types, s = self.sizes[-1], self.types[-1], self.strides[-1]
            if isinstance(layer, Conv3D):
                k, st, pad = layer.size, layer.stride, layer.pad
                n_out = (n + 2 * pad - k) // st + 1
                raw = [tuple(types[i] if 0 <= i < n else -1
                             for i in (j * st - pad + t for t in range(k))) for j in range(n_out)]
                offsets = [s * (t - pad) for t in range(k)]
            else:
                k, st = layer.size, layer.stride
                n_out = (n - k) // st + 1
                raw = [tuple(types[j * st + t] for t in range(k)) for j in range(n_out)]
                offsets = [s * t for t in range(k)]
            keys = sorted(set(raw))
            self.keys.append(keys)
            self.types.append([keys.index(r) for r in raw])
            self.sizes.append(n_out)
            self.strides.append(s * st)
            self._offsets = getattr(self, "_offsets", []) + [offsets]

    def offsets(self, level):
        """Anchor offsets of the taps feeding level ``level`` (1-based)."""
        return self._offsets[level - 1]

    def domains(self, v0, v1, half):
        """Anchor intervals ``[lo, hi)`` each type must cover, per level."""
        top = len(self.sizes) - 1
        need = [dict() for _ in self.sizes]
        s_top = self.strides[top]
        for j, tau in enumerate(self.types[top]):
            _grow(need[top], tau, v0 - half + s_top * j, v1 - half + s_top * j)
        for level in range(top, 0, -1):
            offs = self.offsets(level)
            for tau, (lo, hi) in need[level].items():
                for t, src in enumerate(self.keys[level][tau]):
                    if src != -1:
                        _grow(need[level - 1], src, lo + offs[t], hi + offs[t])
        return need


def _grow(table, key, lo, hi):
    if key in table:
        a, b = table[key]
        table[key] = (min(a, lo), max(b, hi))
    else:
        table[key] = (lo, hi)


def _split(network):
    spatial, stages, head = [], [[]], []
    in_head = False
    for layer in network.layers:
        if isinstance(layer, FullyConnected):
            in_head = True
        if in_head:
            head.append(layer)
        elif isinstance(layer, (Conv3D, MaxPool3D)):
            spatial.append(layer)
            stages.append([])
        elif isinstance(layer, (BatchNorm, ReLU, Dropout)):
            stages[-1].append(layer)
        else:
            raise ShapeMismatch(f"{layer.kind} cannot precede the first fully-connected layer")
    if not head:
        raise ShapeMismatch("network has no fully-connected head")
    return spatial, stages, head


# BLAS kernels handle a ragged last column tile with different code, which can
# change float rounding there. Padding every product to a whole number of tiles
# keeps each voxel's result independent of how the volume is chunked.
_COL_TILE = 64


def _matmul(a, b):
    n = b.shape[1]
    pad = -n % _COL_TILE
    if pad:
        b = np.concatenate([b, np.zeros((b.shape[0], pad), b.dtype)], axis=1)
    return (a @ b)[:, :n]


def _elementwise(x, layers):
    """Inference-mode BN / ReLU / dropout on a channel-first map."""
    for layer in layers:
        if isinstance(layer, BatchNorm):
            scale, shift = layer.affine()
            shape = (-1,) + (1,) * (x.ndim - 1)
            x *= scale.astype(x.dtype).reshape(shape)
            x += shift.astype(x.dtype).reshape(shape)
        elif isinstance(layer, ReLU):
            np.maximum(x, 0, out=x)
    return x


def dense_probability(network, stack: np.ndarray, z_chunk: int | None = None) -> np.ndarray:
    """Class-1 probability for the patch centred on every voxel of ``stack``.

    ``stack`` is ``(c, nx, ny, nz)``; out-of-volume patch voxels are zero, as
    in patch extraction. ``z_chunk`` bounds memory by processing slabs of
    centre voxels along z.
    """
    c, p = network.input_shape[0], network.input_shape[1]
    if stack.ndim != 4 or stack.shape[0] != c:
        raise ShapeMismatch(f"stack {stack.shape} does not match network input {network.input_shape}")
    dtype = network.dtype
    spatial, stages, head = _split(network)
    axes = _AxisTypes(p, spatial)
    half = (p - 1) // 2
    nx, ny, nz = stack.shape[1:]
    z_chunk = z_chunk or nz
    out = np.empty((nx, ny, nz), dtype=np.float32)
    for z0 in range(0, nz, z_chunk):
        z1 = min(z0 + z_chunk, nz)
        out[:, :, z0:z1] = _dense_block(stack, axes, spatial, stages, head, half,
                                         ((0, nx), (0, ny), (z0, z1)), dtype)
    return out


def _input_map(stack, lo_hi, dtype):
    c = stack.shape[0]
    shape = tuple(hi - lo for lo, hi in lo_hi)
    m = np.zeros((c,) + shape, dtype=dtype)
    src, dst = [], []
    for (lo, hi), n in zip(lo_hi, stack.shape[1:]):
        a, b = max(lo, 0), min(hi, n)
        if a >= b:
            return m
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    m[(slice(None), *dst)] = stack[(slice(None), *src)]
    return m


def _dense_block(stack, axes, spatial, stages, head, half, ranges, dtype):
    needs = [axes.domains(v0, v1, half) for v0, v1 in ranges]
    top = len(axes.sizes) - 1

    # level 0: one type per axis, the zero-padded input
    maps = {(0, 0, 0): (_input_map(stack, [n[0][0] for n in needs], dtype),
                        tuple(n[0][0][0] for n in needs))}
    _elementwise(maps[(0, 0, 0)][0], stages[0])

    for level in range(1, top + 1):
        layer = spatial[level - 1]
        offs = axes.offsets(level)
        keys = axes.keys[level]
        new_maps = {}
        for combo in itertools.product(*(sorted(n[level]) for n in needs)):
            los = tuple(n[level][t][0] for n, t in zip(needs, combo))
            shape = tuple(n[level][t][1] - n[level][t][0] for n, t in zip(needs, combo))
            taps = []
            for tap in itertools.product(range(len(offs)), repeat=3):
                srcs = tuple(keys[t][k] for t, k in zip(combo, tap))
                if -1 in srcs:
                    continue
                src_map, src_lo = maps[srcs]
                sl = tuple(slice(lo + offs[k] - slo, lo + offs[k] - slo + n)
                           for lo, k, slo, n in zip(los, tap, src_lo, shape))
                taps.append((tap, src_map[(slice(None), *sl)]))
            if isinstance(layer, Conv3D):
                W = layer.params["W"].astype(dtype, copy=False)
                cols = np.concatenate([v.reshape(v.shape[0], -1) for _, v in taps], axis=0)
                wmat = np.concatenate([W[:, :, a, b, cc] for (a, b, cc), _ in taps], axis=1)
                res = _matmul(wmat, cols).reshape((W.shape[0],) + shape)
                res += layer.params["b"].astype(dtype).reshape(-1, 1, 1, 1)
            else:
                res = taps[0][1].copy()
                for _, v in taps[1:]:
                    np.maximum(res, v, out=res)
            new_maps[combo] = (_elementwise(res, stages[level]), los)
        maps = new_maps

    # gather the flattened feature vector of every centre voxel
    n_top, s_top = axes.sizes[top], axes.strides[top]
    types = axes.types[top]
    counts = tuple(hi - lo for lo, hi in ranges)
    channels = next(iter(maps.values()))[0].shape[0]
    feats = np.empty((channels, n_top, n_top, n_top) + counts, dtype=dtype)
    for j in itertools.product(range(n_top), repeat=3):
        m, lo = maps[tuple(types[k] for k in j)]
        sl = tuple(slice(v0 - half + s_top * jj - l, v0 - half + s_top * jj - l + cnt)
                   for (v0, _), jj, l, cnt in zip(ranges, j, lo, counts))
        feats[(slice(None), *j)] = m[(slice(None), *sl)]
    x = feats.reshape(channels * n_top ** 3, -1)

    for layer in head:
        if isinstance(layer, FullyConnected):
            x = _matmul(layer.params["W"].astype(dtype, copy=False), x)
            x += layer.params["b"].astype(dtype)[:, None]
        elif isinstance(layer, Softmax):
            x = x - x.max(axis=0, keepdims=True)
            np.exp(x, out=x)
            x /= x.sum(axis=0, keepdims=True)
        else:
            x = _elementwise(x, [layer])
    return x[1].reshape(counts)
