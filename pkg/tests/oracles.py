"""Independent brute-force references used by the tests.

Nothing here imports the package's numerical code: loops, BFS and textbook
formulas only, so agreement with the package is evidence rather than
self-consistency.
"""
from __future__ import annotations

import itertools
from collections import deque

import numpy as np

NEIGHBOURS_26 = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]


def conv3d_loops(x, w, b, stride=1, pad=0):
    """Direct 3D cross-correlation of one ``(C, D, H, W)`` sample."""
    c_in, *n = x.shape
    c_out, _, k = w.shape[:3]
    xp = np.zeros([c_in] + [m + 2 * pad for m in n], dtype=np.float64)
    xp[:, pad:pad + n[0], pad:pad + n[1], pad:pad + n[2]] = x
    out = [(m + 2 * pad - k) // stride + 1 for m in n]
    y = np.zeros([c_out] + out)
    for o in range(c_out):
        for i, j, l in itertools.product(*(range(m) for m in out)):
            acc = b[o]
            for c, a, bb, cc in itertools.product(range(c_in), range(k), range(k), range(k)):
                acc += w[o, c, a, bb, cc] * xp[c, i * stride + a, j * stride + bb, l * stride + cc]
            y[o, i, j, l] = acc
    return y


def maxpool_loops(x, size=2, stride=2):
    """Window maxima and first-occurrence argmax (window-local row-major index)."""
    c, *n = x.shape
    out = [(m - size) // stride + 1 for m in n]
    y = np.zeros([c] + out)
    arg = np.zeros([c] + out, dtype=np.int64)
    for ch in range(c):
        for i, j, l in itertools.product(*(range(m) for m in out)):
            best, where = -np.inf, -1
            for t, (a, bb, cc) in enumerate(itertools.product(range(size), repeat=3)):
                v = x[ch, i * stride + a, j * stride + bb, l * stride + cc]
                if v > best:
                    best, where = v, t
            y[ch, i, j, l], arg[ch, i, j, l] = best, where
    return y, arg


def components_bfs(mask):
    """26-connected components as a list of voxel sets, in raster order of first voxel."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp, queue = set(), deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            comp.add(v)
            for d in NEIGHBOURS_26:
                u = tuple(a + e for a, e in zip(v, d))
                if all(0 <= q < s for q, s in zip(u, mask.shape)) and mask[u] and not seen[u]:
                    seen[u] = True
                    queue.append(u)
        comps.append(comp)
    return comps


def voxel_counts_loops(seg, gt):
    tp = fp = fn = 0
    nx, ny, nz = seg.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                s, g = bool(seg[i, j, k]), bool(gt[i, j, k])
                tp += s and g
                fp += s and not g
                fn += g and not s
    return tp, fp, fn


def region_counts_bfs(seg, gt):
    """``(tp_d, fn_d, fp_d)`` with one shared voxel as the detection criterion."""
    seg_c, gt_c = components_bfs(seg), components_bfs(gt)
    seg_all = set().union(*seg_c) if seg_c else set()
    gt_all = set().union(*gt_c) if gt_c else set()
    tp = sum(1 for g in gt_c if g & seg_all)
    fp = sum(1 for s in seg_c if not s & gt_all)
    return tp, len(gt_c) - tp, fp


def pearson_textbook(x, y):
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxx = sum(a * a for a in x)
    syy = sum(b * b for b in y)
    sxy = sum(a * b for a, b in zip(x, y))
    return (n * sxy - sx * sy) / ((n * sxx - sx * sx) ** 0.5 * (n * syy - sy * sy) ** 0.5)


def central_difference(f, arr, index, h):
    """``(f(arr + h e_i) - f(arr - h e_i)) / 2h`` with ``arr`` perturbed in place."""
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def rel_error(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def layer_fd_error(layer, x, rng, params=(), train_kw=None, h=1e-3):
    """FD check of input and parameter gradients of ``sum(layer(x) * r)``."""
    train_kw = train_kw or {}
    r = rng.standard_normal(layer.forward(x.copy(), **train_kw).shape)

    def f():
        return float((layer.forward(x, **train_kw) * r).sum())

    layer.forward(x, train=True, **{k: v for k, v in train_kw.items() if k != "train"})
    dx = layer.backward(r)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        worst = max(worst, rel_error(dx[idx], central_difference(f, x, idx, h)))
    for name in params:
        arr = layer.params[name]
        for idx in np.ndindex(arr.shape):
            worst = max(worst, rel_error(layer.grads[name][idx], central_difference(f, arr, idx, h)))
    return worst
