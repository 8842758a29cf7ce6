"""Classic windowed pooling and the standalone strided subsampling step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _record


@dataclass(frozen=True)
class PoolWindowSpec:
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError(f"window and stride must be >= 1, got {self.window}, {self.stride}")


def _windows(x: Tensor, spec: PoolWindowSpec):
    h, w = x.shape[2:]
    if h < spec.window or w < spec.window:
        raise ValueError(f"window {spec.window} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (spec.window, spec.window), axis=(2, 3))
    return win[:, :, :: spec.stride, :: spec.stride]


def output_size(n: int, spec: PoolWindowSpec) -> int:
    return (n - spec.window) // spec.stride + 1


def avg_pool(x: Tensor, spec: PoolWindowSpec = PoolWindowSpec()) -> Tensor:
    win = _windows(x, spec)
    out = win.mean(axis=(4, 5)).astype(x.dtype, copy=False)
    k, s = spec.window, spec.stride
    ho, wo = out.shape[2:]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += share
        return (gx,)

    return _record(out, (x,), bw, "avg_pool")


def max_pool(x: Tensor, spec: PoolWindowSpec = PoolWindowSpec()) -> Tensor:
    """Window maximum; the gradient goes to the first argmax in row-major order."""
    _windows(x, spec)
    k, s = spec.window, spec.stride
    h, w = x.shape[2:]
    ho, wo = output_size(h, spec), output_size(w, spec)
    xd = x.data
    out = xd[:, :, 0 : s * ho : s, 0 : s * wo : s].copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    for n in range(1, k * k):
        i, j = divmod(n, k)
        cand = xd[:, :, i : i + s * ho : s, j : j + s * wo : s]
        m = cand > out
        np.copyto(out, cand, where=m)
        np.copyto(arg, n, where=m)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        for n in range(k * k):
            i, j = divmod(n, k)
            gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.where(arg == n, g, 0)
        return (gx,)

    return _record(out, (x,), bw, "max_pool")


def strided_subsample(x: Tensor, stride: int, anchor: str = "top_left") -> Tensor:
    """Keep the pixels whose coordinates are multiples of ``stride``."""
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    if anchor != "top_left":
        raise ValueError(f"unsupported anchor {anchor!r}")
    s = int(stride)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, ::s, ::s] = g
        return (gx,)

    return _record(np.ascontiguousarray(x.data[:, :, ::s, ::s]), (x,), bw, "subsample")
