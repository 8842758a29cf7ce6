"""Continuous-time pooling: max propagation by explicit Euler diffusion steps.

Each iteration moves every pixel toward larger values in its 3x3
neighbourhood, scaled by a learnable per-channel pooling strength.  After a
fixed number of iterations an ordinary downsampling stage makes the layer a
drop-in replacement for max pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .pooling import PoolWindowSpec, avg_pool, max_pool, strided_subsample
from .tensor import Tensor

VARIANTS = ("sum", "max")
DOWNSAMPLES = ("max_pool", "avg_pool", "subsample", "none")
NEIGHBOR_OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))
DEFAULT_INIT = 0.1


@dataclass(frozen=True)
class ContinuousPoolSpec:
    iterations: int = 10
    variant: str = "max"
    downsample: str = "max_pool"
    downsample_stride: int = 2
    boundary: str = "replicate"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.downsample not in DOWNSAMPLES:
            raise ValueError(f"downsample must be one of {DOWNSAMPLES}, got {self.downsample!r}")
        if self.downsample_stride < 1:
            raise ValueError("downsample_stride must be >= 1")
        if self.boundary != "replicate":
            raise ValueError(f"unsupported boundary {self.boundary!r}")
        if self.downsample == "none" and self.downsample_stride != 1:
            object.__setattr__(self, "downsample_stride", 1)


class PoolStrengthSchedule:
    """Learnable strengths indexed (iteration, channel), stored as (N, C, 1, 1).

    Values are never clamped; trained strengths may leave the stable range.
    """

    def __init__(self, values, requires_grad: bool = True, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.ndim == 2:
            arr = arr[:, :, None, None]
        if arr.ndim != 4 or arr.shape[2:] != (1, 1):
            raise ValueError(f"schedule must be (N, C) or (N, C, 1, 1), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("schedule entries must be finite")
        self.tensor = Tensor(arr, requires_grad=requires_grad)

    @classmethod
    def constant(cls, iterations: int, channels: int, value: float = DEFAULT_INIT,
                 dtype=np.float64, requires_grad: bool = True):
        return cls(np.full((iterations, channels), value, dtype=dtype), requires_grad, dtype)

    @property
    def iterations(self) -> int:
        return self.tensor.shape[0]

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data[:, :, 0, 0]

    def channel(self, c: int) -> "PoolStrengthSchedule":
        return PoolStrengthSchedule(self.values[:, c : c + 1], requires_grad=False)


def _strength_tensor(strengths, channels: int, dtype) -> Tensor:
    if isinstance(strengths, PoolStrengthSchedule):
        strengths = strengths.tensor
    if not isinstance(strengths, Tensor):
        arr = np.asarray(strengths, dtype=dtype).reshape(-1)
        if arr.size != channels:
            raise ValueError(f"expected {channels} strengths, got {arr.size}")
        strengths = Tensor(arr.reshape(1, -1, 1, 1))
    if strengths.shape[1] != channels:
        raise ValueError(f"expected {channels} strengths, got {strengths.shape[1]}")
    return strengths


def diffusion_step_sum(x: Tensor, strengths, row: int = 0) -> Tensor:
    """``x + P_S * sum_k relu(x_k - x)`` over the 8 neighbours.

    Border pixels sum only over neighbours inside the image; a replicated
    ghost would add nothing along an edge but would double count the real
    neighbour behind each missing diagonal.
    """
    s = _strength_tensor(strengths, x.shape[1], x.dtype)
    return T.advance(x, T.channel_scale(T.neighbor_excess_sum(x), s, row))


def diffusion_step_max(x: Tensor, strengths, row: int = 0) -> Tensor:
    """``x + P_S * max_k relu(x_k - x)`` over the 3x3 neighbourhood.

    The window includes the centre, so the largest positive difference is
    exactly ``dilate(x) - x``.
    """
    s = _strength_tensor(strengths, x.shape[1], x.dtype)
    return T.relax_toward(x, T.neighborhood_max(x, 1), s, row)


_STEPS = {"sum": diffusion_step_sum, "max": diffusion_step_max}


def downsample(x: Tensor, mode: str, stride: int) -> Tensor:
    if mode == "none":
        return x
    if mode == "max_pool":
        return max_pool(x, PoolWindowSpec(stride, stride))
    if mode == "avg_pool":
        return avg_pool(x, PoolWindowSpec(stride, stride))
    if mode == "subsample":
        return strided_subsample(x, stride)
    raise ValueError(f"unknown downsample {mode!r}")


def diffuse(x: Tensor, spec: ContinuousPoolSpec, schedule: PoolStrengthSchedule) -> Tensor:
    """Run the N Euler iterations without downsampling."""
    if schedule.iterations != spec.iterations or schedule.channels != x.shape[1]:
        raise ValueError(
            f"schedule extents ({schedule.iterations}, {schedule.channels}) do not match "
            f"iterations={spec.iterations}, channels={x.shape[1]}"
        )
    step = _STEPS[spec.variant]
    for t in range(spec.iterations):
        x = step(x, schedule.tensor, t)
    return x


def continuous_pool_forward(x: Tensor, spec: ContinuousPoolSpec,
                            schedule: PoolStrengthSchedule) -> Tensor:
    return downsample(diffuse(x, spec, schedule), spec.downsample, spec.downsample_stride)


def dirac_image(size: int, dtype=np.float64) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"probe size must be a positive odd integer, got {size}")
    img = np.zeros((1, 1, size, size), dtype=dtype)
    img[0, 0, size // 2, size // 2] = 1.0
    return img


def dirac_response(spec: ContinuousPoolSpec, schedule: PoolStrengthSchedule, size: int) -> Tensor:
    """Impulse response of a single-channel layer on a size x size probe."""
    if schedule.channels != 1:
        raise ValueError("dirac_response probes one channel; select it with schedule.channel(c)")
    spec = replace(spec, downsample="none", downsample_stride=1)
    probe = Tensor(dirac_image(size, dtype=schedule.tensor.dtype))
    with T.no_grad():
        return continuous_pool_forward(probe, spec, schedule)
