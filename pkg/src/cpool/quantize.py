"""Turning learned continuous pooling back into per-channel max pooling.

Each channel of a trained layer is probed with a unit impulse; the extent of
the response above half its peak gives a discrete window radius.  Channels
are then regrouped by radius so each group runs one ordinary max filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .continuous import ContinuousPoolSpec, PoolStrengthSchedule, dirac_response, downsample
from .tensor import Tensor

MIN_RADIUS = 1
MAX_RADIUS = 10
PLAN_MAGIC = "CPOOL-PLAN"
PLAN_VERSION = "v1"
METRICS = ("chebyshev", "area")


class PlanFormatError(ValueError):
    pass


class ProbeError(ValueError):
    """The impulse probe was degenerate or touched the probe border."""


@dataclass(frozen=True)
class QuantizedPoolPlan:
    radii: tuple[int, ...]
    permutation: tuple[int, ...] = field(default=())

    def __post_init__(self):
        radii = tuple(int(r) for r in self.radii)
        if any(not MIN_RADIUS <= r <= MAX_RADIUS for r in radii):
            raise ValueError(f"radii must lie in [{MIN_RADIUS}, {MAX_RADIUS}]")
        object.__setattr__(self, "radii", radii)
        if not self.permutation:
            perm = tuple(int(i) for i in np.argsort(radii, kind="stable"))
            object.__setattr__(self, "permutation", perm)
        if sorted(self.permutation) != list(range(len(radii))):
            raise ValueError("permutation must be a bijection on the channels")
        sorted_r = [radii[i] for i in self.permutation]
        if any(a > b for a, b in zip(sorted_r, sorted_r[1:])):
            raise ValueError("permutation must sort channels by radius")

    @property
    def channels(self) -> int:
        return len(self.radii)

    @property
    def inverse(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.argsort(self.permutation))

    @property
    def groups(self) -> list[tuple[int, int, int]]:
        """(radius, start, stop) runs over the permuted channel order."""
        out = []
        sorted_r = [self.radii[i] for i in self.permutation]
        start = 0
        for i in range(1, len(sorted_r) + 1):
            if i == len(sorted_r) or sorted_r[i] != sorted_r[start]:
                out.append((sorted_r[start], start, i))
                start = i
        return out


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def measure_radius(response, threshold_fraction: float = 0.5, metric: str = "chebyshev") -> float:
    """Extent of the supra-threshold region around the probe centre.

    ``chebyshev`` gives the largest Chebyshev distance of any pixel at or
    above ``threshold_fraction * max``; ``area`` gives sqrt(area / pi) of that
    region.
    """
    arr = response.data if isinstance(response, Tensor) else np.asarray(response)
    arr = np.asarray(arr).reshape(arr.shape[-2:]) if arr.ndim > 2 else arr
    h, w = arr.shape
    if h % 2 == 0 or w % 2 == 0:
        raise ValueError(f"response needs odd extents for a unique centre, got {arr.shape}")
    peak = arr.max()
    if not peak > 0:
        raise ProbeError("degenerate probe: response has no positive values")
    mask = arr >= threshold_fraction * peak
    if metric == "area":
        return math.sqrt(mask.sum() / math.pi)
    if metric != "chebyshev":
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    rows, cols = np.nonzero(mask)
    return float(np.maximum(np.abs(rows - h // 2), np.abs(cols - w // 2)).max())


def default_probe_size(spec: ContinuousPoolSpec) -> int:
    # the 3x3 stencil spreads at most one pixel per iteration
    return 2 * spec.iterations + 3


def build_plan(spec: ContinuousPoolSpec, schedule: PoolStrengthSchedule, probe_size: int | None = None,
               threshold_fraction: float = 0.5, metric: str = "chebyshev") -> QuantizedPoolPlan:
    probe_size = probe_size or default_probe_size(spec)
    radii = []
    for c in range(schedule.channels):
        resp = dirac_response(spec, schedule.channel(c), probe_size).data[0, 0]
        peak = resp.max()
        if not peak > 0:
            raise ProbeError(f"degenerate probe on channel {c}")
        border = np.concatenate([resp[0], resp[-1], resp[:, 0], resp[:, -1]])
        if (border >= threshold_fraction * peak).any():
            raise ProbeError(
                f"channel {c}: response reaches the probe border at size {probe_size}; "
                "use a larger probe"
            )
        r = measure_radius(resp, threshold_fraction, metric)
        radii.append(min(max(round_half_away(r), MIN_RADIUS), MAX_RADIUS))
    return QuantizedPoolPlan(tuple(radii))


def grouped_max_pool(x: Tensor, plan: QuantizedPoolPlan, downsample_stride: int = 2,
                     downsample_mode: str = "max_pool") -> Tensor:
    """Max-select each channel with its own window, then downsample.

    Channels are permuted into radius groups, each group is filtered with a
    single window size, and the original order is restored at the end.
    """
    if x.shape[1] != plan.channels:
        raise ValueError(f"plan has {plan.channels} channels, input has {x.shape[1]}")
    xp = T.permute_channels(x, plan.permutation)
    parts = [T.neighborhood_max(T.slice_channels(xp, a, b), r) for r, a, b in plan.groups]
    y = parts[0] if len(parts) == 1 else T.concat_channels(parts)
    y = downsample(y, downsample_mode, downsample_stride)
    return T.permute_channels(y, plan.inverse)


# ---------------------------------------------------------------------------
# plan files
# ---------------------------------------------------------------------------

def format_plan(plan: QuantizedPoolPlan) -> str:
    lines = [f"{PLAN_MAGIC} {PLAN_VERSION} {plan.channels}"]
    lines += [f"{c} {r}" for c, r in enumerate(plan.radii)]
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> QuantizedPoolPlan:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise PlanFormatError("empty plan")
    head = lines[0].split()
    if len(head) != 3 or head[0] != PLAN_MAGIC:
        raise PlanFormatError(f"bad plan header {lines[0]!r}")
    if head[1] != PLAN_VERSION:
        raise PlanFormatError(f"unsupported plan version {head[1]!r}")
    try:
        n = int(head[2])
        pairs = [tuple(int(v) for v in ln.split()) for ln in lines[1:]]
    except ValueError as e:
        raise PlanFormatError(str(e)) from None
    if len(pairs) != n or any(len(p) != 2 for p in pairs):
        raise PlanFormatError(f"expected {n} 'channel radius' lines")
    radii = [0] * n
    seen = set()
    for c, r in pairs:
        if not 0 <= c < n or c in seen:
            raise PlanFormatError(f"bad channel index {c}")
        seen.add(c)
        radii[c] = r
    try:
        return QuantizedPoolPlan(tuple(radii))
    except ValueError as e:
        raise PlanFormatError(str(e)) from None


def write_plan(path, plan: QuantizedPoolPlan) -> None:
    Path(path).write_text(format_plan(plan))


def read_plan(path) -> QuantizedPoolPlan:
    return parse_plan(Path(path).read_text())
