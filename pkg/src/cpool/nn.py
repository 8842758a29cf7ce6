"""Layers, LeNet-5 assembly with a swappable pooling slot, and losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .continuous import ContinuousPoolSpec, PoolStrengthSchedule, continuous_pool_forward
from .pooling import PoolWindowSpec, avg_pool, max_pool
from .quantize import QuantizedPoolPlan, grouped_max_pool
from .tensor import ShapeError, Tensor

POOLINGS = ("max", "avg", "continuous_sum", "continuous_max")
HEADS = {"regression_1": 1, "classification_10": 10}


class Layer:
    def params(self) -> dict[str, Tensor]:
        return {}

    def set_param(self, name: str, value: Tensor) -> None:
        if name not in self.params():
            raise KeyError(name)
        setattr(self, name, value)

    def out_shape(self, shape: tuple) -> tuple:
        return shape


def he_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    """Uniform in +-sqrt(6 / fan_in); fan_in is everything but the output axis."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, dtype):
        self.weight = Tensor(he_uniform(rng, (out_ch, in_ch, kernel, kernel), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_ch, 1, 1), dtype=dtype), requires_grad=True)
        self.kernel = kernel

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, shape):
        b, c, h, w = shape
        if c != self.weight.shape[1] or h < self.kernel or w < self.kernel:
            raise ShapeError("conv2d", shape, self.weight.shape)
        return (b, self.weight.shape[0], h - self.kernel + 1, w - self.kernel + 1)


class Dense(Layer):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, dtype):
        self.weight = Tensor(he_uniform(rng, (out_f, in_f, 1, 1), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_f, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.dense(x, self.weight, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, shape):
        if shape[1:] != (self.weight.shape[1], 1, 1):
            raise ShapeError("dense", shape, self.weight.shape)
        return (shape[0], self.weight.shape[0], 1, 1)


class ReLU(Layer):
    def __call__(self, x):
        return T.relu(x)


class Flatten(Layer):
    def __call__(self, x):
        return T.flatten(x)

    def out_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])), 1, 1)


class MaxPool(Layer):
    def __init__(self, spec: PoolWindowSpec = PoolWindowSpec(2, 2)):
        self.spec = spec

    def __call__(self, x):
        return max_pool(x, self.spec)

    def out_shape(self, shape):
        b, c, h, w = shape
        k, s = self.spec.window, self.spec.stride
        return (b, c, (h - k) // s + 1, (w - k) // s + 1)


class AvgPool(MaxPool):
    def __call__(self, x):
        return avg_pool(x, self.spec)


class ContinuousPool(Layer):
    def __init__(self, spec: ContinuousPoolSpec, schedule: PoolStrengthSchedule):
        self.spec = spec
        self.schedule = schedule

    def __call__(self, x):
        return continuous_pool_forward(x, self.spec, self.schedule)

    def params(self):
        return {"schedule": self.schedule.tensor}

    def set_param(self, name, value):
        if name != "schedule":
            raise KeyError(name)
        self.schedule.tensor = value

    def out_shape(self, shape):
        if shape[1] != self.schedule.channels:
            raise ShapeError("continuous_pool", shape, self.schedule.tensor.shape)
        return _downsampled(shape, self.spec.downsample, self.spec.downsample_stride)


class GroupedMaxPool(Layer):
    """Per-channel max-selection windows from a quantized plan, then the original downsample."""

    def __init__(self, plan: QuantizedPoolPlan, downsample: str = "max_pool", stride: int = 2):
        self.plan = plan
        self.downsample = downsample
        self.stride = stride

    def __call__(self, x):
        return grouped_max_pool(x, self.plan, self.stride, self.downsample)

    def out_shape(self, shape):
        if shape[1] != len(self.plan.radii):
            raise ShapeError("grouped_max_pool", shape, (len(self.plan.radii),))
        return _downsampled(shape, self.downsample, self.stride)


class OutputScale(Layer):
    """Fixed ``shift + scale * x`` on the head output; nothing here is trained.

    Regression targets with a large spread would otherwise have to be reached
    by growing every weight, which a small constant Adam step does slowly.
    """

    def __init__(self, shift: float, scale: float):
        self.shift = float(shift)
        self.scale = float(scale)

    def __call__(self, x):
        return T.add(T.scalar_mul(x, self.scale), self.shift)


def _downsampled(shape, mode, stride):
    b, c, h, w = shape
    if mode == "none":
        return shape
    if mode == "subsample":
        return (b, c, -(-h // stride), -(-w // stride))
    return (b, c, (h - stride) // stride + 1, (w - stride) // stride + 1)


class LayerStack:
    """An ordered sequence of named layers."""

    def __init__(self, layers: Sequence[tuple[str, Layer]], meta: dict | None = None):
        self.layers = list(layers)
        self.meta = dict(meta or {})

    def __call__(self, x: Tensor) -> Tensor:
        for _, layer in self.layers:
            x = layer(x)
        return x

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.layers:
            for pname, t in layer.params().items():
                out[f"{lname}.{pname}"] = t
        return out

    def set_params(self, params: dict[str, Tensor]) -> None:
        """Swap in parameter tensors by qualified name (``conv1.weight``)."""
        layers = dict(self.layers)
        for qname, value in params.items():
            lname, pname = qname.rsplit(".", 1)
            current = layers[lname].params()[pname]
            if value.shape != current.shape:
                raise ShapeError(qname, current.shape, value.shape)
            layers[lname].set_param(pname, value)

    def pool_layers(self) -> list[tuple[str, Layer]]:
        return [(n, l) for n, l in self.layers if n.startswith("pool")]

    def check_shapes(self, input_shape: tuple) -> tuple:
        shape = tuple(input_shape)
        for _, layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def replace(self, name: str, layer: Layer):
        self.layers = [(n, layer if n == name else l) for n, l in self.layers]


@dataclass(frozen=True)
class LeNetConfig:
    conv_channels: tuple[int, int] = (6, 16)
    dense: tuple[int, int] = (120, 84)
    iterations: int = 10
    init_strength: float = 0.1
    downsample: str = "max_pool"
    input_size: int = 32
    # regression head only: prediction = output_shift + output_scale * fc3
    output_shift: float = 0.0
    output_scale: float = 1.0


def make_pool(pooling: str, channels: int, cfg: LeNetConfig, dtype) -> Layer:
    if pooling == "max":
        return MaxPool()
    if pooling == "avg":
        return AvgPool()
    if pooling in ("continuous_sum", "continuous_max"):
        spec = ContinuousPoolSpec(iterations=cfg.iterations, variant=pooling.split("_")[1],
                                  downsample=cfg.downsample, downsample_stride=2)
        return ContinuousPool(spec, PoolStrengthSchedule.constant(cfg.iterations, channels,
                                                                  cfg.init_strength, dtype=dtype))
    raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")


def build_lenet5(head: str = "classification_10", pooling: str = "max", seed: int = 0,
                 cfg: LeNetConfig = LeNetConfig(), dtype=np.float32) -> LayerStack:
    """conv-relu-pool x2, then dense 120-84-head with ReLU.

    Conv and dense weights are drawn from ``seed`` in a fixed order, so the
    pooling slot never changes them.
    """
    if head not in HEADS:
        raise ValueError(f"head must be one of {sorted(HEADS)}, got {head!r}")
    rng = np.random.default_rng(seed)
    c1, c2 = cfg.conv_channels
    d1, d2 = cfg.dense
    side = ((cfg.input_size - 4) // 2 - 4) // 2
    conv1 = Conv2d(1, c1, 5, rng, dtype)
    conv2 = Conv2d(c1, c2, 5, rng, dtype)
    fc1 = Dense(c2 * side * side, d1, rng, dtype)
    fc2 = Dense(d1, d2, rng, dtype)
    fc3 = Dense(d2, HEADS[head], rng, dtype)
    stack = LayerStack(
        [
            ("conv1", conv1), ("relu1", ReLU()), ("pool1", make_pool(pooling, c1, cfg, dtype)),
            ("conv2", conv2), ("relu2", ReLU()), ("pool2", make_pool(pooling, c2, cfg, dtype)),
            ("flatten", Flatten()),
            ("fc1", fc1), ("relu3", ReLU()),
            ("fc2", fc2), ("relu4", ReLU()),
            ("fc3", fc3),
        ],
        meta={"head": head, "pooling": pooling, "seed": seed, "iterations": cfg.iterations,
              "conv_channels": f"{c1},{c2}", "dense": f"{d1},{d2}", "downsample": cfg.downsample,
              "input_size": cfg.input_size, "output_shift": repr(cfg.output_shift),
              "output_scale": repr(cfg.output_scale)},
    )
    if (cfg.output_shift, cfg.output_scale) != (0.0, 1.0):
        if head != "regression_1":
            raise ValueError("output scaling applies to the regression head only")
        stack.layers.append(("rescale", OutputScale(cfg.output_shift, cfg.output_scale)))
    stack.check_shapes((1, 1, cfg.input_size, cfg.input_size))
    return stack


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    d = pred - target
    return (d * d).mean()


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the labels; logits are (B, K, 1, 1)."""
    b, k = logits.shape[:2]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise ShapeError("cross_entropy_loss", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.reshape(b, k)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return ((p * (g.reshape(()) / b)).reshape(logits.shape).astype(logits.dtype),)

    return T._record(np.full((1, 1, 1, 1), loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
