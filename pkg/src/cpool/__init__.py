"""Continuous-time pooling for small convolutional networks.

A tape-based autograd core, classic and diffusion-based pooling layers,
receptive-field quantization back to grouped max pooling, LeNet-5 training
on synthetic distance images and MNIST, and a command-line front end.
"""

from .continuous import (
    ContinuousPoolSpec,
    PoolStrengthSchedule,
    continuous_pool_forward,
    diffusion_step_max,
    diffusion_step_sum,
    dirac_response,
)
from .pooling import PoolWindowSpec, avg_pool, max_pool, strided_subsample
from .quantize import QuantizedPoolPlan, build_plan, grouped_max_pool, measure_radius
from .tensor import GradGraph, ShapeError, Tensor, backward, neighborhood_max, no_grad

__version__ = "0.1.0"

__all__ = [
    "ContinuousPoolSpec",
    "GradGraph",
    "PoolStrengthSchedule",
    "PoolWindowSpec",
    "QuantizedPoolPlan",
    "ShapeError",
    "Tensor",
    "avg_pool",
    "backward",
    "build_plan",
    "continuous_pool_forward",
    "diffusion_step_max",
    "diffusion_step_sum",
    "dirac_response",
    "grouped_max_pool",
    "max_pool",
    "measure_radius",
    "neighborhood_max",
    "no_grad",
    "strided_subsample",
]
