"""Central finite-difference checks of reverse-mode gradients (double precision).

Each trial projects the output onto a fixed random tensor so every input
entry gets a distinct, non-trivial partial derivative, then compares the
backward pass against central differences entry by entry.  Errors are
reported norm-wise: ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .continuous import ContinuousPoolSpec, PoolStrengthSchedule, continuous_pool_forward
from .continuous import diffusion_step_max, diffusion_step_sum
from .nn import ContinuousPool, LeNetConfig, ReLU, build_lenet5, mse_loss
from .pooling import PoolWindowSpec, avg_pool, max_pool, strided_subsample
from .tensor import GradGraph, Tensor

STEP = 1e-5
FLOOR = 1e-8
KINK_MARGIN = 1e-4


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.trials} trials, max rel err {self.max_error:.2e} "
                f"(tol {self.tolerance:.0e}), {self.seconds:.1f}s")


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), FLOOR)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def separated(rng: np.random.Generator, shape, low=-2.0, high=2.0) -> np.ndarray:
    """Distinct values in [low, high] with gaps far wider than the difference step.

    Max and ReLU kinks sit at ties and zeros; well separated inputs keep
    ``x +- STEP`` on one smooth piece.
    """
    n = int(np.prod(shape))
    grid = np.linspace(low, high, n + 2)[1:-1]
    jitter = rng.uniform(-0.25, 0.25, n) * (grid[1] - grid[0] if n > 1 else 1.0)
    return (rng.permutation(grid) + jitter).reshape(shape)


def min_neighbor_gap(arr: np.ndarray, reach: int = 1) -> float:
    """Smallest |difference| between two pixels at Chebyshev distance <= ``reach``."""
    h, w = arr.shape[2:]
    gap = np.inf
    for dy in range(reach + 1):
        for dx in range(-reach, reach + 1):
            if dy == 0 and dx <= 0:
                continue
            a = arr[:, :, : h - dy, max(0, -dx) : w - max(0, dx)]
            b = arr[:, :, dy:, max(0, dx) : w - max(0, -dx)]
            diff = np.abs(a - b)
            if diff.size:
                gap = min(gap, float(diff.min()))
    return gap


def analytic_grads(loss_fn: Callable[..., Tensor], arrays: list[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradGraph() as graph:
        loss = loss_fn(*leaves)
    grads = graph.backward(loss)
    return [grads[t] for t in leaves]


def numeric_grads(loss_fn: Callable[..., Tensor], arrays: list[np.ndarray], step: float = STEP) -> list[np.ndarray]:
    out = []
    with T.no_grad():
        for k, arr in enumerate(arrays):
            g = np.zeros_like(arr)
            flat = g.reshape(-1)
            for i in range(arr.size):
                vals = []
                for sign in (1.0, -1.0):
                    pert = arr.copy().reshape(-1)
                    pert[i] += sign * step
                    args = [Tensor(a) for a in arrays]
                    args[k] = Tensor(pert.reshape(arr.shape))
                    vals.append(loss_fn(*args).item())
                flat[i] = (vals[0] - vals[1]) / (2 * step)
            out.append(g)
    return out


def check(loss_fn, arrays) -> float:
    a = np.concatenate([g.reshape(-1) for g in analytic_grads(loss_fn, arrays)])
    n = np.concatenate([g.reshape(-1) for g in numeric_grads(loss_fn, arrays)])
    return rel_error(a, n)


def projected(fn: Callable[..., Tensor], weight: np.ndarray) -> Callable[..., Tensor]:
    w = Tensor(weight)
    return lambda *xs: T.sum_all(fn(*xs) * w)


def _run(name: str, trials: int, tol: float, make_trial) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    for t in range(trials):
        worst = max(worst, make_trial(t))
    return CheckResult(name, trials, worst, tol, time.perf_counter() - start)


def primitive_suite(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    """Every tensor-core primitive and both classic pooling operators."""
    rng = np.random.default_rng(seed)
    shape = (2, 2, 4, 4)

    def unary(fn, shape=shape):
        def trial(_):
            x = separated(rng, shape)
            w = rng.uniform(-1, 1, fn(Tensor(x)).shape)
            return check(projected(fn, w), [x])
        return trial

    def binary(fn):
        def trial(_):
            a, b = separated(rng, shape), separated(rng, shape)
            w = rng.uniform(-1, 1, shape)
            return check(projected(fn, w), [a, b])
        return trial

    scale = float(rng.uniform(-2, 2))
    strengths = rng.uniform(0.05, 0.95, (3, 2, 1, 1))
    return [
        _run("add", trials, 1e-4, binary(T.add)),
        _run("sub", trials, 1e-4, binary(T.sub)),
        _run("mul", trials, 1e-4, binary(T.mul)),
        _run("max2", trials, 1e-4, binary(T.max2)),
        _run("scalar_mul", trials, 1e-4, unary(lambda x: T.scalar_mul(x, scale))),
        _run("relu", trials, 1e-4, unary(T.relu)),
        _run("advance", trials, 1e-4, binary(T.advance)),
        _run("shift", trials, 1e-4, unary(lambda x: T.shift(x, 1, -2))),
        _run("neighborhood_max r1", trials, 1e-4, unary(lambda x: T.neighborhood_max(x, 1))),
        _run("neighborhood_max r2", trials, 1e-4, unary(lambda x: T.neighborhood_max(x, 2))),
        _run("neighbor_excess_sum", trials, 1e-4, unary(T.neighbor_excess_sum)),
        _run("channel_scale", trials, 1e-4, unary(lambda x: T.channel_scale(x, Tensor(strengths), 1))),
        _run("relax_toward", trials, 1e-4,
             binary(lambda a, b: T.relax_toward(a, b, Tensor(strengths), 2))),
        _run("conv2d", trials, 1e-4, _conv_trial(rng)),
        _run("dense", trials, 1e-4, _dense_trial(rng)),
        _run("max_pool 2/2", trials, 1e-4, unary(lambda x: max_pool(x, PoolWindowSpec(2, 2)))),
        _run("max_pool 3/2", trials, 1e-4, unary(lambda x: max_pool(x, PoolWindowSpec(3, 2)))),
        _run("avg_pool 3/2", trials, 1e-4, unary(lambda x: avg_pool(x, PoolWindowSpec(3, 2)))),
        _run("strided_subsample", trials, 1e-4, unary(lambda x: strided_subsample(x, 2))),
    ]


def _conv_trial(rng):
    def trial(_):
        x = separated(rng, (2, 2, 6, 5))
        w = rng.uniform(-1, 1, (3, 2, 3, 2))
        b = rng.uniform(-1, 1, (1, 3, 1, 1))
        proj = rng.uniform(-1, 1, (2, 3, 4, 4))
        return check(projected(T.conv2d, proj), [x, w, b])
    return trial


def _dense_trial(rng):
    def trial(_):
        x = rng.uniform(-2, 2, (3, 5, 1, 1))
        w = rng.uniform(-1, 1, (4, 5, 1, 1))
        b = rng.uniform(-1, 1, (1, 4, 1, 1))
        proj = rng.uniform(-1, 1, (3, 4, 1, 1))
        return check(projected(T.dense, proj), [x, w, b])
    return trial


def diffusion_suite(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    """Both step variants and the full N-step layer, w.r.t. inputs and strengths."""
    rng = np.random.default_rng(seed)
    results = []
    for variant, step_fn, s_high in (("sum", diffusion_step_sum, 0.125), ("max", diffusion_step_max, 1.0)):
        def step_trial(_, step_fn=step_fn, s_high=s_high):
            x = separated(rng, (2, 2, 5, 6))
            s = rng.uniform(0.02, s_high, (1, 2, 1, 1))
            w = rng.uniform(-1, 1, x.shape)
            return check(projected(lambda xx, ss: step_fn(xx, ss, 0), w), [x, s])

        def layer_trial(_, variant=variant, s_high=s_high):
            n = int(rng.integers(1, 6))
            spec = ContinuousPoolSpec(iterations=n, variant=variant)
            # iterating pulls neighbours together; redraw until no two come
            # close enough for a difference step to straddle a kink
            while True:
                x = separated(rng, (1, 2, 8, 8))
                s = rng.uniform(0.02, s_high, (n, 2, 1, 1))
                if trajectory_gap(x, s, variant) > KINK_MARGIN:
                    break
            w = rng.uniform(-1, 1, (1, 2, 4, 4))

            def fn(xx, ss):
                sched = PoolStrengthSchedule(ss.data, requires_grad=False)
                sched.tensor = ss
                return continuous_pool_forward(xx, spec, sched)
            return check(projected(fn, w), [x, s])

        results.append(_run(f"diffusion_step_{variant}", trials, 1e-4, step_trial))
        results.append(_run(f"continuous_pool {variant} N<=5 8x8", trials, 1e-4, layer_trial))
    return results


def trajectory_gap(x: np.ndarray, s: np.ndarray, variant: str) -> float:
    """Closest approach of two pixels that one step or the final 2x2 max compares."""
    step = diffusion_step_sum if variant == "sum" else diffusion_step_max
    # the max step ranks a whole 3x3 window, whose members sit up to 2 apart
    reach = 1 if variant == "sum" else 2
    gap = min_neighbor_gap(x, reach)
    xt = Tensor(x)
    with T.no_grad():
        for t in range(s.shape[0]):
            xt = step(xt, Tensor(s), t)
            gap = min(gap, min_neighbor_gap(xt.data, reach))
    return gap


def kink_pattern(model, images: np.ndarray) -> tuple[np.ndarray, Tensor]:
    """Forward pass that also records which side of every ReLU zero and every
    pooling comparison it lands on.  Points with equal patterns lie on the
    same smooth piece of the network."""
    parts = []
    x = Tensor(images)
    with T.no_grad():
        for _, layer in model.layers:
            if isinstance(layer, ReLU):
                parts.append(x.data > 0)
            elif isinstance(layer, ContinuousPool):
                step = diffusion_step_sum if layer.spec.variant == "sum" else diffusion_step_max
                reach = 1 if layer.spec.variant == "sum" else 2
                s = layer.schedule.tensor
                xt = x
                for t in range(s.shape[0] + 1):
                    parts.extend(_pair_signs(xt.data, reach))
                    if t < s.shape[0]:
                        xt = step(xt, s, t)
            x = layer(x)
    return np.concatenate([p.reshape(-1) for p in parts]), x


def _pair_signs(arr: np.ndarray, reach: int) -> list[np.ndarray]:
    h, w = arr.shape[2:]
    out = []
    for dy in range(reach + 1):
        for dx in range(-reach, reach + 1):
            if dy == 0 and dx <= 0:
                continue
            a = arr[:, :, : h - dy, max(0, -dx) : w - max(0, dx)]
            b = arr[:, :, dy:, max(0, dx) : w - max(0, -dx)]
            d = a - b
            # structurally equal pixels can differ by rounding; that is not a kink
            d[np.abs(d) <= 1e-12 * (np.abs(a) + np.abs(b))] = 0
            out.append(np.sign(d).astype(np.int8))
    return out


TINY_LENET = LeNetConfig(conv_channels=(2, 4), dense=(8, 8), iterations=3)


def lenet_suite(trials: int = 100, seed: int = 0, variant: str = "max") -> list[CheckResult]:
    """Tiny LeNet with continuous pooling: one full per-parameter check plus
    ``trials`` derivatives along random unit directions in parameter space.

    A 32x32 pass makes thousands of pooling comparisons, so some probe always
    lands within a step of a tie.  Differences are therefore taken only
    between points on the base point's smooth piece: one-sided where a single
    side crosses a kink, and directions are redrawn until neither does.
    """
    rng = np.random.default_rng(seed)
    model = build_lenet5("regression_1", f"continuous_{variant}", seed, TINY_LENET, dtype=np.float64)
    names = list(model.named_params())
    base = [p.data for p in model.named_params().values()]
    # lift the strengths off their shared init so channels differ, and the
    # biases off zero: a unit whose inputs are all dead would otherwise sit
    # exactly on its ReLU kink
    for i, n in enumerate(names):
        if n.endswith(".schedule"):
            hi = 0.125 if variant == "sum" else 1.0
            base[i] = rng.uniform(0.05, hi, base[i].shape)
        elif n.endswith(".bias"):
            fan_in = int(np.prod(base[i - 1].shape[1:]))
            base[i] = rng.uniform(-1, 1, base[i].shape) / np.sqrt(fan_in)
    images = separated(rng, (2, 1, 32, 32), 0.0, 1.0)
    targets = Tensor(rng.uniform(0, 50, (2, 1, 1, 1)))

    def loss_fn(*params):
        model.set_params(dict(zip(names, params)))
        return mse_loss(model(Tensor(images)), targets)

    def probe(params):
        model.set_params({n: Tensor(p) for n, p in zip(names, params)})
        with T.no_grad():
            pattern, out = kink_pattern(model, images)
            return pattern, mse_loss(out, targets).item()

    ref, f0 = probe(base)
    skipped = 0

    def full_trial(_):
        nonlocal skipped
        analytic = np.concatenate([g.reshape(-1) for g in analytic_grads(loss_fn, base)])
        numeric = np.full_like(analytic, np.nan)
        j = 0
        for k, arr in enumerate(base):
            for i in range(arr.size):
                sides = []
                for sign in (1.0, -1.0):
                    pert = list(base)
                    pert[k] = arr.copy()
                    pert[k].reshape(-1)[i] += sign * STEP
                    pattern, f = probe(pert)
                    sides.append(f if np.array_equal(pattern, ref) else None)
                up, dn = sides
                if up is not None and dn is not None:
                    numeric[j] = (up - dn) / (2 * STEP)
                elif up is not None:
                    numeric[j] = (up - f0) / STEP
                elif dn is not None:
                    numeric[j] = (f0 - dn) / STEP
                j += 1
        keep = ~np.isnan(numeric)
        skipped = int((~keep).sum())
        return rel_error(analytic[keep], numeric[keep])

    def directional_trial(_):
        for _ in range(100):
            direction = [rng.normal(size=a.shape) for a in base]
            norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
            direction = [d / norm for d in direction]
            (p_up, up), (p_dn, dn) = (probe([b + sign * STEP * d for b, d in zip(base, direction)])
                                      for sign in (1.0, -1.0))
            if np.array_equal(p_up, ref) and np.array_equal(p_dn, ref):
                break
        else:
            raise RuntimeError("no kink-free direction found")
        grads = analytic_grads(loss_fn, base)
        a = sum(float((g * d).sum()) for g, d in zip(grads, direction))
        return rel_error(np.array([a]), np.array([(up - dn) / (2 * STEP)]))

    full = _run(f"tiny LeNet ({variant}) all parameters", 1, 1e-3, full_trial)
    full.name += f" ({skipped} of {sum(a.size for a in base)} straddle kinks both ways, skipped)"
    return [full, _run(f"tiny LeNet ({variant}) directional", trials, 1e-3, directional_trial)]


def full_suite(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    return primitive_suite(trials, seed) + diffusion_suite(trials, seed) + lenet_suite(trials, seed)
