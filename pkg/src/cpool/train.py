"""Seeded mini-batch training, evaluation and model (de)serialization."""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .continuous import PoolStrengthSchedule
from .nn import ContinuousPool, GroupedMaxPool, LayerStack, LeNetConfig, build_lenet5, cross_entropy_loss, mse_loss
from .optim import OptimizerState, optimizer_step
from .quantize import QuantizedPoolPlan, build_plan
from .tensor import GradGraph, Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A loss or metric became NaN or infinite."""


@dataclass
class HistoryRow:
    step: int
    train_loss: float
    eval_metric: float


def task_loss(task, pred: Tensor, targets) -> Tensor:
    if task.metric_name == "mse":
        return mse_loss(pred, Tensor(np.asarray(targets, dtype=pred.dtype)))
    return cross_entropy_loss(pred, targets)


def _forward(model: LayerStack, images: np.ndarray) -> np.ndarray:
    # no_grad lives in a context variable, so each worker thread enters it itself
    with T.no_grad():
        return model(Tensor(images)).data


def predict(model: LayerStack, images: np.ndarray, batch: int = 100, workers: int = 1) -> np.ndarray:
    """Forward ``images`` in batches; ``workers > 1`` runs batches on a thread pool.

    Each batch is an independent graph, so the outputs are identical either
    way; only the order in which batches finish changes.
    """
    chunks = [images[start : start + batch] for start in range(0, len(images), batch)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda c: _forward(model, c), chunks))
    else:
        outs = [_forward(model, c) for c in chunks]
    return np.concatenate(outs, axis=0)


def evaluate(model: LayerStack, task, images: np.ndarray, targets, batch: int = 100, workers: int = 1) -> float:
    """Mean squared error for regression tasks, accuracy in [0, 1] for classification."""
    out = predict(model, images, batch, workers)
    if task.metric_name == "mse":
        return float(np.mean((out.astype(np.float64) - np.asarray(targets, dtype=np.float64)) ** 2))
    return float(np.mean(out.reshape(len(out), -1).argmax(axis=1) == np.asarray(targets)))


def train_step(model: LayerStack, task, images: Tensor, targets, opt: OptimizerState) -> float:
    params = model.named_params()
    with GradGraph() as graph:
        loss = task_loss(task, model(images), targets)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss at step {opt.step + 1}")
    grads = graph.backward(loss)
    optimizer_step(params, {n: grads[p] for n, p in params.items()}, opt)
    return value


def train(model: LayerStack, task, opt: OptimizerState, batch_size: int = 32, steps: int = 2000,
          eval_every: int = 100, eval_size: int | None = 1000, seed: int = 0,
          eval_set=None, workers: int = 1) -> list[HistoryRow]:
    """Run ``steps`` optimizer steps; evaluate at step 0, every ``eval_every`` steps and at the end.

    The training stream and the held-out evaluation set are drawn from
    independent children of ``seed``.
    """
    data_seed, eval_seed = np.random.SeedSequence(seed).spawn(2)
    if eval_set is None:
        eval_set = task.eval_set(eval_size, np.random.default_rng(eval_seed))
    images_e, targets_e = eval_set
    history = [HistoryRow(0, float("nan"), evaluate(model, task, images_e, targets_e, workers=workers))]
    batches = task.train_batches(batch_size, np.random.default_rng(data_seed))
    running = []
    for step in range(1, steps + 1):
        images, targets = next(batches)
        running.append(train_step(model, task, images, targets, opt))
        if step % eval_every == 0 or step == steps:
            metric = evaluate(model, task, images_e, targets_e, workers=workers)
            if not math.isfinite(metric):
                raise NumericError(f"non-finite eval metric at step {step}")
            history.append(HistoryRow(step, float(np.mean(running)), metric))
            log.info("step %d loss %.4f %s %.4f", step, history[-1].train_loss, task.metric_name, metric)
            running = []
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_meta(model: LayerStack) -> dict:
    meta = dict(model.meta)
    for name, layer in model.pool_layers():
        if isinstance(layer, ContinuousPool):
            meta[f"{name}.variant"] = layer.spec.variant
        if isinstance(layer, GroupedMaxPool):
            meta[f"{name}.downsample"] = layer.downsample
    return meta


def save_model(path, model: LayerStack, extra_meta: dict | None = None) -> None:
    meta = model_meta(model)
    meta.update(extra_meta or {})
    tensors = {k: v.data for k, v in model.named_params().items()}
    for name, layer in model.pool_layers():
        if isinstance(layer, GroupedMaxPool):
            tensors[f"{name}.radii"] = np.asarray(layer.plan.radii, dtype=np.float64).reshape(-1, 1, 1, 1)
    save_checkpoint(path, meta, tensors)


def load_model(path, dtype=np.float32) -> tuple[LayerStack, dict]:
    meta, tensors = load_checkpoint(path)
    try:
        c1, c2 = (int(v) for v in meta["conv_channels"].split(","))
        d1, d2 = (int(v) for v in meta["dense"].split(","))
        cfg = LeNetConfig(conv_channels=(c1, c2), dense=(d1, d2), iterations=int(meta["iterations"]),
                          downsample=meta.get("downsample", "max_pool"),
                          input_size=int(meta.get("input_size", 32)),
                          output_shift=float(meta.get("output_shift", 0.0)),
                          output_scale=float(meta.get("output_scale", 1.0)))
        pooling = meta["pooling"]
        base = "max" if pooling == "quantized" else pooling
        model = build_lenet5(meta["head"], base, int(meta["seed"]), cfg, dtype)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: bad checkpoint metadata ({e})") from None
    model.meta = dict(meta)
    if pooling == "quantized":
        for name, _ in model.pool_layers():
            radii = tensors.pop(f"{name}.radii", None)
            if radii is None:
                raise CheckpointError(f"{path}: missing {name}.radii")
            plan = QuantizedPoolPlan(tuple(int(r) for r in radii.reshape(-1)))
            model.replace(name, GroupedMaxPool(plan, meta.get(f"{name}.downsample", cfg.downsample), 2))
    params = model.named_params()
    if set(params) != set(tensors):
        raise CheckpointError(f"{path}: tensor names {sorted(tensors)} do not match model {sorted(params)}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {p.shape}")
        arr = tensors[name].astype(dtype)
        arr.setflags(write=False)
        p.data = arr
    return model, meta


def continuous_layers(model: LayerStack) -> list[tuple[str, ContinuousPool]]:
    return [(n, l) for n, l in model.pool_layers() if isinstance(l, ContinuousPool)]


def quantize_model(model: LayerStack, probe_size: int | None = None,
                   metric: str = "chebyshev") -> tuple[LayerStack, dict[str, QuantizedPoolPlan]]:
    """Copy of ``model`` with every continuous pooling slot replaced by grouped max pooling."""
    layers = continuous_layers(model)
    if not layers:
        raise ValueError("model has no continuous pooling layers to quantize")
    out = copy.deepcopy(model)
    plans = {}
    for name, layer in layers:
        sched = PoolStrengthSchedule(layer.schedule.values.astype(np.float64), requires_grad=False)
        plan = build_plan(layer.spec, sched, probe_size, metric=metric)
        plans[name] = plan
        out.replace(name, GroupedMaxPool(plan, layer.spec.downsample, layer.spec.downsample_stride))
    out.meta["pooling"] = "quantized"
    out.meta["quantized_from"] = model.meta.get("pooling", "")
    return out, plans


def with_plans(model: LayerStack, plans: dict[str, QuantizedPoolPlan]) -> LayerStack:
    """Copy of a continuous model whose pooling slots use externally supplied plans."""
    out = copy.deepcopy(model)
    for name, layer in continuous_layers(model):
        if name not in plans:
            raise ValueError(f"no plan for layer {name}")
        out.replace(name, GroupedMaxPool(plans[name], layer.spec.downsample, layer.spec.downsample_stride))
    out.meta["pooling"] = "quantized"
    return out
