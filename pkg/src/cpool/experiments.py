"""Experiment runners shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import runtime
from .config import ExperimentConfig
from .continuous import ContinuousPoolSpec, PoolStrengthSchedule, dirac_response
from .data import DistanceTask, MnistTask
from .nn import LayerStack, LeNetConfig, build_lenet5
from .optim import OptimizerState
from .quantize import measure_radius
from .train import HistoryRow, evaluate, train

log = logging.getLogger(__name__)

# an "epoch" of an on-the-fly distance task is the full 64000-image budget
DISTANCE_EPOCH_STEPS = 2000


def make_task(cfg: ExperimentConfig, data_dir=None):
    if cfg.task == "mnist":
        return MnistTask.from_dir(data_dir, train_subset=cfg.train_subset)
    return DistanceTask(cfg.limit_sq if cfg.task == "distance_limited" else None)


def lenet_config(cfg: ExperimentConfig, task) -> LeNetConfig:
    shift, scale = 0.0, 1.0
    if cfg.head_scaling == "moments" and task.metric_name == "mse":
        shift, scale = task.target_moments()
    return LeNetConfig(iterations=cfg.iterations, init_strength=cfg.init_strength, downsample=cfg.downsample,
                       output_shift=shift, output_scale=scale)


def make_model(cfg: ExperimentConfig, task) -> LayerStack:
    return build_lenet5(task.head, cfg.pooling, cfg.seed, lenet_config(cfg, task))


def steps_per_epoch(task, batch_size: int) -> int:
    if isinstance(task, MnistTask):
        return task.steps_per_epoch(batch_size)
    return DISTANCE_EPOCH_STEPS


def resolve_steps(cfg: ExperimentConfig, task) -> int:
    if cfg.epochs > 0:
        return cfg.epochs * steps_per_epoch(task, cfg.batch_size)
    return cfg.steps


def make_optimizer(cfg: ExperimentConfig) -> OptimizerState:
    return OptimizerState(cfg.optimizer, cfg.learning_rate, momentum=cfg.momentum)


def held_out_metric(model: LayerStack, task, cfg: ExperimentConfig, workers: int = 1) -> float:
    """Final score: the whole test split for MNIST, the seeded eval set for distance tasks."""
    if isinstance(task, MnistTask):
        images, labels = task.eval_set(None)
        return evaluate(model, task, images, labels, workers=workers)
    _, eval_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    images, targets = task.eval_set(cfg.eval_size, np.random.default_rng(eval_seed))
    return evaluate(model, task, images, targets, workers=workers)


@dataclass
class RunResult:
    config: ExperimentConfig
    model: LayerStack
    history: list[HistoryRow]
    final_metric: float
    seconds: float


def run_experiment(cfg: ExperimentConfig, task=None, data_dir=None, workers: int = 1) -> RunResult:
    runtime.tune_allocator()
    task = task or make_task(cfg, data_dir)
    model = make_model(cfg, task)
    start = time.perf_counter()
    history = train(model, task, make_optimizer(cfg), cfg.batch_size, resolve_steps(cfg, task),
                    cfg.eval_every, cfg.eval_size, cfg.seed, workers=workers)
    if isinstance(task, MnistTask):
        final = held_out_metric(model, task, cfg, workers)
    else:
        final = history[-1].eval_metric
    return RunResult(cfg, model, history, final, time.perf_counter() - start)


def compare_poolings(cfg: ExperimentConfig, poolings, seeds, task=None, data_dir=None,
                     workers: int = 1) -> dict[str, list[RunResult]]:
    """Train one model per (pooling, seed).  A given seed sees the same data,
    the same eval set and the same conv/dense init under every pooling."""
    task = task or make_task(cfg, data_dir)
    out = {p: [] for p in poolings}
    for seed in seeds:
        for pooling in poolings:
            res = run_experiment(cfg.replace(pooling=pooling, seed=seed), task, workers=workers)
            log.info("%s seed %d: %.4f (%.0fs)", pooling, seed, res.final_metric, res.seconds)
            out[pooling].append(res)
    return out


def quantize_finetune(model: LayerStack, task, cfg: ExperimentConfig, epochs: int = 1,
                      workers: int = 1) -> list[HistoryRow]:
    """Retrain every remaining weight of a quantized model with a fresh Adam state."""
    opt = OptimizerState("adam", cfg.learning_rate)
    steps = epochs * steps_per_epoch(task, cfg.batch_size)
    return train(model, task, opt, cfg.batch_size, steps, max(steps, 1), cfg.eval_size,
                 cfg.seed + 1, workers=workers)


# ---------------------------------------------------------------------------
# impulse probes and file outputs
# ---------------------------------------------------------------------------

def dirac_probe(p_s: float, iterations: int, size: int, variant: str = "sum") -> tuple[np.ndarray, float]:
    """Response of one channel with constant strength to a centred unit impulse,
    plus its 50% Chebyshev radius."""
    spec = ContinuousPoolSpec(iterations=iterations, variant=variant, downsample="none")
    sched = PoolStrengthSchedule.constant(iterations, 1, p_s, requires_grad=False)
    resp = dirac_response(spec, sched, size).data[0, 0]
    return resp, measure_radius(resp)


def radial_profile_nonincreasing(resp: np.ndarray) -> bool:
    """True when values never grow walking outward from the centre along any
    row or column, in each of the four quadrants."""
    h, w = resp.shape
    cy, cx = h // 2, w // 2
    quads = [resp[cy:, cx:], resp[cy::-1, cx:], resp[cy:, cx::-1], resp[cy::-1, cx::-1]]
    return all(np.all(np.diff(q, axis=0) <= 0) and np.all(np.diff(q, axis=1) <= 0) for q in quads)


def pgm_bytes(resp: np.ndarray) -> bytes:
    """8-bit binary PGM of ``resp / max`` scaled to 0..255."""
    arr = np.asarray(resp, dtype=np.float64)
    h, w = arr.shape
    peak = arr.max()
    scaled = arr / peak if peak > 0 else np.zeros_like(arr)
    pixels = np.clip(np.floor(scaled * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, resp: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(resp))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def metrics_csv(history: list[HistoryRow]) -> str:
    lines = ["step,train_loss,eval_metric"]
    lines += [f"{r.step},{r.train_loss!r},{r.eval_metric!r}" for r in history]
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, history: list[HistoryRow]) -> None:
    Path(path).write_text(metrics_csv(history))
