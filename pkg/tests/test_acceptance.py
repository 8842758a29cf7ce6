"""Acceptance criteria 1-8, each at its stated tolerance and time budget.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
The training criteria take tens of minutes on one CPU core; deselect them
with ``-m "not acceptance"`` for a quick run.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cpool import tensor as T
from cpool.cli import main
from cpool.config import ExperimentConfig
from cpool.continuous import ContinuousPoolSpec, PoolStrengthSchedule, continuous_pool_forward
from cpool.data import DistanceTask, MnistTask, load_mnist
from cpool.experiments import (
    compare_poolings,
    held_out_metric,
    make_model,
    quantize_finetune,
    radial_profile_nonincreasing,
    read_pgm,
)
from cpool.gradcheck import full_suite
from cpool.tensor import Tensor
from cpool.train import quantize_model

from conftest import brute_window_max, record

pytestmark = pytest.mark.acceptance

TESTS = Path(__file__).parent
SEEDS5 = range(5)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = full_suite(trials=100, seed=0)
    seconds = time.perf_counter() - start
    for r in results:
        print(r.line())
    bad = [r.name for r in results if not r.passed]
    ok = not bad and seconds < 120
    record(1, ok, f"{len(results)} checks, failures {bad or 'none'}, {seconds:.0f}s (budget 120s)")
    assert ok


def test_criterion_2_dilation_equivalence():
    rng = np.random.default_rng(2)
    mismatches = 0
    for n in (1, 2, 3, 5):
        spec = ContinuousPoolSpec(iterations=n, variant="max", downsample="none")
        sched = PoolStrengthSchedule.constant(n, 1, 1.0, requires_grad=False)
        for _ in range(50):
            x = rng.normal(size=(1, 1, 16, 16))
            with T.no_grad():
                got = continuous_pool_forward(Tensor(x), spec, sched).data
            mismatches += not np.array_equal(got, brute_window_max(x, n))
    record(2, mismatches == 0, f"{mismatches} of 200 inputs differ from the window max filter")
    assert mismatches == 0


def test_criterion_3_dirac_probes(tmp_path, capsys):
    start = time.perf_counter()
    radii, shapes = [], []
    for p in (0.0008, 0.0012, 0.0018):
        out = tmp_path / f"dirac_{p}.pgm"
        assert main(["dirac", "--p-s", str(p), "--iterations", "10000", "--size", "129", "--out", str(out)]) == 0
        radii.append(float(capsys.readouterr().out))
        shapes.append(radial_profile_nonincreasing(read_pgm(out).astype(int)))
    seconds = time.perf_counter() - start
    ok = radii[0] < radii[1] < radii[2] and all(shapes) and seconds < 300
    record(3, ok, f"radii {radii}, profiles non-increasing {shapes}, {seconds:.0f}s (budget 300s)")
    assert ok


def _distance_comparison(task_name):
    cfg = ExperimentConfig(task=task_name, steps=2000, batch_size=32, learning_rate=1e-4)
    start = time.perf_counter()
    runs = compare_poolings(cfg, ("continuous_max", "max"), SEEDS5)
    seconds = time.perf_counter() - start
    pairs = [(c.final_metric, m.final_metric) for c, m in zip(runs["continuous_max"], runs["max"])]
    for seed, (c, m) in zip(SEEDS5, pairs):
        print(f"seed {seed}: continuous {c:.3f}  max {m:.3f}")
    return pairs, seconds


def test_criterion_4_limited_distance():
    pairs, seconds = _distance_comparison("distance_limited")
    wins = sum(c < m for c, m in pairs)
    ok = wins >= 4 and seconds < 1800
    detail = ", ".join(f"{c:.2f}/{m:.2f}" for c, m in pairs)
    record(4, ok, f"continuous/max MSE {detail}; wins {wins}/5, {seconds / 60:.1f} min (budget 30)")
    assert ok


def test_criterion_5_unlimited_distance():
    pairs, seconds = _distance_comparison("distance")
    wins = sum(c <= 0.5 * m for c, m in pairs)
    ok = wins >= 4
    detail = ", ".join(f"{c:.0f}/{m:.0f}" for c, m in pairs)
    record(5, ok, f"continuous/max MSE {detail}; at most half in {wins}/5, {seconds / 60:.1f} min")
    assert ok


@pytest.fixture(scope="module")
def mnist_runs():
    task = MnistTask.from_dir(train_subset=10000)
    cfg = ExperimentConfig(task="mnist", epochs=3, train_subset=10000)
    start = time.perf_counter()
    runs = compare_poolings(cfg, ("continuous_max", "max"), range(3), task=task)
    return task, runs, time.perf_counter() - start


def test_criterion_6_mnist_ordering(mnist_runs):
    _, runs, seconds = mnist_runs
    cont = [r.final_metric for r in runs["continuous_max"]]
    plain = [r.final_metric for r in runs["max"]]
    ok = np.mean(cont) >= np.mean(plain) and seconds < 45 * 60
    record(6, ok, f"mean accuracy continuous {np.mean(cont):.4f} {cont} vs max {np.mean(plain):.4f} {plain}, "
                  f"{seconds / 60:.1f} min (budget 45)")
    assert ok


def test_criterion_7_quantization(mnist_runs):
    # (a) full-strength max variant: the quantized network is the same function
    task = DistanceTask(49.0)
    same = []
    for n in (1, 2, 3, 5):
        cfg = ExperimentConfig(pooling="continuous_max", iterations=n, init_strength=1.0, seed=n)
        model = make_model(cfg, task)
        qmodel, plans = quantize_model(model)
        assert all(set(p.radii) == {n} for p in plans.values())
        same.append(held_out_metric(model, task, cfg) == held_out_metric(qmodel, task, cfg))

    # (b) trained MNIST models: quantize, fine-tune one epoch, compare test accuracy
    mnist, runs, _ = mnist_runs
    drops = []
    for res in runs["continuous_max"]:
        qmodel, _ = quantize_model(res.model)
        quantize_finetune(qmodel, mnist, res.config, epochs=1)
        after = held_out_metric(qmodel, mnist, res.config)
        drops.append(round(100 * (res.final_metric - after), 2))
    ok = all(same) and max(drops) <= 1.5
    record(7, ok, f"(a) identical metrics for N=1,2,3,5: {same}; (b) accuracy drop in points {drops} (limit 1.5)")
    assert ok


def test_criterion_8_property_suites_and_idx():
    selection = [
        "test_continuous.py::test_step_never_decreases_a_pixel",
        "test_continuous.py::test_max_step_stays_below_window_max",
        "test_continuous.py::test_sum_step_stays_below_window_max",
        "test_continuous.py::test_global_max_is_invariant_in_the_stable_range",
        "test_continuous.py::test_fixed_points_are_exactly_the_dilation_invariant_maps",
        "test_continuous.py::test_both_variants_converge_to_the_global_max",
        "test_continuous.py::test_centre_response_falls_with_distance_of_the_impulse",
        "test_data.py::test_sample_invariants",
        "test_data.py::test_hundred_thousand_draws",
    ]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(TESTS / s) for s in selection]],
                          capture_output=True, text=True, cwd=TESTS.parent)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    images, labels = load_mnist("test")
    idx_ok = images.shape[0] == 10000 and set(np.unique(labels).tolist()) == set(range(10))
    ok = proc.returncode == 0 and idx_ok
    record(8, ok, f"property suites: {summary}; MNIST test split {images.shape[0]} samples, "
                  f"{len(np.unique(labels))} classes")
    assert ok, proc.stdout[-3000:]
