import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpool import tensor as T
from cpool.continuous import ContinuousPoolSpec, PoolStrengthSchedule, continuous_pool_forward, dirac_response
from cpool.quantize import (
    PlanFormatError,
    ProbeError,
    QuantizedPoolPlan,
    build_plan,
    format_plan,
    grouped_max_pool,
    measure_radius,
    parse_plan,
    read_plan,
    round_half_away,
    write_plan,
)
from cpool.tensor import Tensor

from conftest import brute_window_max

radii_lists = st.lists(st.integers(1, 10), min_size=1, max_size=12)


def max_probe(n, value=1.0, size=None):
    spec = ContinuousPoolSpec(iterations=n, variant="max")
    return dirac_response(spec, PoolStrengthSchedule.constant(n, 1, value), size or 2 * n + 3).data


# -- radius measurement -------------------------------------------------------

def test_plateau_radius_is_exact():
    assert measure_radius(max_probe(3)) == 3.0


def test_untouched_dirac_has_radius_zero():
    assert measure_radius(max_probe(3, value=0.0)) == 0.0


def test_area_metric_of_a_square_plateau():
    assert measure_radius(max_probe(2), metric="area") == pytest.approx(np.sqrt(25 / np.pi))


def test_measure_radius_rejects_degenerate_probes():
    with pytest.raises(ProbeError):
        measure_radius(np.zeros((5, 5)))
    with pytest.raises(ValueError):
        measure_radius(np.ones((4, 5)))
    with pytest.raises(ValueError):
        measure_radius(max_probe(1), metric="euclid")


def test_round_half_away_from_zero():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.49, -0.5, -1.5)] == [1, 2, 2, -1, -2]


# -- plans --------------------------------------------------------------------

def test_full_strength_layer_gives_one_group():
    spec = ContinuousPoolSpec(iterations=3, variant="max")
    plan = build_plan(spec, PoolStrengthSchedule.constant(3, 4, 1.0))
    assert plan.radii == (3, 3, 3, 3)
    assert plan.groups == [(3, 0, 4)]


def test_zero_schedule_clamps_to_one():
    spec = ContinuousPoolSpec(iterations=4)
    assert build_plan(spec, PoolStrengthSchedule.constant(4, 3, 0.0)).radii == (1, 1, 1)


def test_channels_with_different_reach_form_two_runs():
    # channel 0 dilates 5 times, channel 1 only twice
    values = np.ones((5, 2))
    values[2:, 1] = 0.0
    spec = ContinuousPoolSpec(iterations=5, variant="max")
    plan = build_plan(spec, PoolStrengthSchedule(values))
    assert plan.radii == (5, 2)
    assert plan.permutation == (1, 0)
    assert plan.groups == [(2, 0, 1), (5, 1, 2)]


def test_probe_touching_the_border_is_an_error():
    spec = ContinuousPoolSpec(iterations=4, variant="max")
    with pytest.raises(ProbeError):
        build_plan(spec, PoolStrengthSchedule.constant(4, 1, 1.0), probe_size=7)


def test_plan_rejects_bad_fields():
    with pytest.raises(ValueError):
        QuantizedPoolPlan((0, 3))
    with pytest.raises(ValueError):
        QuantizedPoolPlan((1, 11))
    with pytest.raises(ValueError):
        QuantizedPoolPlan((2, 1), permutation=(0, 1))


@given(radii_lists)
def test_permutation_is_a_sorting_bijection(radii):
    plan = QuantizedPoolPlan(tuple(radii))
    perm, inv = plan.permutation, plan.inverse
    assert [perm[i] for i in inv] == list(range(len(radii)))
    sorted_r = [radii[i] for i in perm]
    assert sorted_r == sorted(radii)
    covered = []
    for r, a, b in plan.groups:
        assert set(sorted_r[a:b]) == {r}
        covered.extend(range(a, b))
    assert covered == list(range(len(radii)))


@given(radii_lists)
def test_plan_text_round_trip(radii):
    plan = QuantizedPoolPlan(tuple(radii))
    text = format_plan(plan)
    assert text.splitlines()[0] == f"CPOOL-PLAN v1 {len(radii)}"
    assert parse_plan(text) == plan


def test_plan_file_round_trip(tmp_path):
    plan = QuantizedPoolPlan((3, 1, 3, 7))
    write_plan(tmp_path / "p.plan", plan)
    assert read_plan(tmp_path / "p.plan") == plan


@pytest.mark.parametrize("text", [
    "", "CPOOL-PLAN v2 1\n0 1\n", "PLAN v1 1\n0 1\n", "CPOOL-PLAN v1 2\n0 1\n",
    "CPOOL-PLAN v1 2\n0 1\n0 2\n", "CPOOL-PLAN v1 1\n0 x\n", "CPOOL-PLAN v1 1\n0 12\n",
])
def test_malformed_plans_are_rejected(text):
    with pytest.raises(PlanFormatError):
        parse_plan(text)


# -- grouped max pooling ------------------------------------------------------

def test_single_radius_plan_is_plain_window_max(rng):
    x = rng.normal(size=(2, 4, 10, 10))
    got = grouped_max_pool(Tensor(x), QuantizedPoolPlan((2,) * 4), 1, "none").data
    np.testing.assert_array_equal(got, brute_window_max(x, 2))


def test_permutation_round_trip_is_bit_identical(rng):
    x = rng.normal(size=(1, 3, 6, 6))
    direct = T.neighborhood_max(Tensor(x), 1).data
    perm = QuantizedPoolPlan((1, 1, 1), permutation=(2, 0, 1))
    np.testing.assert_array_equal(grouped_max_pool(Tensor(x), perm, 1, "none").data, direct)


@given(radii_lists.filter(lambda r: len(r) <= 6), st.integers(0, 2**31 - 1))
def test_mixed_plan_matches_per_channel_loop(radii, seed):
    x = np.random.default_rng(seed).normal(size=(2, len(radii), 9, 8))
    got = grouped_max_pool(Tensor(x), QuantizedPoolPlan(tuple(radii)), 2, "max_pool").data
    ref = np.concatenate([brute_window_max(x[:, c : c + 1], r) for c, r in enumerate(radii)], axis=1)
    ref = ref[:, :, :8, :8].reshape(2, len(radii), 4, 2, 4, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(got, ref)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_quantized_layer_reproduces_full_strength_layer(n, rng):
    spec = ContinuousPoolSpec(iterations=n, variant="max")
    sched = PoolStrengthSchedule.constant(n, 3, 1.0)
    plan = build_plan(spec, sched)
    for _ in range(10):
        x = Tensor(rng.normal(size=(2, 3, 16, 16)))
        with T.no_grad():
            np.testing.assert_array_equal(grouped_max_pool(x, plan).data,
                                          continuous_pool_forward(x, spec, sched).data)


@pytest.mark.parametrize("radii", [(1,), (2, 5), (3, 1, 4, 1, 5), (10, 7)])
def test_reprobing_a_quantized_layer_recovers_its_radii(radii):
    # a radius-r max window is r full-strength dilation steps
    n = max(radii)
    values = np.zeros((n, len(radii)))
    for c, r in enumerate(radii):
        values[:r, c] = 1.0
    spec = ContinuousPoolSpec(iterations=n, variant="max")
    plan = build_plan(spec, PoolStrengthSchedule(values))
    assert plan.radii == radii
    size = 2 * n + 3
    for c, r in enumerate(radii):
        probe = np.zeros((1, 1, size, size))
        probe[0, 0, size // 2, size // 2] = 1.0
        resp = grouped_max_pool(Tensor(probe), QuantizedPoolPlan((r,)), 1, "none").data
        assert measure_radius(resp) == r
