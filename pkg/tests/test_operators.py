"""Tests for the discrete operator layer.

Exact identities (splitting, reconstruction, Tanaka, summation by parts) are
held to 1e-10; statistical checks use 3-standard-error bands around frozen
closed forms: E|B(1)| = sqrt(2/pi), Var(int_0^1 sgn(B) ds) = 1/2.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skellab import (
    Coordinate,
    IntegralKernel,
    PathFunctional,
    RunningMax,
    SmoothPointwise,
    TimeIntegral,
    build_skeleton,
    covariation_bracket,
    crossing_local_time,
    discrete_derivative,
    discrete_generator,
    energy,
    martingale_residual,
    operator_series,
    pointwise_probe,
    rng_stream,
    spacetime_localtime_sum,
    summation_by_parts_residual,
    tanaka_residual,
    vertical_grid_derivative,
)
from skellab.skeleton import BrownianSkeleton


def square():
    return SmoothPointwise(np.square, derivative=lambda a: 2.0 * a)


def toy_walk(signs, level_k=3, spacing=0.1):
    """Skeleton with prescribed jump signs at times spacing, 2*spacing, ..."""
    signs = np.asarray(signs, dtype=np.int8)
    times = spacing * np.arange(1, signs.size + 1)
    horizon = float(times[-1])
    return BrownianSkeleton(
        level_k=level_k,
        horizon=horizon,
        coord_times=[times],
        coord_signs=[signs],
        backend="renewal",
    )


def operator_family():
    return [
        Coordinate(),
        square(),
        RunningMax(),
        TimeIntegral(),
        IntegralKernel(),
    ]


# ------------------------------------------------------------ closed forms


def test_coordinate_derivative_is_one_and_generator_zero() -> None:
    skel = build_skeleton(4, 0.5, rng=rng_stream(3))
    series = discrete_derivative(Coordinate(), skel)
    assert np.all(series.derivative == 1.0)
    assert np.all(series.generator == 0.0)
    assert np.all(series.second_vertical == 0.0)


def test_square_series_matches_hand_expansion() -> None:
    skel = build_skeleton(5, 0.5, rng=rng_stream(5))
    series = discrete_generator(square(), skel)
    h = series.spacing
    assert np.allclose(series.derivative, 2.0 * series.walk_left + series.signs * h, atol=1e-12)
    assert np.allclose(series.second_vertical, 2.0, atol=1e-10)
    assert np.all(series.horizontal == 0.0)
    assert np.allclose(series.generator, 1.0, atol=1e-10)


def test_running_max_derivative_vanishes_below_the_maximum() -> None:
    skel = toy_walk([1, 1, -1, -1, 1])
    series = discrete_derivative(RunningMax(), skel)
    # steps 3 and 4 go down, step 5 comes back up but stays below the max of 2h
    assert series.derivative[0] == 1.0 and series.derivative[1] == 1.0
    assert np.all(series.derivative[2:] == 0.0)


def test_time_integral_series_closed_forms() -> None:
    skel = build_skeleton(4, 0.5, rng=rng_stream(7))
    series = discrete_generator(TimeIntegral(), skel)
    assert np.all(series.second_vertical == 0.0)
    durations = np.diff(np.concatenate([[0.0], series.times]))
    expected = series.walk_left * durations * 4.0**skel.level_k
    assert np.allclose(series.horizontal, expected, atol=1e-9)
    assert np.allclose(series.generator, expected, atol=1e-9)


def test_time_integral_generator_centers_on_the_walk() -> None:
    # E[U(T_n) - A(T_{n-1})] = 0 because E[duration | past] = 2**-2k
    diffs = []
    for i in range(400):
        skel = build_skeleton(3, 0.5, rng=rng_stream(1000 + i))
        series = discrete_generator(TimeIntegral(), skel)
        mask = series.times <= 0.5
        diffs.append(np.mean(series.generator[mask] - series.walk_left[mask]))
    diffs = np.array(diffs)
    se = diffs.std(ddof=1) / math.sqrt(diffs.size)
    assert abs(diffs.mean()) < 3.0 * se


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=12, deadline=None)
def test_splitting_and_reconstruction_identities(seed: int) -> None:
    skel = build_skeleton(3, 0.5, rng=rng_stream(seed))
    for functional in operator_family():
        series = operator_series(functional, skel)
        split = series.generator - (series.horizontal + 0.5 * series.second_vertical)
        assert np.max(np.abs(split), initial=0.0) < 1e-10
        recon = series.derivative * series.jump_sizes - (series.values - series.left_values)
        assert np.max(np.abs(recon), initial=0.0) < 1e-10
        telescoped = series.start_value + np.cumsum(series.derivative * series.jump_sizes)
        assert np.allclose(telescoped, series.values, atol=1e-10)


def test_operator_series_on_multidimensional_skeletons() -> None:
    skel = build_skeleton(3, 0.5, dim_p=2, rng=rng_stream(11))
    for coord in (0, 1):
        series = operator_series(Coordinate(coord=coord), skel, coord=coord)
        assert np.all(series.derivative == 1.0)
        other = operator_series(Coordinate(coord=1 - coord), skel, coord=coord)
        assert np.all(other.derivative == 0.0)
    with pytest.raises(ValueError, match="coordinate"):
        operator_series(Coordinate(), skel, coord=2)


def test_series_step_path_embeddings_start_at_zero() -> None:
    skel = build_skeleton(3, 0.5, rng=rng_stream(13))
    series = operator_series(square(), skel)
    dpath = series.derivative_path(skel.horizon)
    assert dpath.value_at(0.0)[0] == 0.0
    t1 = series.times[0]
    assert dpath.value_at(t1)[0] == series.derivative[0]
    assert dpath.value_at(0.5 * t1)[0] == 0.0
    gpath = series.generator_path(skel.horizon)
    assert gpath.value_at(series.times[2])[0] == series.generator[2]


# ------------------------------------------------------- martingale residual


def test_martingale_residual_refuses_small_samples() -> None:
    skels = [build_skeleton(2, 0.25, rng=rng_stream(i)) for i in range(5)]
    with pytest.raises(ValueError, match="100"):
        martingale_residual(Coordinate(), skels)


def test_time_deterministic_functional_has_zero_residual() -> None:
    clock = DiscountOnly()
    skels = [build_skeleton(2, 0.25, rng=rng_stream(200 + i)) for i in range(100)]
    result = martingale_residual(clock, skels, t=0.25)
    assert result.mean == 0.0 and result.standard_error == 0.0


class DiscountOnly(PathFunctional):
    """A functional of time alone, g(t) = t**2."""

    def _terminal_evaluate(self, path, m, t, terminal):
        return t * t


def test_fair_signs_give_centered_residual_for_the_coordinate() -> None:
    skels = [build_skeleton(3, 0.5, rng=rng_stream(300 + i)) for i in range(300)]
    result = martingale_residual(Coordinate(), skels, t=0.5)
    assert abs(result.mean) <= 3.0 * result.standard_error
    weighted = martingale_residual(square(), skels, psi=lambda pt, pv: pv, t=0.5)
    assert abs(weighted.mean) <= 3.0 * weighted.standard_error


# ----------------------------------------------------------- energy, bracket


def test_energy_closed_forms() -> None:
    skels = [build_skeleton(4, 1.0, rng=rng_stream(500 + i)) for i in range(200)]
    flat = energy(ConstantFunctional(), skels, t=1.0)
    assert flat.mean == 0.0
    coords = energy(Coordinate(), skels, t=1.0)
    counts = np.array([s.merged_count_before(1.0) for s in skels])
    assert np.allclose(coords.per_path, 4.0**-4 * counts, atol=1e-12)
    assert abs(coords.mean - 1.0) <= 3.0 * coords.standard_error
    maxima = energy(RunningMax(), skels, t=1.0)
    assert np.all(maxima.per_path <= coords.per_path + 1e-12)


class ConstantFunctional(PathFunctional):
    """The constant functional, value 1 on every path."""

    def _terminal_evaluate(self, path, m, t, terminal):
        return 1.0


def test_coordinate_bracket_counts_events() -> None:
    skel = build_skeleton(4, 1.0, rng=rng_stream(31))
    bracket = covariation_bracket(Coordinate(), skel)
    assert bracket.value_at(0.0)[0] == 0.0
    assert bracket.value_at(1.0)[0] == pytest.approx(
        4.0**-4 * skel.merged_count_before(1.0), abs=1e-12
    )


def test_sign_bracket_matches_arcsine_variance_oracle() -> None:
    values = []
    for i in range(600):
        skel = build_skeleton(5, 1.0, rng=rng_stream(90000 + i))
        values.append(covariation_bracket(SmoothPointwise(np.abs), skel).value_at(1.0)[0])
    values = np.array(values)
    se = values.std(ddof=1) / math.sqrt(values.size)
    assert abs(values.mean()) <= 3.0 * se
    var = values.var(ddof=1)
    fourth = np.mean((values - values.mean()) ** 4)
    se_var = math.sqrt(max(fourth - var**2, 0.0) / values.size)
    assert abs(var - 0.5) <= 3.0 * se_var + 0.05


def test_square_bracket_is_centered() -> None:
    values = []
    for i in range(300):
        skel = build_skeleton(4, 1.0, rng=rng_stream(70000 + i))
        values.append(covariation_bracket(square(), skel).value_at(1.0)[0])
    values = np.array(values)
    se = values.std(ddof=1) / math.sqrt(values.size)
    assert abs(values.mean()) <= 3.0 * se


# -------------------------------------------------- vertical grid derivative


def test_grid_derivative_closed_forms() -> None:
    skel = build_skeleton(3, 0.5, rng=rng_stream(17))
    h = skel.spacing
    ones = vertical_grid_derivative(Coordinate(), skel, 0.3)
    assert np.all(ones.values == 1.0)
    squares = vertical_grid_derivative(square(), skel, 0.3)
    assert np.allclose(squares.values, (2.0 * squares.levels - 1.0) * h, atol=1e-12)
    kink = SmoothPointwise(lambda a: np.abs(a - 2.0 * h))
    signs = vertical_grid_derivative(kink, skel, 0.3)
    expected = np.sign(signs.levels - 2 - 0.5)
    assert np.array_equal(signs.values, expected)


def test_grid_derivative_window_must_cover_the_path() -> None:
    skel = toy_walk([1, 1, 1])
    result = vertical_grid_derivative(Coordinate(), skel, skel.horizon, window=(-2, 5))
    assert result.levels[0] == -2 and result.levels[-1] == 5
    with pytest.raises(ValueError, match="cover"):
        vertical_grid_derivative(Coordinate(), skel, skel.horizon, window=(0, 2))
    with pytest.raises(ValueError, match="t > 0"):
        vertical_grid_derivative(Coordinate(), skel, 0.0)


# ------------------------------------------------------- crossing local time


def test_toy_walk_crossing_counts_match_enumeration() -> None:
    skel = toy_walk([1, -1, 1, -1])
    field = crossing_local_time(skel, skel.horizon)
    h = skel.spacing
    # arrivals among steps 1..3 at level 1 are steps 1 and 3 (both upward)
    assert field.at_position(h) == 2.0 * h
    assert field.up_counts[field.levels == 1][0] == 2
    assert field.down_counts[field.levels == 0][0] == 1
    # level never visited carries zero local time
    assert field.at_position(-h) == 0.0
    assert field.at_position(17.0) == 0.0


def test_local_time_window_validation() -> None:
    skel = toy_walk([1, 1, 1])
    with pytest.raises(ValueError, match="too small"):
        crossing_local_time(skel, skel.horizon, window=(0, 1))
    field = crossing_local_time(skel, skel.horizon, window=(-3, 8))
    assert field.levels[0] == -3 and field.levels[-1] == 8


@given(st.lists(st.sampled_from([1, -1]), min_size=1, max_size=40))
@settings(max_examples=60, deadline=None)
def test_up_and_down_crossings_interleave(signs) -> None:
    # an arrival at level j from below and the next one can only repeat after
    # the walk drops back through j-1, so u(j) and d(j-1) differ by at most 1
    skel = toy_walk(signs)
    field = crossing_local_time(skel, skel.horizon)
    for pos, level in enumerate(field.levels[1:], start=1):
        up_here = int(field.up_counts[pos])
        down_below = int(field.down_counts[pos - 1])
        assert abs(up_here - down_below) <= 1


def test_local_time_mean_approaches_the_absolute_moment() -> None:
    values = []
    for i in range(300):
        skel = build_skeleton(5, 1.0, rng=rng_stream(40000 + i))
        values.append(crossing_local_time(skel, 1.0).at_position(0.0))
    values = np.array(values)
    se = values.std(ddof=1) / math.sqrt(values.size)
    target = math.sqrt(2.0 / math.pi)
    assert abs(values.mean() - target) <= 3.0 * se + 2.0**-5


# ------------------------------------------------------ space-time summation


def test_constant_coefficients_telescope_to_zero() -> None:
    skel = build_skeleton(4, 0.5, rng=rng_stream(3))
    total = spacetime_localtime_sum(lambda lv, tm: np.full(lv.size, 3.7), skel, 0.5)
    assert total == 0.0
    assert spacetime_localtime_sum(lambda lv, tm: lv * 1.0, skel, 0.0) == 0.0


def test_spacetime_sum_validates_clock_and_window() -> None:
    skel = toy_walk([1, 1, 1])
    with pytest.raises(ValueError, match="clock"):
        spacetime_localtime_sum(lambda lv, tm: lv * 1.0, skel, 0.3, clock="predictable")
    with pytest.raises(ValueError, match="window"):
        spacetime_localtime_sum(
            lambda lv, tm: lv * 1.0, skel, skel.horizon, window=(0, 1)
        )


def test_arrival_clock_reweights_the_crossing_field() -> None:
    # with alpha = 1 at one level and 0 elsewhere, the arrival-clock sum reads
    # off local-time differences of the crossing field directly
    skel = build_skeleton(3, 0.5, rng=rng_stream(19))
    field = crossing_local_time(skel, 0.5)
    level = 1

    def alpha(levels, times):
        return (levels == level).astype(float)

    total = spacetime_localtime_sum(alpha, skel, 0.5, clock="arrival")
    expected = field.at_position(level * skel.spacing) - field.at_position(
        (level - 1) * skel.spacing
    )
    assert total == pytest.approx(expected, abs=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_summation_by_parts_residual_vanishes(seed: int) -> None:
    skel = build_skeleton(3, 0.5, rng=rng_stream(seed))
    for functional in (square(), RunningMax(), TimeIntegral()):
        assert abs(summation_by_parts_residual(functional, skel, 0.5)) < 1e-10


def test_summation_by_parts_holds_for_the_kernel_functional() -> None:
    skel = build_skeleton(3, 0.4, rng=rng_stream(23))
    assert abs(summation_by_parts_residual(IntegralKernel(), skel, 0.4)) < 1e-10


# ------------------------------------------------------------------- Tanaka


@given(seed=st.integers(0, 2**32 - 1), level=st.integers(-3, 3))
@settings(max_examples=25, deadline=None)
def test_tanaka_residual_is_exactly_zero_on_grid_points(seed: int, level: int) -> None:
    skel = build_skeleton(3, 0.5, rng=rng_stream(seed))
    assert abs(tanaka_residual(skel, level * skel.spacing, 0.5)) < 1e-10


def test_tanaka_validates_grid_membership() -> None:
    skel = build_skeleton(3, 0.5, rng=rng_stream(29))
    with pytest.raises(ValueError, match="grid"):
        tanaka_residual(skel, 0.3 * skel.spacing, 0.5)
    # far outside the visited range the identity telescopes exactly
    assert tanaka_residual(skel, 64.0, 0.5) == 0.0


def test_tanaka_toy_walk_visit_count() -> None:
    skel = toy_walk([1, -1, 1, -1])
    # visits to 0 among pre-jump positions of steps 1..4 are steps 1 and 3
    assert tanaka_residual(skel, 0.0, skel.horizon) == 0.0
    h = skel.spacing
    positions = np.concatenate([[0], np.cumsum(skel.merged_signs[:3])])
    assert int(np.sum(positions == 0)) == 2


# ------------------------------------------------------------------- probes


def test_probe_validation() -> None:
    with pytest.raises(ValueError, match="1000"):
        pointwise_probe(Coordinate(), 0.5, 0.01, "derivative", sample=10, rng=rng_stream(1))
    with pytest.raises(ValueError, match="mode"):
        pointwise_probe(Coordinate(), 0.5, 0.01, "drift", sample=2000, rng=rng_stream(1))
    with pytest.raises(RuntimeError, match="future span"):
        pointwise_probe(
            Coordinate(),
            0.0,
            2.0**-4,
            "derivative",
            sample=1000,
            rng=rng_stream(1),
            future_span=2.0**-12,
        )


def test_derivative_probe_of_the_driver_is_exactly_one() -> None:
    probe = pointwise_probe(
        Coordinate(), 0.5, 2.0**-6, "derivative", sample=1000, rng=rng_stream(41)
    )
    # each ratio only differs from 1 by float cancellation in (b + tail) - b
    assert np.allclose(probe.ratios, 1.0, rtol=0.0, atol=1e-12)
    assert probe.estimate == pytest.approx(1.0, abs=1e-12)


def test_derivative_probe_of_the_squared_driver() -> None:
    probe = pointwise_probe(
        square(), 0.5, 2.0**-6, "derivative", sample=3000, rng=rng_stream(43)
    )
    centered = probe.ratios - 2.0 * probe.driver_at_t
    se = centered.std(ddof=1) / math.sqrt(centered.size)
    assert abs(centered.mean()) <= 3.0 * se + 2.0**-6


def test_generator_probe_of_the_squared_driver() -> None:
    probe = pointwise_probe(
        square(), 0.5, 2.0**-6, "generator", sample=3000, rng=rng_stream(47)
    )
    assert probe.ratios is None
    assert abs(probe.estimate - 1.0) <= 3.0 * probe.standard_error + 1e-3


def test_generic_functionals_run_through_the_pathwise_probe() -> None:
    # the running maximum is genuinely path dependent, forcing the full-path
    # simulation branch; the max can rise by at most the excursion range, so
    # every ratio lies in [-1, 1] (negative when an upward excursion raises
    # the max but the driver ultimately exits downward)
    probe = pointwise_probe(
        RunningMax(), 0.25, 2.0**-4, "derivative", sample=1000, rng=rng_stream(53)
    )
    assert probe.sample_size == 1000
    assert np.all(np.abs(probe.ratios) <= 1.0 + 1e-9)
    assert 0.0 < probe.estimate < 0.5
    hidden = OpaqueSquare()
    gen = pointwise_probe(
        hidden, 0.25, 2.0**-5, "generator", sample=1000, rng=rng_stream(59)
    )
    assert abs(gen.estimate - 1.0) <= 3.0 * gen.standard_error + 1e-2


class OpaqueSquare(PathFunctional):
    """Pointwise square without the terminal-only marker (exercises the loop)."""

    def _terminal_evaluate(self, path, m, t, terminal):
        return float(terminal[0]) ** 2
