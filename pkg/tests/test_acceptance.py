"""Acceptance suite: one test per shipped guarantee, with pinned tolerances.

Each test prints the measured quantities it asserts, so ``pytest -v`` shows
one pass/fail line per criterion (the test) next to its numbers.  Statistical
checks run at pinned seeds and pinned sample sizes; exact identities assert
at the 1e-10 scale (dyadic jump arithmetic amplified by 4^k), and Monte
Carlo checks carry three-standard-error bands plus any resolution bias.
"""
from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from skellab import (
    Coordinate,
    FbmParams,
    RunningMax,
    binomial_value,
    build_skeleton,
    coupled_levels,
    crossing_local_time,
    discrete_bsde_solve,
    dp_backward,
    fbm_sample,
    fbm_skeleton,
    lower_bound_resimulate,
    martingale_residual,
    operator_series,
    payoff_table_from_sample,
    simulate_grid_path,
    summation_by_parts_residual,
    tanaka_residual,
)
from skellab.cli import (
    ExperimentConfig,
    main,
    make_functional,
    run_generator_check,
    run_skeleton_stats,
    weak_pairing_errors,
)

SQUARE = make_functional("square")
STRIKE = 0.25
PUT_LEVEL = 2
PUT_STEPS = 12
PUT_PATHS = 100_000


def put_payoff(step, times, walks):
    return np.maximum(STRIKE - walks, 0.0)


@pytest.fixture(scope="module")
def put_pricing():
    """Shared criterion-7 pricing run: exact lattice, regression, fresh bound."""
    exact = binomial_value(
        lambda step, walks: np.maximum(STRIKE - walks, 0.0), PUT_LEVEL, PUT_STEPS
    )
    table = payoff_table_from_sample(
        put_payoff, PUT_LEVEL, PUT_PATHS, rng=np.random.default_rng(7), steps=PUT_STEPS
    )
    value_table, policy = dp_backward(table, "regression", basis_degree=3)
    fresh = payoff_table_from_sample(
        put_payoff, PUT_LEVEL, PUT_PATHS, rng=np.random.default_rng([7, 1]),
        steps=PUT_STEPS,
    )
    bound = lower_bound_resimulate(policy, fresh)
    return exact, table, value_table, policy, bound


def test_criterion_01_skeleton_increment_law() -> None:
    started = time.monotonic()
    metrics, _ = run_skeleton_stats(
        ExperimentConfig(subcommand="skeleton-stats", seed=7, level_k=4,
                         horizon=1.0, paths=100_000, out_dir="unused")
    )
    elapsed = time.monotonic() - started
    named = {m.name: m for m in metrics}
    mean_row = named["mean_increment"]
    var_row = named["var_unit_exit"]
    print(
        f"criterion 01: mean increment {mean_row.value:.8f} vs 2^-8 "
        f"(tol {mean_row.tolerance:.2e}), exit-time variance {var_row.value:.5f} "
        f"vs 2/3 (tol {var_row.tolerance:.2e}), {elapsed:.2f}s"
    )
    assert mean_row.target == 2.0**-8
    assert abs(mean_row.value - mean_row.target) <= mean_row.tolerance
    assert var_row.target == 2.0 / 3.0
    assert abs(var_row.value - var_row.target) <= var_row.tolerance
    assert elapsed < 10.0


def test_criterion_02_exact_identities_across_levels() -> None:
    started = time.monotonic()
    rng = np.random.default_rng(2026)
    worst_split = worst_jump = worst_tanaka = worst_parts = 0.0
    for level in range(2, 7):
        for _ in range(1000):
            skel = build_skeleton(level, 0.5, rng=rng)
            series = operator_series(SQUARE, skel)
            split = series.horizontal + 0.5 * series.second_vertical
            worst_split = max(
                worst_split, float(np.max(np.abs(series.generator - split)))
            )
            jumps = series.values - series.left_values
            worst_jump = max(
                worst_jump,
                float(np.max(np.abs(jumps - series.derivative * series.jump_sizes))),
            )
            worst_tanaka = max(worst_tanaka, abs(tanaka_residual(skel, 0.0, 0.5)))
            worst_parts = max(
                worst_parts, abs(summation_by_parts_residual(SQUARE, skel, 0.5))
            )
    elapsed = time.monotonic() - started
    print(
        f"criterion 02: generator split {worst_split:.2e}, jump ratio "
        f"{worst_jump:.2e}, occupation identity {worst_tanaka:.2e}, "
        f"summation by parts {worst_parts:.2e}, {elapsed:.2f}s"
    )
    assert worst_split <= 1e-10
    assert worst_jump <= 1e-10
    assert worst_tanaka <= 1e-10
    assert worst_parts <= 1e-10
    assert elapsed < 30.0


def test_criterion_03_generator_identities_and_drift() -> None:
    metrics, _ = run_generator_check(
        ExperimentConfig(subcommand="generator-check", seed=7, level_k=3,
                         horizon=1.0, paths=10_000, out_dir="unused")
    )
    named = {m.name: m for m in metrics}
    unit = named["square_generator_unit_max_abs_err"]
    flat = named["time_integral_second_vertical_max_abs"]
    drift = named["time_integral_generator_vs_walk_mean"]
    print(
        f"criterion 03: squared-walk generator off unit by {unit.value:.2e}, "
        f"clock-integral second vertical {flat.value:.2e}, recentred drift "
        f"{drift.value:+.2e} (tol {drift.tolerance:.2e})"
    )
    assert unit.value <= 1e-10
    assert flat.value <= 1e-10
    assert abs(drift.value) <= drift.tolerance


def test_criterion_04_martingale_residuals_are_centred() -> None:
    rng = np.random.default_rng(7)
    skels = [build_skeleton(4, 1.0, rng=rng) for _ in range(10_000)]
    functionals = {
        "coordinate": Coordinate(),
        "square": SQUARE,
        "running-max": RunningMax(),
    }
    weights = {"one": None, "walk-before": lambda times, walk: walk}
    lines = []
    for fname, functional in functionals.items():
        for wname, psi in weights.items():
            res = martingale_residual(functional, skels, psi=psi)
            lines.append(
                f"{fname}/{wname}: {res.mean:+.2e} (3SE {3 * res.standard_error:.2e})"
            )
            assert abs(res.mean) <= 3.0 * res.standard_error, (fname, wname)
    print("criterion 04: " + "; ".join(lines))


def test_criterion_05_weak_derivative_pairing_converges() -> None:
    errors, _ = weak_pairing_errors(
        [4, 5, 6], 10_000, 0.5, 0.5, np.random.default_rng(7), SQUARE
    )
    print(
        "criterion 05: pairing errors "
        + ", ".join(f"k={k}: {errors[k]:.2e}" for k in (4, 5, 6))
    )
    assert errors[4] > errors[5] > errors[6]
    assert errors[6] < 0.05


def test_criterion_06_local_time_level_and_coupling() -> None:
    rng = np.random.default_rng(7)
    levels = [4, 5, 6, 7]
    step_h = 4.0 ** -(max(levels) + 1)
    n_paths = 1000
    at_zero = []
    field_sums: dict[int, dict[int, float]] = {k: {} for k in levels}
    for _ in range(n_paths):
        grid = simulate_grid_path(rng, step_h, 1.0)
        skels = coupled_levels(grid, levels, 1.0, bridge_correction=True, rng=rng)
        for level, skel in skels.items():
            field = crossing_local_time(skel, 1.0)
            if level == 7:
                at_zero.append(field.at_position(0.0))
            sums = field_sums[level]
            for pos, j in enumerate(field.levels):
                sums[int(j)] = sums.get(int(j), 0.0) + float(field.local_time[pos])
    sample = np.asarray(at_zero)
    se = float(sample.std(ddof=1)) / math.sqrt(n_paths)
    target = math.sqrt(2.0 / math.pi)
    tolerance = 3.0 * se + 2.0**-7
    distances = []
    for a, b in zip(levels, levels[1:]):
        sup = 0.0
        for j, total in field_sums[a].items():
            mean_a = total / n_paths
            mean_b = field_sums[b].get(2 * j, 0.0) / n_paths
            sup = max(sup, abs(mean_a - mean_b))
        distances.append(sup)
    print(
        f"criterion 06: mean local time at zero {sample.mean():.5f} vs "
        f"{target:.5f} (tol {tolerance:.5f}); coupled sup-distances "
        + ", ".join(f"{a}->{a + 1}: {d:.4f}" for a, d in zip(levels, distances))
    )
    assert abs(sample.mean() - target) <= tolerance
    assert distances[0] > distances[1] > distances[2]


def test_criterion_07_put_pricing_three_ways(put_pricing) -> None:
    from skellab import QuantizedExitLaw, tree_value

    exact, _, value_table, _, bound = put_pricing
    started = time.monotonic()
    tree = tree_value(
        put_payoff, PUT_LEVEL, PUT_STEPS, QuantizedExitLaw.moment_matched(2)
    )
    tree_gap = abs(tree.value - exact.value)
    regression_gap = abs(value_table.root_value - exact.value) / exact.value
    bound_gap = bound.estimate - exact.value
    elapsed = time.monotonic() - started
    print(
        f"criterion 07: lattice {exact.value:.10f}, tree gap {tree_gap:.2e}, "
        f"regression within {regression_gap:.5f}, resimulated bound off by "
        f"{bound_gap:+.2e} (3SE {3 * bound.standard_error:.2e})"
    )
    assert exact.value == 0.4915771484375  # 4027 / 8192, exact dyadic value
    assert tree_gap <= 1e-10
    assert regression_gap <= 0.01
    assert abs(bound_gap) <= 3.0 * bound.standard_error
    assert elapsed < 60.0


def test_criterion_08_snell_envelope_invariants(put_pricing) -> None:
    exact, table, value_table, policy, _ = put_pricing
    dominance = float(np.min(value_table.values - table.payoffs))
    terminal_gap = float(
        np.max(np.abs(value_table.values[:, -1] - table.payoffs[:, -1]))
    )
    first_entry = np.argmax(policy.stop_flags, axis=1)
    consistent = bool(np.array_equal(first_entry, policy.stop_steps))
    rows = np.arange(table.payoffs.shape[0])
    stopped_values = value_table.values[rows, policy.stop_steps]
    stopped_payoffs = table.payoffs[rows, policy.stop_steps]
    exercise_gap = float(np.max(np.abs(stopped_values - stopped_payoffs)))
    lattice_dominance = math.inf
    for step, node in enumerate(exact.node_values):
        walks = np.arange(-step, step + 1, 2) * 2.0**-PUT_LEVEL
        slack = node - np.maximum(STRIKE - walks, 0.0)
        lattice_dominance = min(lattice_dominance, float(np.min(slack)))
    print(
        f"criterion 08: min(value - payoff) {dominance:.2e}, terminal gap "
        f"{terminal_gap:.2e}, first-entry consistent {consistent}, value at "
        f"stop equals payoff within {exercise_gap:.2e}, lattice dominance "
        f"{lattice_dominance:.2e}"
    )
    assert dominance >= 0.0
    assert terminal_gap == 0.0
    assert consistent
    assert np.all(policy.stop_flags[:, -1])
    assert exercise_gap == 0.0
    assert lattice_dominance >= 0.0


def test_criterion_09_linear_driver_backward_equation() -> None:
    solution = discrete_bsde_solve(
        lambda walks: np.ones_like(walks),
        lambda t, y, z: 0.1 * y,
        "tree",
        level_k=3,
        horizon=1.0,
    )
    target = math.exp(0.1)
    gap = abs(solution.value - target)
    print(
        f"criterion 09: y0 {solution.value:.8f} vs e^0.1 {target:.8f}, "
        f"gap {gap:.2e} (tol {2.0 * 2.0**-6:.2e})"
    )
    assert gap <= 2.0 * 2.0**-6


def test_criterion_10_fractional_lift_covariance() -> None:
    started = time.monotonic()
    params = FbmParams(hurst=0.7)
    eval_times = np.array([0.3, 0.7, 1.0])
    sample = fbm_sample(params, 5, eval_times, 10_000, rng=np.random.default_rng(7))
    n = sample.shape[0]
    terminal = sample[:, 2]
    variance = float(terminal.var())
    centered = terminal - terminal.mean()
    var_se = math.sqrt(max(float((centered**4).mean()) - variance**2, 0.0) / n)
    var_tol = 3.0 * var_se + 1e-3

    x = sample[:, 0] - sample[:, 0].mean()
    y = sample[:, 1] - sample[:, 1].mean()
    covariance = float((x * y).mean())
    cov_se = math.sqrt(max(float(((x * y - covariance) ** 2).mean()), 0.0) / n)
    cov_target = (0.3**1.4 + 0.7**1.4 - 0.4**1.4) / 2.0
    cov_tol = 3.0 * cov_se + 1e-3

    skel = build_skeleton(3, 0.5, rng=np.random.default_rng(11))
    identity = fbm_skeleton(skel, FbmParams(hurst=0.5))
    walk = np.concatenate([[0.0], skel.merged_values(0)])
    identity_exact = bool(np.array_equal(identity, walk))
    elapsed = time.monotonic() - started
    print(
        f"criterion 10: var(1) {variance:.5f} vs 1 (tol {var_tol:.5f}), "
        f"cov(0.3, 0.7) {covariance:.5f} vs {cov_target:.5f} (tol {cov_tol:.5f}), "
        f"half-Hurst identity exact {identity_exact}, {elapsed:.1f}s"
    )
    assert abs(variance - 1.0) <= var_tol
    assert abs(covariance - cov_target) <= cov_tol
    assert identity_exact
    assert elapsed < 300.0


def test_criterion_11_cli_runs_are_byte_reproducible(tmp_path: Path) -> None:
    runner = CliRunner()
    commands = {
        "skeleton-stats": ["skeleton-stats", "--k", "4", "--paths", "2000",
                           "--seed", "7"],
        "tanaka": ["tanaka", "--k", "3", "--T", "0.5", "--paths", "100",
                   "--seed", "3"],
        "probe": ["probe", "--functional", "square", "--mode", "generator",
                  "--k", "4", "--paths", "1500", "--seed", "9"],
    }
    compared = 0
    for name, args in commands.items():
        outs = [tmp_path / f"{name}-{i}" for i in (0, 1)]
        for out in outs:
            result = runner.invoke(main, args + ["--out-dir", str(out)])
            assert result.exit_code == 0, (name, result.output)
        for csv in sorted(outs[0].glob("*.csv")):
            twin = outs[1] / csv.name
            assert csv.read_bytes() == twin.read_bytes(), (name, csv.name)
            compared += 1
        reports = [json.loads((out / "report.json").read_text()) for out in outs]
        for report in reports:
            report.pop("wall_clock_s")
            report["config"].pop("out_dir")
        assert reports[0] == reports[1], name
    print(
        f"criterion 11: {compared} data files byte-identical across re-runs "
        f"of {len(commands)} seeded commands"
    )
    assert compared >= len(commands)
