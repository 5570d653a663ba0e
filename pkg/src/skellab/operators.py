"""Discrete differential operators along a hitting-time skeleton.

Given a functional evaluated along the dyadic walk of a skeleton, this module
forms the per-event jump-ratio derivative, the normalized conditional drift
(the discrete generator) with its horizontal / second-vertical split, vertical
grid derivatives, crossing local times with their space-time sums, the exact
discrete Tanaka identity, energy and covariation diagnostics, the martingale
residual test, and Monte-Carlo pointwise probes on a fine-grid driver.

Two exact identities hold at every step for every functional and are used as
self-tests throughout: the splitting ``U = Dh + D2 / 2`` and the jump
reconstruction ``D * dA = dX``.  The generator is always the exact half-sum
over the two equally likely jump signs, never a Monte-Carlo average over the
next increment.

Occupation quantities (crossing counts, local-time sums) run on the pathwise
quadratic-variation clock of the walk, which is computable event by event;
results carry a ``clock`` tag making that choice explicit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .functionals import PathFunctional, PiecewiseConstantPath, path_from_skeleton
from .skeleton import BrownianSkeleton

__all__ = [
    "OperatorSeries",
    "CrossingLocalTimeField",
    "EnergyStats",
    "MartingaleResidual",
    "PointwiseProbe",
    "VerticalGridDerivative",
    "operator_series",
    "discrete_derivative",
    "discrete_generator",
    "martingale_residual",
    "energy",
    "covariation_bracket",
    "vertical_grid_derivative",
    "crossing_local_time",
    "spacetime_localtime_sum",
    "summation_by_parts_residual",
    "tanaka_residual",
    "pointwise_probe",
]

BRACKET_CLOCK = "pathwise-bracket"


@dataclass(frozen=True)
class OperatorSeries:
    """Per-event operator values of a functional along one walk coordinate.

    ``times`` are the coordinate's event times inside the merged timeline;
    ``values`` holds the functional along the walk at those events and
    ``left_values`` its value just before each event (i.e. at the previous
    merged event).  ``derivative`` is the jump ratio dX / dA, ``horizontal``
    and ``second_vertical`` are the two pieces of the generator split, and
    ``generator`` is the exact half-average over the two jump signs, so that
    ``generator == horizontal + second_vertical / 2`` up to roundoff.
    """

    level_k: int
    coord: int
    times: np.ndarray
    signs: np.ndarray
    walk_values: np.ndarray
    walk_left: np.ndarray
    values: np.ndarray
    left_values: np.ndarray
    start_value: float
    derivative: np.ndarray
    horizontal: np.ndarray
    second_vertical: np.ndarray
    generator: np.ndarray

    @property
    def count(self) -> int:
        return self.times.size

    @property
    def spacing(self) -> float:
        return 2.0**-self.level_k

    @property
    def jump_sizes(self) -> np.ndarray:
        """Walk jumps dA at the events, exactly ``signs * 2**-level_k``."""
        return self.signs * self.spacing

    def _step_path(self, column: np.ndarray, horizon: float) -> PiecewiseConstantPath:
        times = np.concatenate([[0.0], self.times])
        values = np.concatenate([[0.0], column])
        return PiecewiseConstantPath(times=times, values=values, horizon=max(horizon, times[-1]))

    def derivative_path(self, horizon: float) -> PiecewiseConstantPath:
        """The derivative embedded as a step path, zero before the first event."""
        return self._step_path(self.derivative, horizon)

    def generator_path(self, horizon: float) -> PiecewiseConstantPath:
        """The generator embedded as a step path, zero before the first event."""
        return self._step_path(self.generator, horizon)


def operator_series(
    functional: PathFunctional, skel: BrownianSkeleton, coord: int = 0
) -> OperatorSeries:
    """Compute all per-event operator values of ``functional`` along ``skel``.

    One vectorized terminal-modified sweep evaluates the functional along the
    walk; three more evaluate it on the frozen and vertically bumped paths at
    each event of the requested coordinate.  Divisions by walk jumps use the
    exact dyadic ``signs * 2**-level_k``, never floating differences.
    """
    if not 0 <= coord < skel.dim_p:
        raise ValueError(f"coordinate {coord} out of range for dimension {skel.dim_p}")
    path = path_from_skeleton(skel)
    h = skel.spacing
    h2 = h * h
    merged = skel.merged_times
    after = path.values[1:]
    before = path.values[:-1]

    start_value = functional.evaluate(path, 0.0)
    values_all = functional.batch_terminal(path, merged, after)
    left_all = np.concatenate([[start_value], values_all[:-1]])

    idx = np.flatnonzero(skel.merged_coords == coord)
    times = merged[idx]
    signs = skel.merged_signs[idx].astype(np.float64)
    values = values_all[idx]
    left_values = left_all[idx]

    frozen = before[idx]
    plus = frozen.copy()
    plus[:, coord] += h
    minus = frozen.copy()
    minus[:, coord] -= h
    f_frozen = functional.batch_terminal(path, times, frozen)
    f_plus = functional.batch_terminal(path, times, plus)
    f_minus = functional.batch_terminal(path, times, minus)

    derivative = (values - left_values) / (signs * h)
    second_vertical = (f_plus + f_minus - 2.0 * f_frozen) / h2
    horizontal = (f_frozen - left_values) / h2
    generator = (0.5 * (f_plus + f_minus) - left_values) / h2

    return OperatorSeries(
        level_k=skel.level_k,
        coord=coord,
        times=times,
        signs=signs,
        walk_values=after[idx, coord],
        walk_left=frozen[:, coord],
        values=values,
        left_values=left_values,
        start_value=float(start_value),
        derivative=derivative,
        horizontal=horizontal,
        second_vertical=second_vertical,
        generator=generator,
    )


def discrete_derivative(
    functional: PathFunctional, skel: BrownianSkeleton, coord: int = 0
) -> OperatorSeries:
    """Jump-ratio derivative dX / dA along ``skel`` (full operator sweep)."""
    return operator_series(functional, skel, coord)


def discrete_generator(
    functional: PathFunctional, skel: BrownianSkeleton, coord: int = 0
) -> OperatorSeries:
    """Normalized conditional drift with its horizontal / second-vertical split."""
    return operator_series(functional, skel, coord)


@dataclass(frozen=True)
class MartingaleResidual:
    """Monte-Carlo diagnostic of the martingale part of a functional's walk."""

    mean: float
    standard_error: float
    sample_size: int
    time: float


def martingale_residual(
    functional: PathFunctional,
    skels: Sequence[BrownianSkeleton],
    psi: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    t: float | None = None,
    coord: int = 0,
) -> MartingaleResidual:
    """Test that per-event residuals ``dX - dt * U`` are orthogonal to the past.

    For each path the statistic is ``sum_n m_n * psi_n`` over events up to
    ``t``, where ``m_n = dX(T_n) - 2**(-2k) * U(T_n)`` and ``psi_n`` is a
    weight depending only on the history before the event.  ``psi`` receives
    the previous event time and the walk value just before each event, both as
    arrays, and defaults to the constant 1.  Returns the sample mean and
    standard error across paths; fewer than 100 paths are refused because the
    statistic is meaningless without averaging.
    """
    skels = list(skels)
    if len(skels) < 100:
        raise ValueError("martingale residual needs at least 100 paths")
    if t is None:
        t = min(s.horizon for s in skels)
    stats = np.empty(len(skels))
    for i, skel in enumerate(skels):
        series = operator_series(functional, skel, coord)
        h2 = series.spacing**2
        mask = series.times <= t
        residuals = (series.values - series.left_values - h2 * series.generator)[mask]
        if psi is None:
            weights = 1.0
        else:
            prev_times = np.concatenate([[0.0], series.times[:-1]])[mask]
            weights = np.asarray(psi(prev_times, series.walk_left[mask]), dtype=np.float64)
        stats[i] = np.sum(residuals * weights)
    return MartingaleResidual(
        mean=float(stats.mean()),
        standard_error=float(stats.std(ddof=1) / math.sqrt(stats.size)),
        sample_size=stats.size,
        time=float(t),
    )


@dataclass(frozen=True)
class EnergyStats:
    """Across-path statistics of the quadratic jump energy up to a time."""

    per_path: np.ndarray
    mean: float
    standard_error: float
    sample_size: int
    time: float


def energy(
    functional: PathFunctional, skels: Sequence[BrownianSkeleton], t: float | None = None
) -> EnergyStats:
    """Per-path energy ``sum_n dX(T_n)**2`` over all merged events up to ``t``."""
    skels = list(skels)
    if not skels:
        raise ValueError("energy needs at least one path")
    if t is None:
        t = min(s.horizon for s in skels)
    per_path = np.empty(len(skels))
    for i, skel in enumerate(skels):
        path = path_from_skeleton(skel)
        start = functional.evaluate(path, 0.0)
        values = functional.batch_terminal(path, skel.merged_times, path.values[1:])
        jumps = np.diff(np.concatenate([[start], values]))
        per_path[i] = np.sum(jumps[skel.merged_times <= t] ** 2)
    se = per_path.std(ddof=1) / math.sqrt(per_path.size) if per_path.size > 1 else 0.0
    return EnergyStats(
        per_path=per_path,
        mean=float(per_path.mean()),
        standard_error=float(se),
        sample_size=per_path.size,
        time=float(t),
    )


def covariation_bracket(
    functional: PathFunctional, skel: BrownianSkeleton, coord: int = 0
) -> PiecewiseConstantPath:
    """Bracket path ``t -> sum_{T_n <= t} dX(T_n) * dA_j(T_n)``, starting at 0."""
    series = operator_series(functional, skel, coord)
    increments = (series.values - series.left_values) * series.jump_sizes
    times = np.concatenate([[0.0], series.times])
    values = np.concatenate([[0.0], np.cumsum(increments)])
    return PiecewiseConstantPath(
        times=times, values=values, horizon=max(skel.horizon, times[-1])
    )


def _integer_positions(skel: BrownianSkeleton) -> np.ndarray:
    if skel.dim_p != 1:
        raise ValueError("occupation quantities are defined for one-dimensional skeletons")
    return np.cumsum(skel.merged_signs, dtype=np.int64)


def _events_upto(skel: BrownianSkeleton, t: float) -> int:
    t = float(t)
    if not 0.0 <= t <= skel.horizon:
        raise ValueError(f"time {t} outside [0, {skel.horizon}]")
    return int(np.searchsorted(skel.merged_times, t, side="right"))


@dataclass(frozen=True)
class VerticalGridDerivative:
    """First differences of a functional across the dyadic value grid."""

    level_k: int
    time: float
    levels: np.ndarray
    values: np.ndarray

    @property
    def grid_points(self) -> np.ndarray:
        return self.levels * 2.0**-self.level_k


def vertical_grid_derivative(
    functional: PathFunctional,
    skel: BrownianSkeleton,
    t: float,
    window: tuple[int, int] | None = None,
) -> VerticalGridDerivative:
    """Grid derivative ``(F_t(t(A_t, j h)) - F_t(t(A_t, (j-1) h))) / h`` over levels j.

    The window of integer levels defaults to the walk's visited range on
    ``[0, t]`` widened by one level on each side; an explicit window must
    cover the visited range.
    """
    if skel.dim_p != 1:
        raise ValueError("the vertical grid derivative is defined for one-dimensional skeletons")
    count = _events_upto(skel, t)
    if t <= 0.0:
        raise ValueError("the grid derivative needs t > 0 so the left limit exists")
    h = skel.spacing
    visited = np.concatenate([[0], _integer_positions(skel)[:count]])
    lo, hi = int(visited.min()) - 1, int(visited.max()) + 1
    if window is not None:
        if window[0] > lo + 1 or window[1] < hi - 1:
            raise ValueError(
                f"window {window} does not cover the visited level range [{lo + 1}, {hi - 1}]"
            )
        lo, hi = int(window[0]), int(window[1])
    levels = np.arange(lo, hi + 1)
    grid = np.arange(lo - 1, hi + 1) * h
    path = path_from_skeleton(skel)
    values = functional.batch_terminal(path, np.full(grid.size, t), grid)
    return VerticalGridDerivative(
        level_k=skel.level_k, time=float(t), levels=levels, values=np.diff(values) / h
    )


@dataclass(frozen=True)
class CrossingLocalTimeField:
    """Crossing counts and local time of the walk on the dyadic grid.

    ``up_counts[j]`` and ``down_counts[j]`` count arrivals at level
    ``levels[j] * 2**-level_k`` from below and above among events
    ``1 .. N(t) - 1``, and ``local_time = 2**-level_k * (u + d)``.  The
    ``clock`` tag records that counting runs on the walk's pathwise
    quadratic-variation clock — the computable one — rather than its
    predictable compensator.
    """

    level_k: int
    time: float
    levels: np.ndarray
    up_counts: np.ndarray
    down_counts: np.ndarray
    local_time: np.ndarray
    clock: str = BRACKET_CLOCK

    @property
    def grid_points(self) -> np.ndarray:
        return self.levels * 2.0**-self.level_k

    def level_of(self, x: float) -> int:
        """Integer level of the grid cell ``((j-1) h, j h]`` containing ``x``."""
        return int(math.ceil(x * 2.0**self.level_k))

    def at_position(self, x: float) -> float:
        """Local time at the grid level containing ``x`` (zero off-window)."""
        j = self.level_of(x)
        if j < self.levels[0] or j > self.levels[-1]:
            return 0.0
        return float(self.local_time[j - int(self.levels[0])])


def crossing_local_time(
    skel: BrownianSkeleton, t: float, window: tuple[int, int] | None = None
) -> CrossingLocalTimeField:
    """Count directional arrivals per grid level among events ``1 .. N(t)-1``."""
    positions = _integer_positions(skel)
    count = _events_upto(skel, t)
    # positions[0] is the walk after its first event, so the counted steps
    # 1 .. N(t)-1 live at indices 0 .. count-2
    upper = max(count - 1, 0)
    arrivals = positions[:upper]
    arrival_signs = skel.merged_signs[:upper]
    visited = np.concatenate([[0], positions[:count]])
    lo, hi = int(visited.min()) - 1, int(visited.max()) + 1
    if window is not None:
        if window[0] > int(visited.min()) or window[1] < int(visited.max()):
            raise ValueError(
                f"window {window} too small for visited levels "
                f"[{int(visited.min())}, {int(visited.max())}]"
            )
        lo, hi = int(window[0]), int(window[1])
    levels = np.arange(lo, hi + 1)
    up = np.zeros(levels.size, dtype=np.int64)
    down = np.zeros(levels.size, dtype=np.int64)
    offsets = arrivals - lo
    np.add.at(up, offsets[arrival_signs > 0], 1)
    np.add.at(down, offsets[arrival_signs < 0], 1)
    return CrossingLocalTimeField(
        level_k=skel.level_k,
        time=float(t),
        levels=levels,
        up_counts=up,
        down_counts=down,
        local_time=skel.spacing * (up + down),
    )


def spacetime_localtime_sum(
    alpha: Callable[[np.ndarray, np.ndarray], np.ndarray],
    skel: BrownianSkeleton,
    t: float,
    clock: str = "occupation",
    window: tuple[int, int] | None = None,
) -> float:
    """Space-time sum ``sum_j int_0^t alpha_j(s) [dL^j(s) - dL^{j-1}(s)]``.

    ``alpha(levels, times)`` must return the coefficient of grid level ``j``
    at time ``s`` for each pair, vectorized.  With the default ``occupation``
    clock the level measure charges ``2**-level_k`` at each event time
    ``T_n`` to the level occupied on ``[T_{n-1}, T_n)`` — the pairing under
    which the discrete summation-by-parts identity is exact; the ``arrival``
    clock charges the arrival level of events ``1 .. N(t)-1`` instead.
    """
    positions = _integer_positions(skel)
    count = _events_upto(skel, t)
    if clock == "occupation":
        levels = np.concatenate([[0], positions[: count - 1]]) if count else positions[:0]
        times = skel.merged_times[:count]
    elif clock == "arrival":
        upper = max(count - 1, 0)
        levels = positions[:upper]
        times = skel.merged_times[:upper]
    else:
        raise ValueError(f"unknown clock {clock!r}; use 'occupation' or 'arrival'")
    if window is not None and levels.size:
        if levels.min() < window[0] or levels.max() + 1 > window[1]:
            raise ValueError(
                f"coefficient support exceeds the field window {window}"
            )
    if not levels.size:
        return 0.0
    high = np.asarray(alpha(levels + 1, times), dtype=np.float64)
    low = np.asarray(alpha(levels, times), dtype=np.float64)
    return float(skel.spacing * np.sum(low - high))


def summation_by_parts_residual(
    functional: PathFunctional, skel: BrownianSkeleton, t: float
) -> float:
    """Residual of the pathwise summation-by-parts identity at time ``t``.

    The second-vertical sum ``(1/2) sum_n D2(T_n) 2**-2k`` must equal minus
    half the space-time local-time sum of the vertical grid derivative on the
    occupation clock, exactly per path; the residual is their (signed) sum
    and should vanish to roundoff for any functional.
    """
    series = operator_series(functional, skel, 0)
    h = skel.spacing
    mask = series.times <= t
    lhs = 0.5 * h * h * float(np.sum(series.second_vertical[mask]))
    path = path_from_skeleton(skel)

    def alpha(levels: np.ndarray, times: np.ndarray) -> np.ndarray:
        hi = functional.batch_terminal(path, times, levels * h)
        lo = functional.batch_terminal(path, times, (levels - 1) * h)
        return (hi - lo) / h

    return lhs + 0.5 * spacetime_localtime_sum(alpha, skel, t, clock="occupation")


def tanaka_residual(skel: BrownianSkeleton, x: float, t: float) -> float:
    """Exact discrete Tanaka identity residual at the grid point ``x``.

    Decomposes ``|A(t) - x|`` into the starting value, the sign-weighted jump
    sum away from ``x``, and ``2**-level_k`` times the number of events fired
    from ``x``; the residual is the defect of that decomposition and is zero
    in exact (here: dyadic, hence floating-point exact) arithmetic.
    """
    positions = _integer_positions(skel)
    count = _events_upto(skel, t)
    h = skel.spacing
    j0 = x / h
    if j0 != round(j0):
        raise ValueError(f"{x} does not lie on the level-{skel.level_k} grid")
    j0 = int(round(j0))
    pos_before = np.concatenate([[0], positions[: count - 1]]) if count else positions[:0]
    signs = skel.merged_signs[:count]
    walk_end = float(positions[count - 1]) * h if count else 0.0
    jump_sum = h * float(np.sum(np.sign(pos_before - j0) * signs))
    visits = int(np.sum(pos_before == j0))
    return abs(walk_end - j0 * h) - abs(0.0 - j0 * h) - jump_sum - h * visits


@dataclass(frozen=True)
class PointwiseProbe:
    """Monte-Carlo estimate of a local derivative or generator probe."""

    mode: str
    time: float
    scale: float
    sample_size: int
    driver_at_t: np.ndarray
    ratios: np.ndarray | None
    estimate: float
    standard_error: float


def pointwise_probe(
    functional: PathFunctional,
    t: float,
    eps: float,
    mode: str,
    *,
    sample: int,
    rng: np.random.Generator,
    grid_step: float | None = None,
    future_span: float | None = None,
) -> PointwiseProbe:
    """Probe the local derivative or generator of a functional of the driver.

    Each replication runs a fine-grid Brownian driver past ``t`` until it
    first moves ``eps`` away from its value at ``t``.  In ``derivative`` mode
    the per-path ratio ``dX / dB`` is returned with its Monte-Carlo mean and
    standard error.  In ``generator`` mode the estimate is the ratio of means
    ``mean(dX) / mean(dT)`` with a delta-method standard error, where ``dX``
    averages the functional over the realized exit and its sign-flipped
    mirror: the driver's future is exchangeable with its reflection, so the
    half-sum realizes the conditional average over the exit direction exactly
    and removes the dominant martingale noise.  The per-path ratio
    ``dX / dT`` is *not* averaged, since the reciprocal of the exit time has
    a heavy enough tail to bias a mean of ratios.
    """
    if mode not in ("derivative", "generator"):
        raise ValueError("mode must be 'derivative' or 'generator'")
    if sample < 1000:
        raise ValueError("pointwise probes need at least 1000 paths")
    t = float(t)
    eps = float(eps)
    if t < 0.0 or eps <= 0.0:
        raise ValueError("need t >= 0 and eps > 0")
    if grid_step is None:
        grid_step = eps * eps / 32.0
    if future_span is None:
        future_span = 48.0 * eps * eps
    steps = int(math.ceil(future_span / grid_step))

    driver_at_t = (math.sqrt(t) * rng.standard_normal(sample)) if t > 0 else np.zeros(sample)
    exit_time = np.empty(sample)
    delta_driver = np.empty(sample)
    delta_value = np.empty(sample)

    if getattr(functional, "terminal_only", False):
        host = PiecewiseConstantPath(
            times=np.array([0.0]), values=np.array([0.0]), horizon=t + future_span
        )
        scale = math.sqrt(grid_step)
        for start in range(0, sample, 1024):
            block = slice(start, min(start + 1024, sample))
            size = block.stop - block.start
            tail = np.cumsum(scale * rng.standard_normal((size, steps)), axis=1)
            hit = np.abs(tail) >= eps
            realized = hit.any(axis=1)
            if not np.all(realized):
                raise RuntimeError(
                    "future span too short to realize every exit; increase future_span"
                )
            first = np.argmax(hit, axis=1)
            exit_time[block] = (first + 1) * grid_step
            delta_driver[block] = tail[np.arange(size), first]
        value_now = functional.batch_terminal(host, np.full(sample, t), driver_at_t)
        value_exit = functional.batch_terminal(
            host, t + exit_time, driver_at_t + delta_driver
        )
        if mode == "generator":
            value_mirror = functional.batch_terminal(
                host, t + exit_time, driver_at_t - delta_driver
            )
            delta_value = 0.5 * (value_exit + value_mirror) - value_now
        else:
            delta_value = value_exit - value_now
    else:
        steps_total = int(math.ceil((t + future_span) / grid_step))
        times = grid_step * np.arange(steps_total + 1)
        anchor_idx = int(np.searchsorted(times, t, side="right")) - 1
        scale = math.sqrt(grid_step)
        for i in range(sample):
            driver = np.concatenate(
                [[0.0], np.cumsum(scale * rng.standard_normal(steps_total))]
            )
            path = PiecewiseConstantPath(times=times, values=driver, horizon=times[-1])
            anchor = driver[anchor_idx]
            tail = driver[anchor_idx + 1 :] - anchor
            hit = np.abs(tail) >= eps
            if not hit.any():
                raise RuntimeError(
                    "future span too short to realize every exit; increase future_span"
                )
            first = int(np.argmax(hit))
            exit_idx = anchor_idx + 1 + first
            driver_at_t[i] = anchor
            exit_time[i] = times[exit_idx] - times[anchor_idx]
            delta_driver[i] = tail[first]
            value_now = functional.evaluate(path, times[anchor_idx])
            value_exit = functional.evaluate(path, times[exit_idx])
            if mode == "generator":
                mirrored = driver.copy()
                mirrored[anchor_idx + 1 :] = anchor - tail
                mirror_path = PiecewiseConstantPath(
                    times=times, values=mirrored, horizon=times[-1]
                )
                value_mirror = functional.evaluate(mirror_path, times[exit_idx])
                delta_value[i] = 0.5 * (value_exit + value_mirror) - value_now
            else:
                delta_value[i] = value_exit - value_now

    if mode == "derivative":
        ratios = delta_value / delta_driver
        return PointwiseProbe(
            mode=mode,
            time=t,
            scale=eps,
            sample_size=sample,
            driver_at_t=driver_at_t,
            ratios=ratios,
            estimate=float(ratios.mean()),
            standard_error=float(ratios.std(ddof=1) / math.sqrt(sample)),
        )
    mean_dt = exit_time.mean()
    estimate = delta_value.mean() / mean_dt
    centered_v = delta_value - delta_value.mean()
    centered_t = exit_time - mean_dt
    var = (
        np.mean(centered_v**2)
        - 2.0 * estimate * np.mean(centered_v * centered_t)
        + estimate**2 * np.mean(centered_t**2)
    ) / (sample * mean_dt**2)
    return PointwiseProbe(
        mode=mode,
        time=t,
        scale=eps,
        sample_size=sample,
        driver_at_t=driver_at_t,
        ratios=None,
        estimate=float(estimate),
        standard_error=float(math.sqrt(max(var, 0.0))),
    )
