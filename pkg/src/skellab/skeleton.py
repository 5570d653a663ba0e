"""Hitting-time skeletons of Brownian motion on dyadic spatial grids.

The level-``k`` skeleton of a Brownian path records the successive times at
which the path moves by exactly ``2**-k`` from its last recorded position,
together with the +-1 direction of each move.  The induced marked walk (the
"skeleton") is a pure-jump approximation of the driving path that underpins
every discrete operator in this package.

Two backends are provided:

* ``renewal`` — increments are drawn directly from the exact law of the
  unit-interval exit time (scaled by ``2**-2k``), with i.i.d. fair signs.
* ``grid-coupled`` — events are detected by scanning a pre-simulated
  fine-grid path, so that several levels can be extracted from one and the
  same driving path.  Detection anchors live on the ``2**-k`` spatial
  lattice; the first grid point at or beyond a barrier is taken as the
  event time (no bridge correction unless requested).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "UnitExitLaw",
    "BrownianSkeleton",
    "GridBrownianPath",
    "InfoState",
    "SeriesTruncationError",
    "SkeletonTieError",
    "rng_stream",
    "sample_unit_exit_time",
    "build_skeleton",
    "simulate_grid_path",
    "coupled_levels",
    "evaluate_A",
    "info_state",
]

_PI2_OVER_8 = math.pi**2 / 8.0
# Bisection bracket for inverse-CDF sampling: survival(0.002) and
# survival(40.0) are within one double ulp of 1 and 0 respectively, so every
# representable uniform draw has its quantile strictly inside the bracket.
_BRACKET_LO = 0.002
_BRACKET_HI = 40.0
# |E_{2m}| Euler numbers, giving the Dirichlet beta values
# beta(2m+1) = |E_{2m}| / (2 (2m)!) * (pi/2)^{2m+1} for m = 0..5.
_ABS_EULER = (1, 1, 5, 61, 1385, 50521)


class SeriesTruncationError(RuntimeError):
    """The alternating survival series did not reach the tolerance."""


class SkeletonTieError(RuntimeError):
    """Two skeleton events landed on the same time stamp."""


def rng_stream(seed: int, index: int = 0) -> np.random.Generator:
    """Independent generator for stream `index` of a 64-bit master seed."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


@dataclass(frozen=True)
class UnitExitLaw:
    """Exit time ``tau`` of standard Brownian motion from the interval (-1, 1).

    The survival function is the alternating series

        P(tau > t) = (4/pi) * sum_{n>=0} (-1)^n / (2n+1) * q^{(2n+1)^2},
        q = exp(-pi^2 t / 8),

    whose truncation error is bounded by the first omitted term.  Sampling
    inverts the survival function by bisection.  First moments are exact:
    E tau = 1, E tau^2 = 5/3 (so Var tau = 2/3), E tau^3 = 61/15.
    """

    series_truncation_tolerance: float = 1e-12
    max_terms: int = 200
    bisection_tolerance: float = 1e-12

    def __post_init__(self) -> None:
        if not 0.0 < self.series_truncation_tolerance < 1e-2:
            raise ValueError("series_truncation_tolerance must lie in (0, 1e-2)")
        if self.max_terms < 1:
            raise ValueError("max_terms must be a positive integer")
        if not 0.0 < self.bisection_tolerance < 1e-2:
            raise ValueError("bisection_tolerance must lie in (0, 1e-2)")

    def survival(self, t: np.ndarray | float) -> np.ndarray | float:
        """P(tau > t), elementwise for array input.

        Raises
        ------
        SeriesTruncationError
            If `max_terms` terms do not push the truncation bound below
            `series_truncation_tolerance` (this needs t extremely close
            to 0, where the alternating series converges slowly).
        """
        arr = np.asarray(t, dtype=float)
        if np.any(arr < 0.0):
            raise ValueError("survival is defined for t >= 0 only")
        # survival(0) = 1 exactly; the series converges too slowly there, so
        # evaluate those entries at a harmless dummy time and overwrite below
        zero = arr == 0.0
        q = np.exp(-_PI2_OVER_8 * np.where(zero, 1.0, arr))
        # Consecutive exponents (2n+1)^2 differ by 8(n+1); keep the running
        # power and its multiplicative gap instead of re-exponentiating.
        power = q.copy()
        ratio = q**8
        gap = ratio.copy()
        total = power.copy()
        converged = bool(np.all(power / 3.0 < self.series_truncation_tolerance))
        for n in range(1, self.max_terms):
            power = power * gap
            gap = gap * ratio
            term = power / (2 * n + 1)
            if n % 2:
                total -= term
            else:
                total += term
            if float(term.max()) < self.series_truncation_tolerance:
                converged = True
                break
        if not converged:
            raise SeriesTruncationError(
                f"survival series did not reach tolerance "
                f"{self.series_truncation_tolerance:g} within {self.max_terms} terms"
            )
        out = np.clip(total * (4.0 / math.pi), 0.0, 1.0)
        out = np.where(zero, 1.0, out)
        return float(out) if np.isscalar(t) or out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` exit times by bisecting the survival function."""
        u = rng.random(size)
        u = np.maximum(u, 2.0**-53)
        lo = np.full(size, _BRACKET_LO)
        hi = np.full(size, _BRACKET_HI)
        iterations = math.ceil(math.log2((_BRACKET_HI - _BRACKET_LO) / self.bisection_tolerance))
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            above = self.survival(mid) > u
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return 0.5 * (lo + hi)

    def moment(self, m: int) -> float:
        """E tau^m for m in 1..5, from the termwise-integrated series."""
        if not 1 <= m <= 5:
            raise ValueError("moments are implemented for m in 1..5")
        beta = _ABS_EULER[m] / (2.0 * math.factorial(2 * m)) * (math.pi / 2.0) ** (2 * m + 1)
        return (4.0 / math.pi) * math.factorial(m) * (8.0 / math.pi**2) ** m * beta


def sample_unit_exit_time(
    rng: np.random.Generator, size: int, law: UnitExitLaw | None = None
) -> np.ndarray:
    """Sample exit times of Brownian motion from (-1, 1)."""
    return (law or UnitExitLaw()).sample(rng, size)


@dataclass(frozen=True)
class GridBrownianPath:
    """A Brownian path sampled on a uniform time grid.

    `values` has shape (steps + 1, p) with `values[0] == 0`; row ``i`` is the
    path at time ``i * step_h``.
    """

    step_h: float
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.step_h <= 0.0:
            raise ValueError("step_h must be positive")
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ValueError("values must be a (steps + 1, p) array with steps >= 1")
        if not np.all(self.values[0] == 0.0):
            raise ValueError("grid paths must start at the origin")

    @property
    def dim_p(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return (self.values.shape[0] - 1) * self.step_h

    def times(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) * self.step_h


def simulate_grid_path(
    rng: np.random.Generator, step_h: float, horizon: float, dim_p: int = 1
) -> GridBrownianPath:
    """Simulate a standard Brownian path on a uniform grid covering `horizon`."""
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    steps = int(math.ceil(horizon / step_h - 1e-9))
    increments = rng.standard_normal((steps, dim_p)) * math.sqrt(step_h)
    values = np.vstack([np.zeros((1, dim_p)), np.cumsum(increments, axis=0)])
    return GridBrownianPath(step_h=step_h, values=values)


# ---------------------------------------------------------------------------
# Grid-scan event detection (sequential hysteresis scan).  The numba-compiled
# variant is used when available; the pure-Python fallback runs the same
# logic.  Anchors stay on the 2**-k lattice through the starting point, so
# anchor arithmetic is exact dyadic arithmetic.
# ---------------------------------------------------------------------------

def _scan_events_py(
    values: np.ndarray,
    eps: float,
    step_h: float,
    uniforms: np.ndarray,
    use_bridge: bool,
    out_idx: np.ndarray,
    out_sgn: np.ndarray,
):
    anchor = values[0]
    count = 0
    overshoot = 0.0
    for i in range(1, values.shape[0]):
        d = values[i] - anchor
        if d >= eps:
            out_idx[count] = i
            out_sgn[count] = 1
            anchor += eps
            count += 1
            if d - eps > overshoot:
                overshoot = d - eps
        elif d <= -eps:
            out_idx[count] = i
            out_sgn[count] = -1
            anchor -= eps
            count += 1
            if -d - eps > overshoot:
                overshoot = -d - eps
        elif use_bridge:
            # endpoints stayed inside the barriers: fire with the
            # Brownian-bridge boundary-hitting probability, stamping the
            # event at the right endpoint of the step
            prev = values[i - 1]
            p_up = math.exp(-2.0 * (anchor + eps - prev) * (anchor + eps - values[i]) / step_h)
            p_dn = math.exp(-2.0 * (prev - anchor + eps) * (values[i] - anchor + eps) / step_h)
            u = uniforms[i]
            if u < p_up:
                out_idx[count] = i
                out_sgn[count] = 1
                anchor += eps
                count += 1
            elif u < p_up + p_dn:
                out_idx[count] = i
                out_sgn[count] = -1
                anchor -= eps
                count += 1
    return count, overshoot


try:  # pragma: no cover - exercised indirectly
    from numba import njit as _njit

    _scan_events = _njit(cache=False)(_scan_events_py)
except Exception:  # pragma: no cover
    _scan_events = _scan_events_py


@dataclass(frozen=True)
class InfoState:
    """Discrete information state after `n` merged skeleton events.

    Row ``i`` stops the i-th hitting time of each coordinate at the n-th
    merged event time and carries the rescaled jump mark (+-1, or 0 when the
    coordinate's i-th event has not happened by then).  Exactly one mark is
    nonzero per merged event, ``n`` in total.
    """

    times: np.ndarray  # shape (n, p)
    marks: np.ndarray  # shape (n, p), int8 values in {-1, 0, +1}

    def __post_init__(self) -> None:
        if self.times.shape != self.marks.shape:
            raise ValueError("times and marks must have identical shapes")

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def dim_p(self) -> int:
        return self.times.shape[1]


@dataclass
class BrownianSkeleton:
    """Marked hitting-time walk of one driving Brownian path at one level.

    Per-coordinate event times are strictly increasing and start after 0;
    every jump of the induced walk has magnitude exactly ``2**-level_k``.
    The merged timeline is the sorted union of the coordinate timelines (a
    tie is a hard error).  `grid_overshoot` reports the largest detection
    overshoot for grid-coupled skeletons (0.0 for the renewal backend).
    """

    level_k: int
    horizon: float
    coord_times: list[np.ndarray]
    coord_signs: list[np.ndarray]
    backend: str
    merged_times: np.ndarray = field(init=False)
    merged_coords: np.ndarray = field(init=False)
    merged_signs: np.ndarray = field(init=False)
    grid_overshoot: float = 0.0

    def __post_init__(self) -> None:
        if self.level_k < 0 or self.level_k != int(self.level_k):
            raise ValueError("level_k must be a nonnegative integer")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if self.backend not in ("renewal", "grid-coupled"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if len(self.coord_times) != len(self.coord_signs) or not self.coord_times:
            raise ValueError("coord_times and coord_signs must be equal-length, nonempty lists")
        for times, signs in zip(self.coord_times, self.coord_signs):
            if times.shape != signs.shape:
                raise ValueError("per-coordinate times and signs must align")
            if times.size and (times[0] <= 0.0 or np.any(np.diff(times) <= 0.0)):
                raise ValueError("event times must be strictly increasing and positive")
            if signs.size and not np.all(np.abs(signs) == 1):
                raise ValueError("signs must be +-1")
        times_all = np.concatenate(self.coord_times)
        coords_all = np.concatenate(
            [np.full(t.size, j, dtype=np.int64) for j, t in enumerate(self.coord_times)]
        )
        signs_all = np.concatenate(self.coord_signs)
        order = np.argsort(times_all, kind="stable")
        merged = times_all[order]
        if merged.size > 1 and np.any(np.diff(merged) == 0.0):
            raise SkeletonTieError(
                "two skeleton events share a time stamp; increase the grid "
                "resolution or use the renewal backend"
            )
        self.merged_times = merged
        self.merged_coords = coords_all[order]
        self.merged_signs = signs_all[order]

    @property
    def dim_p(self) -> int:
        return len(self.coord_times)

    @property
    def spacing(self) -> float:
        """Jump magnitude 2**-level_k."""
        return 2.0**-self.level_k

    def coord_values(self, j: int) -> np.ndarray:
        """Walk values of coordinate `j` at its own event times."""
        return self.spacing * np.cumsum(self.coord_signs[j], dtype=np.float64)

    def merged_count_before(self, t: float) -> int:
        """Number of merged events with time <= t."""
        return int(np.searchsorted(self.merged_times, t, side="right"))

    def merged_values(self, j: int = 0) -> np.ndarray:
        """Walk values of coordinate `j` sampled at all merged event times."""
        vals = np.zeros(self.merged_times.size)
        mask = self.merged_coords == j
        vals[mask] = self.merged_signs[mask] * self.spacing
        return np.cumsum(vals)


def _renewal_coordinate(
    rng: np.random.Generator, law: UnitExitLaw, level_k: int, horizon: float, min_keep: int
) -> tuple[np.ndarray, np.ndarray]:
    scale = 4.0**-level_k
    batch = max(32, int(1.3 * 4**level_k * horizon) + 16, min_keep + 2)
    times = np.array([], dtype=np.float64)
    signs = np.array([], dtype=np.int8)
    while True:
        taus = law.sample(rng, batch)
        new_signs = (rng.integers(0, 2, size=batch, dtype=np.int8) * 2 - 1).astype(np.int8)
        offset = times[-1] if times.size else 0.0
        times = np.concatenate([times, offset + np.cumsum(scale * taus)])
        signs = np.concatenate([signs, new_signs])
        first_geq = int(np.searchsorted(times, horizon, side="left"))
        if first_geq < times.size - 1:
            # keep through the first event at/after the horizon, plus one,
            # and never trim below any externally required event count
            keep = max(first_geq + 2, min_keep)
            if keep <= times.size:
                return times[:keep], signs[:keep]
        batch *= 2


def build_skeleton(
    level_k: int,
    horizon: float,
    dim_p: int = 1,
    *,
    rng: np.random.Generator | None = None,
    backend: str = "renewal",
    grid_path: GridBrownianPath | None = None,
    law: UnitExitLaw | None = None,
    min_events: int | None = None,
    bridge_correction: bool = False,
) -> BrownianSkeleton:
    """Build a level-`level_k` skeleton covering [0, horizon].

    Parameters
    ----------
    level_k, horizon, dim_p
        Dyadic level, time horizon, and number of driving coordinates.
    rng
        Required for the renewal backend (and for `bridge_correction`).
    backend
        "renewal" draws increments from the exact scaled exit-time law;
        "grid-coupled" scans `grid_path` for barrier crossings.
    grid_path
        Fine-grid driving path for the grid-coupled backend; its step must
        satisfy ``step_h <= 2**-(2 level_k + 2)`` and its horizon must reach
        `horizon`.
    min_events
        Keep simulating (renewal backend) until the merged timeline holds at
        least this many events — used by step-budgeted consumers.
    bridge_correction
        Grid backend only: also fire events with the Brownian-bridge
        boundary-hitting probability on steps whose endpoints stay inside
        the barriers.

    Returns
    -------
    BrownianSkeleton
        Simulation is carried one event past the first event at/after
        `horizon`, so stepwise evaluation is well defined on all of
        [0, horizon].
    """
    law = law or UnitExitLaw()
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if dim_p < 1:
        raise ValueError("dim_p must be at least 1")
    if backend == "renewal":
        if rng is None:
            raise ValueError("the renewal backend requires an rng")
        min_keep = 0 if min_events is None else int(math.ceil(min_events / dim_p)) + 1
        coord_times: list[np.ndarray] = []
        coord_signs: list[np.ndarray] = []
        for _ in range(dim_p):
            t, s = _renewal_coordinate(rng, law, level_k, horizon, min_keep)
            coord_times.append(t)
            coord_signs.append(s)
        skel = BrownianSkeleton(
            level_k=level_k,
            horizon=horizon,
            coord_times=coord_times,
            coord_signs=coord_signs,
            backend="renewal",
        )
        while min_events is not None and skel.merged_times.size < min_events:
            # rare top-up: extend the coordinate that currently ends earliest
            j = int(np.argmin([t[-1] for t in coord_times]))
            deficit = min_events - skel.merged_times.size
            extra_t, extra_s = _renewal_coordinate(rng, law, level_k, horizon, deficit + 4)
            coord_times[j] = np.concatenate([coord_times[j], coord_times[j][-1] + extra_t])
            coord_signs[j] = np.concatenate([coord_signs[j], extra_s])
            skel = BrownianSkeleton(
                level_k=level_k,
                horizon=horizon,
                coord_times=coord_times,
                coord_signs=coord_signs,
                backend="renewal",
            )
        return skel
    if backend == "grid-coupled":
        if grid_path is None:
            raise ValueError("the grid-coupled backend requires grid_path")
        if min_events is not None:
            raise ValueError("min_events is a renewal-backend option")
        max_step = 2.0 ** -(2 * level_k + 2)
        if grid_path.step_h > max_step * (1 + 1e-12):
            raise ValueError(
                f"grid step {grid_path.step_h:g} too coarse for level {level_k}; "
                f"need step_h <= {max_step:g}"
            )
        if grid_path.horizon < horizon - 1e-12:
            raise ValueError("grid path horizon is shorter than the requested horizon")
        if dim_p != grid_path.dim_p:
            raise ValueError("dim_p must match the grid path")
        eps = 2.0**-level_k
        coord_times = []
        coord_signs = []
        overshoot = 0.0
        for j in range(dim_p):
            col = np.ascontiguousarray(grid_path.values[:, j])
            if bridge_correction:
                if rng is None:
                    raise ValueError("bridge_correction requires an rng")
                uniforms = rng.random(col.size)
            else:
                uniforms = np.zeros(col.size)
            out_idx = np.empty(col.size, dtype=np.int64)
            out_sgn = np.empty(col.size, dtype=np.int8)
            count, shoot = _scan_events(
                col, eps, grid_path.step_h, uniforms, bridge_correction, out_idx, out_sgn
            )
            idx, sgn = out_idx[:count], out_sgn[:count]
            overshoot = max(overshoot, float(shoot))
            times = idx.astype(np.float64) * grid_path.step_h
            first_geq = int(np.searchsorted(times, horizon, side="left"))
            keep = min(times.size, first_geq + 2)
            coord_times.append(times[:keep])
            coord_signs.append(sgn[:keep].astype(np.int8))
        return BrownianSkeleton(
            level_k=level_k,
            horizon=horizon,
            coord_times=coord_times,
            coord_signs=coord_signs,
            backend="grid-coupled",
            grid_overshoot=overshoot,
        )
    raise ValueError(f"unknown backend {backend!r}")


def coupled_levels(
    grid_path: GridBrownianPath,
    levels: Sequence[int],
    horizon: float,
    *,
    bridge_correction: bool = False,
    rng: np.random.Generator | None = None,
) -> dict[int, BrownianSkeleton]:
    """Extract skeletons at several levels from one driving grid path.

    Levels must be strictly ascending; the grid step must resolve the finest
    level (``step_h <= 2**-(2 max(levels) + 2)``).  Each level is scanned
    independently — coupling comes solely from the shared path.
    """
    levels = list(levels)
    if not levels or any(int(k) != k for k in levels):
        raise ValueError("levels must be a nonempty sequence of integers")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly ascending")
    return {
        int(k): build_skeleton(
            int(k),
            horizon,
            dim_p=grid_path.dim_p,
            backend="grid-coupled",
            grid_path=grid_path,
            bridge_correction=bridge_correction,
            rng=rng,
        )
        for k in levels
    }


def evaluate_A(skel: BrownianSkeleton, t: float | np.ndarray) -> np.ndarray:
    """Value of the skeleton walk at time `t` (shape (p,), or (len(t), p)).

    The walk is right-continuous and constant between events.  `t` must lie
    in [0, horizon].
    """
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > skel.horizon + 1e-12):
        raise ValueError("t must lie within [0, horizon]")
    out = np.empty(arr.shape + (skel.dim_p,), dtype=np.float64)
    for j in range(skel.dim_p):
        values = np.concatenate([[0.0], skel.coord_values(j)])
        idx = np.searchsorted(skel.coord_times[j], arr, side="right")
        out[..., j] = values[idx]
    return out


def info_state(skel: BrownianSkeleton, n: int) -> InfoState:
    """Information state after the first `n` merged events."""
    if n < 0 or n > skel.merged_times.size:
        raise ValueError(f"n must lie in 0..{skel.merged_times.size}")
    p = skel.dim_p
    if n == 0:
        return InfoState(times=np.zeros((0, p)), marks=np.zeros((0, p), dtype=np.int8))
    t_n = skel.merged_times[n - 1]
    times = np.full((n, p), t_n, dtype=np.float64)
    marks = np.zeros((n, p), dtype=np.int8)
    for j in range(p):
        tj = skel.coord_times[j][:n]
        reached = tj <= t_n
        m = int(reached.sum())
        times[:m, j] = tj[:m]
        marks[:m, j] = skel.coord_signs[j][:m]
    return InfoState(times=times, marks=marks)
