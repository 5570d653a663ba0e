"""Non-anticipative functionals on piecewise-constant paths.

This module supplies the path container and the functional protocol used by
the discrete operator layer.  Every functional supports three evaluation
modes built on a single primitive:

* ``evaluate(path, t)`` — value on the path truncated at ``t``;
* ``evaluate_terminal_modified(path, s, x)`` — value on the path that keeps
  the history on ``[0, s)`` and takes the value ``x`` at the single time
  ``s`` (a jump of the original path located exactly at ``s`` is discarded);
* ``evaluate_vertical_bump(path, t, shift, level_k)`` — value on the path
  whose terminal point is the left limit at ``t`` shifted by
  ``shift * 2**-level_k``.

All three reduce to "history strictly before t, explicit terminal value at
t", which is also the contract of the vectorized ``batch_terminal`` hook the
operator layer uses for per-event sweeps.

Functionals are immutable values with a pure evaluation rule; result caching
for operator sweeps lives in the operator layer, not here.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .skeleton import BrownianSkeleton

__all__ = [
    "NonFiniteValueError",
    "PiecewiseConstantPath",
    "path_from_skeleton",
    "PathFunctional",
    "Coordinate",
    "SmoothPointwise",
    "RunningMax",
    "TimeIntegral",
    "DiscountedPointwise",
    "IntegralKernel",
    "standard_bump",
]


class NonFiniteValueError(ArithmeticError):
    """A functional evaluation produced a NaN or infinite value."""


@dataclass(frozen=True)
class PiecewiseConstantPath:
    """Right-continuous step path on ``[0, horizon]`` with values in R^p.

    Parameters
    ----------
    times : array_like, shape (m,)
        Strictly increasing jump times starting at ``0.0``; the entry at
        index ``i`` opens the segment on which ``values[i]`` is in force.
    values : array_like, shape (m, p) or (m,)
        Segment values; a one-dimensional array is treated as ``p = 1``.
    horizon : float
        Endpoint of the path's domain; must not precede the last jump.
    """

    times: np.ndarray
    values: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        times = np.ascontiguousarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        values = np.ascontiguousarray(values)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a non-empty 1-d array")
        if times[0] != 0.0:
            raise ValueError("the first segment must open at time 0")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("jump times must be strictly increasing")
        if values.ndim != 2 or values.shape[0] != times.size or values.shape[1] < 1:
            raise ValueError("values must have one row per jump time")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("path data must be finite")
        horizon = float(self.horizon)
        if horizon < times[-1]:
            raise ValueError("horizon must not precede the last jump time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "horizon", horizon)

    @property
    def dim_p(self) -> int:
        return self.values.shape[1]

    def _check_time(self, t: float) -> float:
        t = float(t)
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"time {t} outside the path domain [0, {self.horizon}]")
        return t

    def value_at(self, t: float) -> np.ndarray:
        """Right-continuous value at ``t`` as a length-p vector."""
        t = self._check_time(t)
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.values[idx]

    def left_value(self, t: float) -> np.ndarray:
        """Left limit at ``t > 0`` as a length-p vector."""
        t = self._check_time(t)
        if t == 0.0:
            raise ValueError("the left limit at time 0 is undefined")
        idx = int(np.searchsorted(self.times, t, side="left")) - 1
        return self.values[idx]

    def history_len(self, t: float) -> int:
        """Number of segments opening strictly before ``t``."""
        return int(np.searchsorted(self.times, self._check_time(t), side="left"))


def path_from_skeleton(skel: BrownianSkeleton) -> PiecewiseConstantPath:
    """Assemble the walk of a skeleton into a step path starting at 0."""
    deltas = np.zeros((skel.merged_times.size, skel.dim_p))
    deltas[np.arange(skel.merged_times.size), skel.merged_coords] = (
        skel.spacing * skel.merged_signs
    )
    values = np.vstack([np.zeros((1, skel.dim_p)), np.cumsum(deltas, axis=0)])
    times = np.concatenate([[0.0], skel.merged_times])
    return PiecewiseConstantPath(times=times, values=values, horizon=max(skel.horizon, times[-1]))


def _as_terminal(x, dim_p: int) -> np.ndarray:
    terminal = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if terminal.shape != (dim_p,):
        raise ValueError(f"terminal value must have shape ({dim_p},)")
    if not np.all(np.isfinite(terminal)):
        raise ValueError("terminal value must be finite")
    return terminal


class PathFunctional(ABC):
    """Evaluation rule of a non-anticipative functional on step paths.

    Subclasses implement :meth:`_terminal_evaluate`, the value on the path
    whose history consists of the first ``m`` segments of ``path`` (all
    jumps strictly before ``t``) and whose value at time ``t`` is the
    explicit vector ``terminal``.  Because the history argument never
    includes anything at or after ``t``, non-anticipativity holds by
    construction for every subclass.

    ``terminal_only`` marks functionals whose value depends on ``(t,
    terminal)`` alone — never on the history — allowing evaluation hosts
    with a fabricated history.
    """

    terminal_only = False

    @abstractmethod
    def _terminal_evaluate(
        self, path: PiecewiseConstantPath, m: int, t: float, terminal: np.ndarray
    ) -> float:
        """Value with history ``path.values[:m]`` and value ``terminal`` at ``t``."""

    def _finalize(self, value: float) -> float:
        value = float(value)
        if not math.isfinite(value):
            raise NonFiniteValueError(f"{type(self).__name__} produced {value!r}")
        return value

    def evaluate(self, path: PiecewiseConstantPath, t: float) -> float:
        """Value on the path truncated at ``t``."""
        t = path._check_time(t)
        return self._finalize(
            self._terminal_evaluate(path, path.history_len(t), t, path.value_at(t))
        )

    def evaluate_terminal_modified(
        self, path: PiecewiseConstantPath, s: float, x
    ) -> float:
        """Value on the path with history on ``[0, s)`` and value ``x`` at ``s``."""
        s = path._check_time(s)
        terminal = _as_terminal(x, path.dim_p)
        return self._finalize(
            self._terminal_evaluate(path, path.history_len(s), s, terminal)
        )

    def evaluate_vertical_bump(
        self,
        path: PiecewiseConstantPath,
        t: float,
        shift: int,
        level_k: int,
        coord: int = 0,
    ) -> float:
        """Value with the terminal point moved to ``path(t-) + shift * 2**-level_k``."""
        if shift not in (-1, 0, 1):
            raise ValueError("shift must be -1, 0 or +1")
        terminal = path.left_value(t).copy()
        terminal[coord] += shift * 2.0**-level_k
        return self._finalize(
            self._terminal_evaluate(path, path.history_len(t), t, terminal)
        )

    def _batch_args(
        self, path: PiecewiseConstantPath, eval_times, terminal_values
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ts = np.asarray(eval_times, dtype=np.float64).ravel()
        xs = np.asarray(terminal_values, dtype=np.float64)
        if xs.ndim == 1:
            xs = xs[:, None]
        if xs.shape != (ts.size, path.dim_p):
            raise ValueError("terminal values must have one row per evaluation time")
        if ts.size and not (ts.min() >= 0.0 and ts.max() <= path.horizon):
            raise ValueError("evaluation times outside the path domain")
        ms = np.searchsorted(path.times, ts, side="left")
        return ts, xs, ms

    def _finalize_batch(self, out: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(out)):
            raise NonFiniteValueError(f"{type(self).__name__} produced non-finite values")
        return out

    def batch_terminal(
        self, path: PiecewiseConstantPath, eval_times, terminal_values
    ) -> np.ndarray:
        """Vectorized terminal-modified evaluation.

        Computes the value at each ``eval_times[n]`` of the path that keeps
        the history strictly before that time and takes ``terminal_values[n]``
        there.  The base implementation loops; built-ins override it with
        closed-form sweeps.
        """
        ts, xs, ms = self._batch_args(path, eval_times, terminal_values)
        out = np.empty(ts.size)
        for n in range(ts.size):
            out[n] = self._terminal_evaluate(path, int(ms[n]), float(ts[n]), xs[n])
        return self._finalize_batch(out)


@dataclass(frozen=True)
class Coordinate(PathFunctional):
    """The coordinate map ``c -> c_j(t)``."""

    terminal_only = True

    coord: int = 0

    def _terminal_evaluate(self, path, m, t, terminal):
        return terminal[self.coord]

    def batch_terminal(self, path, eval_times, terminal_values):
        _, xs, _ = self._batch_args(path, eval_times, terminal_values)
        return self._finalize_batch(xs[:, self.coord].copy())


@dataclass(frozen=True)
class SmoothPointwise(PathFunctional):
    """A pointwise functional ``c -> f(c_j(t))`` for a vectorized ``f``.

    ``derivative`` and ``second_derivative`` are optional closed forms of
    ``f'`` and ``f''`` carried along as oracles for derivative tests.
    """

    terminal_only = True

    f: Callable
    coord: int = 0
    derivative: Callable | None = None
    second_derivative: Callable | None = None

    def _terminal_evaluate(self, path, m, t, terminal):
        return self.f(terminal[self.coord])

    def batch_terminal(self, path, eval_times, terminal_values):
        ts, xs, _ = self._batch_args(path, eval_times, terminal_values)
        raw = np.asarray(self.f(xs[:, self.coord]), dtype=np.float64)
        if raw.shape != (ts.size,):
            return super().batch_terminal(path, eval_times, terminal_values)
        return self._finalize_batch(raw)


@dataclass(frozen=True)
class RunningMax(PathFunctional):
    """The running maximum ``c -> max_{0 <= s <= t} c_j(s)``."""

    coord: int = 0

    def _terminal_evaluate(self, path, m, t, terminal):
        top = path.values[:m, self.coord].max() if m else -math.inf
        return max(top, terminal[self.coord])

    def batch_terminal(self, path, eval_times, terminal_values):
        ts, xs, ms = self._batch_args(path, eval_times, terminal_values)
        prefix = np.maximum.accumulate(path.values[:, self.coord])
        hist = np.where(ms > 0, prefix[np.maximum(ms - 1, 0)], -np.inf)
        return self._finalize_batch(np.maximum(hist, xs[:, self.coord]))


@dataclass(frozen=True)
class TimeIntegral(PathFunctional):
    """The running integral ``c -> int_0^t c_j(s) ds``.

    A single-point terminal modification never changes the value, since the
    integrand differs on a set of measure zero.
    """

    coord: int = 0

    def _terminal_evaluate(self, path, m, t, terminal):
        if m == 0:
            return 0.0
        ends = np.empty(m)
        ends[: m - 1] = path.times[1:m]
        ends[m - 1] = t
        return float(np.dot(ends - path.times[:m], path.values[:m, self.coord]))

    def batch_terminal(self, path, eval_times, terminal_values):
        ts, _, ms = self._batch_args(path, eval_times, terminal_values)
        vals = path.values[:, self.coord]
        prefix = np.concatenate([[0.0], np.cumsum(np.diff(path.times) * vals[:-1])])
        idx = np.maximum(ms - 1, 0)
        out = np.where(ms > 0, prefix[idx] + (ts - path.times[idx]) * vals[idx], 0.0)
        return self._finalize_batch(out)


@dataclass(frozen=True)
class DiscountedPointwise(PathFunctional):
    """A discounted pointwise functional ``c -> exp(-rate * t) * f(c_j(t))``."""

    terminal_only = True

    f: Callable
    rate: float = 0.0
    coord: int = 0

    def _terminal_evaluate(self, path, m, t, terminal):
        return math.exp(-self.rate * t) * self.f(terminal[self.coord])

    def batch_terminal(self, path, eval_times, terminal_values):
        ts, xs, _ = self._batch_args(path, eval_times, terminal_values)
        raw = np.asarray(self.f(xs[:, self.coord]), dtype=np.float64)
        if raw.shape != (ts.size,):
            return super().batch_terminal(path, eval_times, terminal_values)
        return self._finalize_batch(np.exp(-self.rate * ts) * raw)


def standard_bump(u: float) -> float:
    """The smooth bump ``exp(-1 / (1 - u**2))`` on ``(-1, 1)``, zero outside."""
    u2 = u * u
    if u2 >= 1.0:
        return 0.0
    return math.exp(-1.0 / (1.0 - u2))


def _shifted_bump(a: float, y: float) -> float:
    return standard_bump(y - a)


def _shifted_bump_support(a: float) -> tuple[float, float]:
    return (a - 1.0, a + 1.0)


def _adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float) -> float:
    if b <= a:
        return 0.0
    mid = 0.5 * (a + b)
    fa, fm, fb = f(a), f(mid), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_split(f, a, b, fa, fm, fb, whole, tol, 48)


def _simpson_split(f, a, b, fa, fm, fb, whole, tol, depth):
    mid = 0.5 * (a + b)
    lm, rm = 0.5 * (a + mid), 0.5 * (mid + b)
    flm, frm = f(lm), f(rm)
    left = (mid - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - mid) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    if depth <= 0 or abs(err) <= 15.0 * tol:
        return left + right + err / 15.0
    return _simpson_split(f, a, mid, fa, flm, fm, left, 0.5 * tol, depth - 1) + _simpson_split(
        f, mid, b, fm, frm, fb, right, 0.5 * tol, depth - 1
    )


class IntegralKernel(PathFunctional):
    """The kernel functional ``c -> int_{-inf}^{c_j(t)} int_0^t phi(c(s), y) ds dy``.

    ``phi(a, y)`` must vanish for ``y`` outside ``support(a)`` — a compact
    interval for every bounded set of first arguments — so the inner integral
    in ``y`` runs over a finite range.  The default kernel is the shifted
    smooth bump ``phi(a, y) = standard_bump(y - a)`` supported on
    ``(a - 1, a + 1)``.

    On a step path the time integral is a finite sum over segments, so the
    value is ``sum_i dt_i * Psi(v_i, x)`` with ``Psi(a, x) =
    int_{-inf}^x phi(a, y) dy`` computed by adaptive Simpson quadrature to
    ``tolerance`` and memoized per ``(a, x)`` pair.  A terminal modification
    moves only the upper limit ``x``; the history values under the time
    integral are untouched.

    Parameters
    ----------
    phi : callable, optional
        Scalar kernel ``phi(a, y)``; defaults to the shifted bump.
    support : callable, optional
        Map ``a -> (lo, hi)`` bounding ``{y: phi(a, y) != 0}``; required
        whenever ``phi`` is supplied.
    coord : int
        Coordinate the functional reads.
    tolerance : float
        Absolute tolerance of the adaptive Simpson inner integral.
    """

    def __init__(
        self,
        phi: Callable[[float, float], float] | None = None,
        support: Callable[[float], tuple[float, float]] | None = None,
        coord: int = 0,
        tolerance: float = 1e-10,
    ) -> None:
        if phi is None:
            phi = _shifted_bump
            if support is None:
                support = _shifted_bump_support
        elif support is None:
            raise ValueError("a custom kernel needs an explicit support map")
        self.phi = phi
        self.support = support
        self.coord = int(coord)
        self.tolerance = float(tolerance)
        self._psi_cache: dict[tuple[float, float], float] = {}

    def _psi(self, a: float, x: float) -> float:
        key = (a, x)
        hit = self._psi_cache.get(key)
        if hit is not None:
            return hit
        lo, hi = self.support(a)
        value = _adaptive_simpson(lambda y: self.phi(a, y), lo, min(x, hi), self.tolerance)
        self._psi_cache[key] = value
        return value

    def _terminal_evaluate(self, path, m, t, terminal):
        if m == 0:
            return 0.0
        x = float(terminal[self.coord])
        ends = np.empty(m)
        ends[: m - 1] = path.times[1:m]
        ends[m - 1] = t
        dts = ends - path.times[:m]
        return float(
            sum(dt * self._psi(float(a), x) for dt, a in zip(dts, path.values[:m, self.coord]))
        )

    def batch_terminal(self, path, eval_times, terminal_values):
        ts, xs, ms = self._batch_args(path, eval_times, terminal_values)
        vals = path.values[:, self.coord]
        unique_a, inv = np.unique(vals, return_inverse=True)
        full_dt = np.diff(path.times)
        idx = np.maximum(ms - 1, 0)
        out = np.zeros(ts.size)
        for x in np.unique(xs[:, self.coord]):
            sel = (xs[:, self.coord] == x) & (ms > 0)
            if not np.any(sel):
                continue
            psi = np.array([self._psi(float(a), float(x)) for a in unique_a])[inv]
            prefix = np.concatenate([[0.0], np.cumsum(full_dt * psi[:-1])])
            pick = idx[sel]
            out[sel] = prefix[pick] + (ts[sel] - path.times[pick]) * psi[pick]
        return self._finalize_batch(out)

    def vertical_derivative(self, path: PiecewiseConstantPath, t: float) -> float:
        """Closed form ``int_0^t phi(c(s), c(t)) ds``, an oracle for derivative tests."""
        t = path._check_time(t)
        m = path.history_len(t)
        if m == 0:
            return 0.0
        x = float(path.value_at(t)[self.coord])
        ends = np.empty(m)
        ends[: m - 1] = path.times[1:m]
        ends[m - 1] = t
        dts = ends - path.times[:m]
        return float(
            sum(dt * self.phi(float(a), x) for dt, a in zip(dts, path.values[:m, self.coord]))
        )

    def horizontal_derivative(self, path: PiecewiseConstantPath, t: float) -> float:
        """Closed form ``int_{-inf}^{c(t)} phi(c(t), y) dy``, an oracle for drift tests."""
        x = float(path.value_at(t)[self.coord])
        return self._psi(x, x)
