"""Fractional lift of the hitting-time walk through a spectral Volterra kernel.

With ``c_H = sin(pi (H - 1/2)) / pi``, the level-``k`` fractional path driven
by the scalar walk ``A`` is the triple integral

    B_H(t) = c_H * int_0^inf x^(1/2-H)
                   int_0^t  l^(H-1/2)
                   int_0^l  e^(-x (l-s)) s^(1/2-H) dA(s)  dl dx.

The construction splits into three nested rules with very different
characters:

* the innermost Stieltjes sum over walk jumps is computed **exactly** by an
  exponential-decay recursion per spectral node ``x`` (one multiply and one
  add per jump), so no error enters at the bottom level;
* the middle (clock) integral is piecewise smooth between consecutive jumps
  and is integrated segment by segment with small Gauss-Legendre panels,
  subdivided near the segment start where ``e^(-x s)`` is steep and
  truncated once the factor underflows any reasonable tolerance;
* the outer (spectral) integral carries algebraic endpoint behaviour
  ``x^(1/2-H)`` at zero and ``x^(H-5/2)`` at infinity; a three-panel rule
  (Gauss-Jacobi head, plain mid panel, Gauss-Jacobi tail under ``u = 1/x``)
  absorbs both factors into the quadrature weights.

Each quadrature is validated at build time against a battery of closed-form
spectral transforms (decay atoms and ramp atoms), so a rule that cannot
reproduce known answers refuses to run.

At ``H = 1/2`` the lift degenerates to the identity (``c_H = 0`` and the
kernel collapses), so the walk itself is returned without touching the
quadrature.  Exponents ``H < 1/2`` make the spectral tail non-integrable in
this form and are rejected; ``H`` outside ``(0, 1)`` is a domain error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gamma as _gamma_fn
from scipy.special import roots_jacobi, roots_legendre

from .skeleton import BrownianSkeleton, UnitExitLaw
from .snell import PayoffTable, step_budget

__all__ = [
    "FbmParams",
    "KernelQuadrature",
    "fbm_payoff_table",
    "fbm_payoff_table_from_sample",
    "fbm_sample",
    "fbm_skeleton",
]

#: decay-atom rates a in the battery identity
#:     c_H * int x^(1/2-H) e^(-a x) dx = a^(H-3/2) / Gamma(H-1/2)
_DECAY_BATTERY_RATES = (0.01, 0.1, 1.0, 4.0)

#: ramp-atom rates a in the battery identity
#:     c_H * int x^(1/2-H) (1 - e^(-a x)) / x dx = a^(H-1/2) / Gamma(H+1/2)
_RAMP_BATTERY_RATES = (1e-3, 0.01, 0.1, 1.0)


def _require_lift_exponent(hurst: float) -> None:
    """Reject Hurst exponents the spectral lift cannot represent."""
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"Hurst exponent {hurst} outside the domain (0, 1)")
    if hurst < 0.5:
        raise ValueError(
            f"Hurst exponent {hurst} below 1/2 is not representable by this "
            "spectral kernel: the tail weight x^(H-5/2) stops being "
            "integrable under the u = 1/x substitution; supported range is "
            "1/2 <= H < 1"
        )


@dataclass(frozen=True)
class FbmParams:
    """Market model on top of the fractional lift.

    The price path is the geometric transform
    ``W_H(t) = exp(drift * t + sigma * B_H(t))`` (so ``W_H(0) = 1``) and the
    reward for stopping at ``t`` is ``exp(-discount_rate * t) * payoff(W_H(t))``.
    """

    hurst: float
    sigma: float = 1.0
    drift: float = 0.0
    discount_rate: float = 0.0
    payoff: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.hurst < 1.0:
            raise ValueError(
                f"Hurst exponent {self.hurst} outside the domain (0, 1)"
            )
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        if self.discount_rate < 0.0:
            raise ValueError("discount_rate must be nonnegative")
        if self.payoff is not None and not callable(self.payoff):
            raise ValueError("payoff must be a callable map of the price")


@dataclass(frozen=True)
class KernelQuadrature:
    """Frozen spectral and clock quadrature rules for one Hurst exponent.

    ``spectral_nodes``/``spectral_weights`` discretize the outer integral
    with the prefactor ``c_H`` and the weight ``x^(1/2-H)`` folded in; the
    inner Gauss-Legendre rule (``inner_nodes`` on (-1, 1)) integrates each
    clock segment, subdivided at ``inner_breaks / x`` and truncated at
    ``inner_cap / x`` where ``e^(-x s)`` has decayed to ~``e^-36``.
    ``achieved_error`` records the worst relative error over the build-time
    battery of closed-form transforms.
    """

    hurst: float
    spectral_nodes: np.ndarray
    spectral_weights: np.ndarray
    inner_nodes: np.ndarray
    inner_weights: np.ndarray
    inner_breaks: tuple[float, ...]
    inner_cap: float
    battery_tolerance: float
    achieved_error: float

    @classmethod
    def build(
        cls,
        hurst: float,
        *,
        head_order: int = 20,
        mid_order: int = 16,
        tail_order: int = 28,
        knee: float = 8.0,
        split: float = 120.0,
        inner_order: int = 8,
        inner_breaks: tuple[float, ...] = (2.0, 8.0),
        inner_cap: float = 36.0,
        battery_tolerance: float = 1e-5,
    ) -> "KernelQuadrature":
        """Assemble the three-panel spectral rule and gate it on the battery.

        Head panel: Gauss-Jacobi with weight ``x^(1/2-H)`` on ``[0, knee]``.
        Mid panel: Gauss-Legendre on ``[knee, split]`` (no endpoint
        singularity there, the algebraic factor is evaluated explicitly).
        Tail panel: substituting ``u = 1/x`` maps ``[split, inf)`` to
        ``(0, 1/split]`` with integrable weight ``u^(H-3/2)``, handled by
        Gauss-Jacobi again.  Raises if the battery of closed-form transforms
        is reproduced worse than ``battery_tolerance``.
        """
        _require_lift_exponent(hurst)
        if hurst == 0.5:
            raise ValueError(
                "the fractional lift is the identity at H = 1/2; "
                "no spectral quadrature is defined there"
            )
        if not 0.0 < knee < split:
            raise ValueError("panels need 0 < knee < split")
        prefactor = math.sin(math.pi * (hurst - 0.5)) / math.pi
        head_t, head_v = roots_jacobi(head_order, 0.0, 0.5 - hurst)
        head_x = knee * (head_t + 1.0) / 2.0
        head_w = (knee / 2.0) ** (1.5 - hurst) * head_v
        mid_t, mid_v = roots_legendre(mid_order)
        mid_x = knee + (split - knee) * (np.asarray(mid_t) + 1.0) / 2.0
        mid_w = (split - knee) / 2.0 * np.asarray(mid_v) * mid_x ** (0.5 - hurst)
        u_edge = 1.0 / split
        tail_t, tail_v = roots_jacobi(tail_order, 0.0, hurst - 1.5)
        tail_u = u_edge * (tail_t + 1.0) / 2.0
        tail_x = 1.0 / tail_u
        tail_w = (u_edge / 2.0) ** (hurst - 0.5) * tail_v / tail_u
        nodes = np.concatenate([head_x, mid_x, tail_x])
        weights = prefactor * np.concatenate([head_w, mid_w, tail_w])
        order = np.argsort(nodes)
        nodes = np.ascontiguousarray(nodes[order])
        weights = np.ascontiguousarray(weights[order])

        achieved = 0.0
        for rate in _DECAY_BATTERY_RATES:
            estimate = float(np.sum(weights * np.exp(-rate * nodes)))
            target = rate ** (hurst - 1.5) / _gamma_fn(hurst - 0.5)
            achieved = max(achieved, abs(estimate - target) / abs(target))
        for rate in _RAMP_BATTERY_RATES:
            estimate = float(
                np.sum(weights * (1.0 - np.exp(-rate * nodes)) / nodes)
            )
            target = rate ** (hurst - 0.5) / _gamma_fn(hurst + 0.5)
            achieved = max(achieved, abs(estimate - target) / abs(target))
        if achieved > battery_tolerance:
            raise ValueError(
                "spectral quadrature battery failed: worst relative error "
                f"{achieved:.3e} on the closed-form transforms exceeds the "
                f"tolerance {battery_tolerance:g}"
            )

        gl_t, gl_w = roots_legendre(inner_order)
        return cls(
            hurst=float(hurst),
            spectral_nodes=nodes,
            spectral_weights=weights,
            inner_nodes=np.ascontiguousarray(np.asarray(gl_t)),
            inner_weights=np.ascontiguousarray(np.asarray(gl_w)),
            inner_breaks=tuple(float(b) for b in inner_breaks),
            inner_cap=float(inner_cap),
            battery_tolerance=float(battery_tolerance),
            achieved_error=float(achieved),
        )


# ---------------------------------------------------------------------------
# Scan kernel.  One pass per path over its jump times: the per-node state
# G(x) carries the exact inner Stieltjes sum at the current jump, I(x)
# accumulates closed clock segments, and evaluation times are answered from
# inside the segment that contains them.  The numba-compiled variant is used
# when available; the pure-Python fallback runs the same loops.
# ---------------------------------------------------------------------------

def _volterra_scan_py(
    times: np.ndarray,
    jumps: np.ndarray,
    counts: np.ndarray,
    evals: np.ndarray,
    ecounts: np.ndarray,
    nodes: np.ndarray,
    weights: np.ndarray,
    gl_t: np.ndarray,
    gl_w: np.ndarray,
    power: float,
    breaks: np.ndarray,
    cap: float,
    out: np.ndarray,
):
    n_nodes = nodes.shape[0]
    n_gl = gl_t.shape[0]
    n_breaks = breaks.shape[0]
    for row in range(times.shape[0]):
        decay_sum = np.zeros(n_nodes)
        closed = np.zeros(n_nodes)
        n_events = counts[row]
        n_evals = ecounts[row]
        seg_start = 0.0
        ptr = 0
        for j in range(n_events):
            t_j = times[row, j]
            if j == 0:
                while ptr < n_evals and evals[row, ptr] <= t_j:
                    out[row, ptr] = 0.0
                    ptr += 1
            else:
                while ptr < n_evals and evals[row, ptr] <= t_j:
                    span = evals[row, ptr] - seg_start
                    total = 0.0
                    for ix in range(n_nodes):
                        x = nodes[ix]
                        reach = span
                        if cap / x < reach:
                            reach = cap / x
                        panel = 0.0
                        left = 0.0
                        for pi in range(n_breaks + 1):
                            if pi < n_breaks:
                                right = breaks[pi] / x
                                if right > reach:
                                    right = reach
                            else:
                                right = reach
                            if right > left:
                                half = 0.5 * (right - left)
                                mid = 0.5 * (left + right)
                                acc = 0.0
                                for q in range(n_gl):
                                    s = mid + half * gl_t[q]
                                    acc += (
                                        gl_w[q]
                                        * (seg_start + s) ** power
                                        * math.exp(-x * s)
                                    )
                                panel += half * acc
                            left = right
                            if left >= reach:
                                break
                        total += weights[ix] * (closed[ix] + panel * decay_sum[ix])
                    out[row, ptr] = total
                    ptr += 1
                if ptr >= n_evals:
                    break
                span = t_j - seg_start
                for ix in range(n_nodes):
                    x = nodes[ix]
                    reach = span
                    if cap / x < reach:
                        reach = cap / x
                    panel = 0.0
                    left = 0.0
                    for pi in range(n_breaks + 1):
                        if pi < n_breaks:
                            right = breaks[pi] / x
                            if right > reach:
                                right = reach
                        else:
                            right = reach
                        if right > left:
                            half = 0.5 * (right - left)
                            mid = 0.5 * (left + right)
                            acc = 0.0
                            for q in range(n_gl):
                                s = mid + half * gl_t[q]
                                acc += (
                                    gl_w[q]
                                    * (seg_start + s) ** power
                                    * math.exp(-x * s)
                                )
                            panel += half * acc
                        left = right
                        if left >= reach:
                            break
                    closed[ix] += panel * decay_sum[ix]
                    decay_sum[ix] *= math.exp(-x * span)
            for ix in range(n_nodes):
                decay_sum[ix] += jumps[row, j]
            seg_start = t_j
        # evaluation times past the last jump extend the final segment
        while ptr < n_evals:
            span = evals[row, ptr] - seg_start
            total = 0.0
            for ix in range(n_nodes):
                x = nodes[ix]
                reach = span
                if cap / x < reach:
                    reach = cap / x
                panel = 0.0
                left = 0.0
                for pi in range(n_breaks + 1):
                    if pi < n_breaks:
                        right = breaks[pi] / x
                        if right > reach:
                            right = reach
                    else:
                        right = reach
                    if right > left:
                        half = 0.5 * (right - left)
                        mid = 0.5 * (left + right)
                        acc = 0.0
                        for q in range(n_gl):
                            s = mid + half * gl_t[q]
                            acc += (
                                gl_w[q]
                                * (seg_start + s) ** power
                                * math.exp(-x * s)
                            )
                        panel += half * acc
                    left = right
                    if left >= reach:
                        break
                total += weights[ix] * (closed[ix] + panel * decay_sum[ix])
            out[row, ptr] = total
            ptr += 1
    return out


try:  # pragma: no cover - exercised indirectly
    from numba import njit as _njit

    _volterra_scan = _njit(cache=False)(_volterra_scan_py)
except Exception:  # pragma: no cover
    _volterra_scan = _volterra_scan_py


def _lift_rows(
    raw_times: np.ndarray,
    raw_signs: np.ndarray,
    counts: np.ndarray,
    evals: np.ndarray,
    ecounts: np.ndarray,
    level_k: int,
    quadrature: KernelQuadrature,
) -> np.ndarray:
    """Run the scan kernel on padded row matrices of jump times and signs."""
    hurst = quadrature.hurst
    jumps = np.zeros_like(raw_times)
    valid = np.arange(raw_times.shape[1])[None, :] < counts[:, None]
    np.power(raw_times, 0.5 - hurst, out=jumps, where=valid)
    jumps *= raw_signs * 2.0**-level_k
    jumps[~valid] = 0.0
    out = np.zeros(evals.shape)
    _volterra_scan(
        np.ascontiguousarray(raw_times),
        np.ascontiguousarray(jumps),
        np.ascontiguousarray(counts),
        np.ascontiguousarray(evals),
        np.ascontiguousarray(ecounts),
        quadrature.spectral_nodes,
        quadrature.spectral_weights,
        quadrature.inner_nodes,
        quadrature.inner_weights,
        hurst - 0.5,
        np.asarray(quadrature.inner_breaks, dtype=np.float64),
        quadrature.inner_cap,
        out,
    )
    return out


def _resolve_quadrature(
    params: FbmParams, quadrature: KernelQuadrature | None
) -> KernelQuadrature:
    _require_lift_exponent(params.hurst)
    if quadrature is None:
        return KernelQuadrature.build(params.hurst)
    if quadrature.hurst != params.hurst:
        raise ValueError(
            f"quadrature was built for H = {quadrature.hurst}, "
            f"parameters carry H = {params.hurst}"
        )
    return quadrature


def fbm_skeleton(
    skeleton: BrownianSkeleton,
    params: FbmParams,
    quadrature: KernelQuadrature | None = None,
    *,
    eval_times: Sequence[float] | None = None,
) -> np.ndarray:
    """Fractional path values along one skeleton.

    Without ``eval_times`` the result has entry ``n`` equal to ``B_H`` at the
    ``n``-th merged event time (entry 0 is the start, always exactly 0).
    With ``eval_times`` (nonnegative, nondecreasing) the path is evaluated at
    those clock times instead.  The jump arriving at an event time itself has
    zero clock measure above it, so ``B_H`` is continuous and the value at
    ``T_n`` involves the jumps strictly before it.  At ``H = 1/2`` the lift
    is the walk itself (a jump path, evaluated right-continuously).
    """
    if skeleton.dim_p != 1:
        raise ValueError("the fractional lift reads a scalar driving walk")
    times = skeleton.merged_times
    if eval_times is not None:
        evals = np.asarray(eval_times, dtype=np.float64)
        if evals.ndim != 1 or evals.size == 0:
            raise ValueError("eval_times must be a nonempty 1-D sequence")
        if np.any(evals < 0.0) or np.any(np.diff(evals) < 0.0):
            raise ValueError("eval_times must be nonnegative and nondecreasing")
    if params.hurst == 0.5:
        walk = np.concatenate([[0.0], skeleton.merged_values(0)])
        if eval_times is None:
            return walk
        return walk[np.searchsorted(times, evals, side="right")]
    quadrature = _resolve_quadrature(params, quadrature)
    n = times.size
    if n == 0:
        return np.zeros(1 if eval_times is None else evals.size)
    row_evals = times if eval_times is None else evals
    lifted = _lift_rows(
        times[None, :],
        skeleton.merged_signs[None, :].astype(np.float64),
        np.array([n], dtype=np.int64),
        row_evals[None, :],
        np.array([row_evals.size], dtype=np.int64),
        skeleton.level_k,
        quadrature,
    )
    if eval_times is None:
        return np.concatenate([[0.0], lifted[0]])
    return lifted[0]


def _sample_increment_matrices(
    level_k: int,
    coverage: float,
    n_paths: int,
    rng: np.random.Generator,
    law: UnitExitLaw,
) -> tuple[np.ndarray, np.ndarray]:
    """Jump times and signs covering ``[0, coverage]`` on every row."""
    scale = 4.0**-level_k
    steps = int(math.ceil(4.0**level_k * coverage * 1.12)) + 24
    durations = law.sample(rng, n_paths * steps).reshape(n_paths, steps) * scale
    times = np.cumsum(durations, axis=1)
    signs = (2 * rng.integers(0, 2, size=(n_paths, steps)) - 1).astype(np.float64)
    while times[:, -1].min() < coverage:
        extra = max(int(0.25 * steps), 8)
        more = law.sample(rng, n_paths * extra).reshape(n_paths, extra) * scale
        times = np.hstack([times, times[:, -1:] + np.cumsum(more, axis=1)])
        more_signs = (
            2 * rng.integers(0, 2, size=(n_paths, extra)) - 1
        ).astype(np.float64)
        signs = np.hstack([signs, more_signs])
        steps += extra
    return times, signs


def fbm_sample(
    params: FbmParams,
    level_k: int,
    eval_times: Sequence[float],
    n_paths: int,
    *,
    rng: np.random.Generator,
    quadrature: KernelQuadrature | None = None,
    law: UnitExitLaw | None = None,
) -> np.ndarray:
    """Monte Carlo matrix of ``B_H`` values at fixed clock times.

    Simulates ``n_paths`` fresh driving walks at level ``level_k`` covering
    the last evaluation time and lifts each through the spectral kernel;
    returns shape ``(n_paths, len(eval_times))``.  ``eval_times`` must be
    nonnegative and nondecreasing.
    """
    evals = np.asarray(eval_times, dtype=np.float64)
    if evals.ndim != 1 or evals.size == 0:
        raise ValueError("eval_times must be a nonempty 1-D sequence")
    if np.any(evals < 0.0) or np.any(np.diff(evals) < 0.0):
        raise ValueError("eval_times must be nonnegative and nondecreasing")
    if evals[-1] == 0.0:
        return np.zeros((n_paths, evals.size))
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if params.hurst != 0.5:
        # fail before simulating when the exponent is out of range
        quadrature = _resolve_quadrature(params, quadrature)
    law = law or UnitExitLaw()
    times, signs = _sample_increment_matrices(
        level_k, float(evals[-1]), n_paths, rng, law
    )
    if params.hurst == 0.5:
        walks = np.cumsum(signs, axis=1) * 2.0**-level_k
        hits = (times[:, :, None] <= evals[None, None, :]).sum(axis=1)
        padded = np.concatenate([np.zeros((n_paths, 1)), walks], axis=1)
        return np.take_along_axis(padded, hits, axis=1)
    # keep events through the first one at/after the last evaluation time
    counts = (times < evals[-1]).sum(axis=1).astype(np.int64) + 1
    eval_rows = np.broadcast_to(evals, (n_paths, evals.size)).copy()
    ecounts = np.full(n_paths, evals.size, dtype=np.int64)
    return _lift_rows(
        times, signs, counts, eval_rows, ecounts, level_k, quadrature
    )


# ---------------------------------------------------------------------------
# Price tables: geometric fractional price, discounted payoff, walk features.
# ---------------------------------------------------------------------------

def _assemble_price_table(
    params: FbmParams,
    level_k: int,
    steps: int,
    horizon: float,
    raw_times: np.ndarray,
    raw_walks: np.ndarray,
    raw_lift: np.ndarray,
    signs: np.ndarray,
) -> PayoffTable:
    inside = raw_times <= horizon
    rows = np.arange(raw_times.shape[0])
    last_inside = inside.sum(axis=1) - 1
    times = np.minimum(raw_times, horizon)
    walks = np.where(inside, raw_walks, raw_walks[rows, last_inside][:, None])
    lift = np.where(inside, raw_lift, raw_lift[rows, last_inside][:, None])
    price = np.exp(params.drift * times + params.sigma * lift)
    payoffs = np.exp(-params.discount_rate * times) * np.asarray(
        params.payoff(price), dtype=np.float64
    )
    running_max = np.maximum.accumulate(walks, axis=1)
    running_integral = np.concatenate(
        [
            np.zeros((walks.shape[0], 1)),
            np.cumsum(walks[:, :-1] * np.diff(times, axis=1), axis=1),
        ],
        axis=1,
    )
    return PayoffTable(
        level_k=level_k,
        steps=steps,
        horizon=horizon,
        payoffs=payoffs,
        times=times,
        walks=walks,
        raw_times=raw_times,
        raw_walks=raw_walks,
        signs=signs,
        running_max=running_max,
        running_integral=running_integral,
    )


def _lift_event_grid(
    params: FbmParams,
    level_k: int,
    raw_times: np.ndarray,
    signs: np.ndarray,
    quadrature: KernelQuadrature | None,
) -> np.ndarray:
    """``B_H`` at every raw event time, column 0 pinned at the start value 0."""
    n_paths, width = raw_times.shape
    steps = width - 1
    if params.sigma == 0.0:
        return np.zeros_like(raw_times)
    if params.hurst == 0.5:
        return np.concatenate(
            [
                np.zeros((n_paths, 1)),
                np.cumsum(signs, axis=1, dtype=np.float64) * 2.0**-level_k,
            ],
            axis=1,
        )
    quadrature = _resolve_quadrature(params, quadrature)
    counts = np.full(n_paths, steps, dtype=np.int64)
    lifted = _lift_rows(
        np.ascontiguousarray(raw_times[:, 1:]),
        signs.astype(np.float64),
        counts,
        np.ascontiguousarray(raw_times[:, 1:]),
        counts,
        level_k,
        quadrature,
    )
    return np.concatenate([np.zeros((n_paths, 1)), lifted], axis=1)


def fbm_payoff_table(
    skeletons: Sequence[BrownianSkeleton],
    params: FbmParams,
    quadrature: KernelQuadrature | None = None,
    *,
    horizon: float | None = None,
) -> PayoffTable:
    """Discounted fractional price payoffs along already-built skeletons.

    Lifts every skeleton's driving walk to ``B_H``, prices
    ``W_H = exp(drift t + sigma B_H)``, tabulates
    ``exp(-discount_rate t) * payoff(W_H)`` at the merged event times (frozen
    at the horizon), and keeps the walk state as regression features.  Every
    skeleton must carry at least the step-budget many merged events.
    """
    if params.payoff is None:
        raise ValueError("price tables need a terminal payoff map on FbmParams")
    if not skeletons:
        raise ValueError("needs at least one skeleton")
    level_k = skeletons[0].level_k
    horizon = skeletons[0].horizon if horizon is None else float(horizon)
    steps = step_budget(level_k, horizon)
    n = len(skeletons)
    raw_times = np.zeros((n, steps + 1))
    raw_walks = np.zeros((n, steps + 1))
    signs = np.zeros((n, steps), dtype=np.int8)
    for row, skel in enumerate(skeletons):
        if skel.level_k != level_k:
            raise ValueError("skeletons must share one resolution level")
        if skel.dim_p != 1:
            raise ValueError("the fractional lift reads a scalar driving walk")
        if skel.merged_times.size < steps:
            raise ValueError(
                f"skeleton {row} has {skel.merged_times.size} merged events, "
                f"fewer than the step budget {steps}; simulate with min_events"
            )
        raw_times[row, 1:] = skel.merged_times[:steps]
        raw_walks[row, 1:] = (
            np.cumsum(skel.merged_signs[:steps], dtype=np.float64) * skel.spacing
        )
        signs[row] = skel.merged_signs[:steps]
    raw_lift = _lift_event_grid(params, level_k, raw_times, signs, quadrature)
    return _assemble_price_table(
        params, level_k, steps, horizon, raw_times, raw_walks, raw_lift, signs
    )


def fbm_payoff_table_from_sample(
    params: FbmParams,
    level_k: int,
    n_paths: int,
    *,
    horizon: float,
    rng: np.random.Generator,
    quadrature: KernelQuadrature | None = None,
    law: UnitExitLaw | None = None,
) -> PayoffTable:
    """Simulate fresh driving walks and tabulate the fractional price payoff.

    Same table layout as :func:`fbm_payoff_table` but the walks are drawn
    here (step budget ``ceil(2^(2k) * horizon)`` jumps per path), which is
    the cheap route to large regression samples.
    """
    if params.payoff is None:
        raise ValueError("price tables need a terminal payoff map on FbmParams")
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    steps = step_budget(level_k, horizon)
    law = law or UnitExitLaw()
    scale = 4.0**-level_k
    durations = law.sample(rng, n_paths * steps).reshape(n_paths, steps) * scale
    sign_rows = (2 * rng.integers(0, 2, size=(n_paths, steps)) - 1).astype(np.int8)
    zeros = np.zeros((n_paths, 1))
    raw_times = np.concatenate([zeros, np.cumsum(durations, axis=1)], axis=1)
    raw_walks = np.concatenate(
        [zeros, np.cumsum(sign_rows, axis=1, dtype=np.float64) * 2.0**-level_k],
        axis=1,
    )
    raw_lift = _lift_event_grid(params, level_k, raw_times, sign_rows, quadrature)
    return _assemble_price_table(
        params, level_k, steps, float(horizon), raw_times, raw_walks, raw_lift,
        sign_rows,
    )
