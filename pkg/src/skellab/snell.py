"""Optimal stopping and discrete backward equations on the hitting-time walk.

The stopping problem lives on the step index set ``{0, ..., steps}`` of the
embedded walk: values follow the dynamic programming recursion

    V_i = max(Z_i, E[V_{i+1} | state at step i]),

with the conditional expectation realized three ways:

* ``binomial`` — exact recursion on the recombining (step, position) lattice,
  valid for payoffs that depend only on the step index and the walk value;
* ``tree`` — exact recursion on the non-recombining product space obtained by
  quantizing the unit exit-time law to ``m`` support points, so each node
  carries its own clock history;
* ``regression`` — least-squares Monte Carlo on a path sample, refitting the
  continuation value at every step on polynomial features of the walk state.

A horizon ``T`` enters through the step budget ``ceil(2**(2k) * T)`` and,
when given, by freezing payoffs at the last event time before ``T`` while the
walk itself keeps moving (evaluation at ``T_i ^ T``).  The same machinery
drives a discrete backward-equation solver with an implicit driver step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Sequence

import numpy as np

from .skeleton import BrownianSkeleton, UnitExitLaw

__all__ = [
    "TREE_BUDGET_DEFAULT",
    "QuantizedExitLaw",
    "PayoffTable",
    "ValueTable",
    "StoppingPolicy",
    "LatticeSolution",
    "TreeSolution",
    "LowerBoundResult",
    "BsdeSolution",
    "step_budget",
    "payoff_table_from_sample",
    "payoff_table_from_skeletons",
    "payoff_table_from_state",
    "dp_backward",
    "binomial_value",
    "tree_value",
    "extract_stopping_time",
    "lower_bound_resimulate",
    "discrete_bsde_solve",
]

TREE_BUDGET_DEFAULT = 2**24
TIE_TOLERANCE = 1e-12

# raw regression features per (path, step): walk value, step index, running
# maximum, running clock time, running time integral of the walk
_FEATURE_NAMES = ("walk", "step", "running_max", "running_time", "running_integral")


def step_budget(level_k: int, horizon: float) -> int:
    """Number of walk steps resolving a clock horizon, ceil(2**(2k) * T)."""
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    return int(math.ceil(4.0**level_k * float(horizon)))


# --------------------------------------------------------------------------
# quantized exit law
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedExitLaw:
    """Finite support approximation of the unit exit-time law.

    ``points`` and ``probabilities`` define a discrete law for the unit exit
    time tau; rescaling by ``2**(-2k)`` turns it into the clock-increment law
    at level ``k``.  Construct via :meth:`moment_matched`.
    """

    points: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=float)
        probs = np.asarray(self.probabilities, dtype=float)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "probabilities", probs)
        if points.ndim != 1 or points.shape != probs.shape:
            raise ValueError("points and probabilities must be 1-d and congruent")
        if np.any(points <= 0.0):
            raise ValueError("exit-time support points must be positive")
        if np.any(probs < 0.0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        if abs(float(points @ probs) - 1.0) > 1e-9:
            raise ValueError("quantized law must have unit mean")

    @property
    def size(self) -> int:
        return int(self.points.size)

    @classmethod
    def moment_matched(cls, m: int, law: UnitExitLaw | None = None) -> "QuantizedExitLaw":
        """Smallest m-point law matching the exit-time moments up to order 2m-1.

        ``m = 1`` collapses the clock increment to its mean, ``m = 2`` matches
        the variance as well, and ``m = 3`` is the Gaussian-quadrature rule of
        the law (nodes and weights from its first five moments).
        """
        law = law or UnitExitLaw()
        if m == 1:
            return cls(np.array([1.0]), np.array([1.0]))
        if m == 2:
            sigma = math.sqrt(law.moment(2) - 1.0)
            return cls(
                np.array([1.0 - sigma, 1.0 + sigma]), np.array([0.5, 0.5])
            )
        if m == 3:
            moments = np.array([1.0] + [law.moment(i) for i in range(1, 6)])
            hankel = np.array([moments[j : j + 3] for j in range(3)])
            rhs = -moments[3:6]
            c0, c1, c2 = np.linalg.solve(hankel, rhs)
            roots = np.roots([1.0, c2, c1, c0])
            if np.max(np.abs(roots.imag)) > 1e-10:
                raise ArithmeticError("quadrature nodes of the exit law are not real")
            points = np.sort(roots.real)
            weights = np.linalg.solve(np.vander(points, increasing=True).T, moments[:3])
            rule = cls(points, weights)
            check = np.array([float(points**i @ weights) for i in range(3, 6)])
            if not np.allclose(check, moments[3:6], rtol=1e-8):
                raise ArithmeticError("quadrature rule fails to reproduce the moments")
            return rule
        raise ValueError("moment matching is implemented for m in {1, 2, 3}")


# --------------------------------------------------------------------------
# payoff tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PayoffTable:
    """Payoffs Z_i per (path, step), plus the walk state that generated them.

    ``times`` and ``walks`` are clock times and walk values at ``T_i ^ T``
    (equal to the raw arrays when no horizon freezes the payoff);
    ``raw_times``/``raw_walks`` never freeze.  A table built from a state
    payoff alone carries ``state_payoff`` and no path sample.
    """

    level_k: int
    steps: int
    horizon: float | None = None
    payoffs: np.ndarray | None = None
    times: np.ndarray | None = None
    walks: np.ndarray | None = None
    raw_times: np.ndarray | None = None
    raw_walks: np.ndarray | None = None
    signs: np.ndarray | None = None
    running_max: np.ndarray | None = None
    running_integral: np.ndarray | None = None
    state_payoff: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("a stopping problem needs at least one step")
        if self.payoffs is None and self.state_payoff is None:
            raise ValueError("a payoff table needs a path sample or a state payoff")
        if self.payoffs is not None:
            z = np.asarray(self.payoffs, dtype=float)
            if z.ndim != 2 or z.shape[1] != self.steps + 1:
                raise ValueError("payoffs must be (paths, steps + 1)")
            if not np.all(np.isfinite(z)):
                raise ValueError("payoffs must be finite")
            if np.any(z < 0.0):
                raise ValueError("payoffs must be nonnegative (obstacle assumption)")

    @property
    def n_paths(self) -> int:
        return 0 if self.payoffs is None else int(self.payoffs.shape[0])

    @property
    def spacing(self) -> float:
        return 2.0**-self.level_k


def _simulate_increments(
    level_k: int,
    steps: int,
    n_paths: int,
    rng: np.random.Generator,
    law: UnitExitLaw,
) -> tuple[np.ndarray, np.ndarray]:
    tau = law.sample(rng, n_paths * steps).reshape(n_paths, steps)
    durations = tau * 4.0**-level_k
    signs = (2 * rng.integers(0, 2, size=(n_paths, steps)) - 1).astype(np.int8)
    return durations, signs


def _table_from_matrices(
    payoff: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    level_k: int,
    steps: int,
    horizon: float | None,
    raw_times: np.ndarray,
    raw_walks: np.ndarray,
    signs: np.ndarray,
) -> PayoffTable:
    if horizon is None:
        times, walks = raw_times, raw_walks
    else:
        inside = raw_times <= horizon
        last_inside = inside.sum(axis=1) - 1
        frozen = raw_walks[np.arange(raw_walks.shape[0]), last_inside]
        times = np.minimum(raw_times, horizon)
        walks = np.where(inside, raw_walks, frozen[:, None])
    step_row = np.arange(steps + 1, dtype=float)[None, :]
    payoffs = np.asarray(payoff(step_row, times, walks), dtype=float)
    if payoffs.shape != walks.shape:
        payoffs = np.broadcast_to(payoffs, walks.shape).copy()
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


def payoff_table_from_sample(
    payoff: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    level_k: int,
    n_paths: int,
    *,
    rng: np.random.Generator,
    steps: int | None = None,
    horizon: float | None = None,
    law: UnitExitLaw | None = None,
    pointwise: bool = False,
) -> PayoffTable:
    """Simulate a fresh walk sample and tabulate ``payoff`` along it.

    Parameters
    ----------
    payoff
        Vectorized map ``(step_row, times, walks) -> payoff matrix``; the
        arguments are a ``(1, steps + 1)`` row of step indices and the
        ``(n_paths, steps + 1)`` matrices of clock times and walk values
        (frozen at the horizon when one is given).
    steps, horizon
        Give ``steps`` directly for a pure step-indexed problem, or give the
        clock ``horizon`` to derive ``steps = ceil(2**(2k) * horizon)`` and
        freeze payoffs at the horizon.
    pointwise
        Declare that ``payoff`` reads its arguments elementwise (no coupling
        across the step axis); the table then also carries it as a state
        payoff for the exact estimators.
    """
    if steps is None:
        if horizon is None:
            raise ValueError("give either steps or a clock horizon")
        steps = step_budget(level_k, horizon)
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    law = law or UnitExitLaw()
    durations, signs = _simulate_increments(level_k, int(steps), n_paths, rng, law)
    zeros = np.zeros((n_paths, 1))
    raw_times = np.concatenate([zeros, np.cumsum(durations, axis=1)], axis=1)
    raw_walks = np.concatenate(
        [zeros, np.cumsum(signs, axis=1, dtype=float) * 2.0**-level_k], axis=1
    )
    table = _table_from_matrices(
        payoff, level_k, int(steps), horizon, raw_times, raw_walks, signs
    )
    if pointwise:
        object.__setattr__(table, "state_payoff", payoff)
    return table


def payoff_table_from_skeletons(
    payoff: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    skeletons: Sequence[BrownianSkeleton],
    *,
    horizon: float | None = None,
) -> PayoffTable:
    """Tabulate ``payoff`` along already-simulated scalar skeletons.

    Every skeleton must carry at least ``steps`` merged events (simulate with
    ``min_events=steps``); the step budget comes from the common horizon.
    """
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
            raise ValueError("payoff tables are defined for scalar walks")
        if skel.merged_times.size < steps:
            raise ValueError(
                f"skeleton {row} has {skel.merged_times.size} merged events, "
                f"fewer than the step budget {steps}; simulate with min_events"
            )
        raw_times[row, 1:] = skel.merged_times[:steps]
        raw_walks[row, 1:] = (
            np.cumsum(skel.merged_signs[:steps], dtype=float) * skel.spacing
        )
        signs[row] = skel.merged_signs[:steps]
    return _table_from_matrices(
        payoff, level_k, steps, horizon, raw_times, raw_walks, signs
    )


def payoff_table_from_state(
    state_payoff: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    level_k: int,
    steps: int,
) -> PayoffTable:
    """Wrap a vectorized state payoff ``(step, time, walk) -> value`` for the
    exact estimators (no path sample attached)."""
    return PayoffTable(level_k=level_k, steps=int(steps), state_payoff=state_payoff)


# --------------------------------------------------------------------------
# value tables and stopping policies
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueTable:
    """Snell-envelope estimates V_i.

    ``values`` holds per-(path, step) estimates whenever a path sample was
    attached; the exact estimators additionally expose their state-indexed
    tables (per-step arrays over lattice positions or tree nodes).
    """

    estimator: str
    level_k: int
    steps: int
    root_value: float
    values: np.ndarray | None = None
    continuation: np.ndarray | None = None
    node_values: list[np.ndarray] | None = None


@dataclass(frozen=True)
class StoppingPolicy:
    """First-entry stopping rule extracted from a backward pass.

    The rule itself is transferable to fresh samples: regression policies
    carry the fitted per-step continuation coefficients, lattice policies the
    per-(step, position) stopping flags.  The ``stop_*`` arrays record the
    rule applied to the training sample (empty for state-only tables).
    """

    kind: str
    level_k: int
    steps: int
    root_value: float
    tie_tolerance: float = TIE_TOLERANCE
    stop_steps: np.ndarray | None = None
    stop_times: np.ndarray | None = None
    stop_flags: np.ndarray | None = None
    feature_degree: int | None = None
    step_rules: list | None = field(default=None, repr=False)
    node_stop_flags: list[np.ndarray] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class LowerBoundResult:
    """Resimulated lower bound for a stopping rule, with its optimality gap."""

    estimate: float
    standard_error: float
    reference_value: float
    gap: float
    sample_size: int
    stop_steps: np.ndarray


# --------------------------------------------------------------------------
# regression machinery
# --------------------------------------------------------------------------


def _raw_features(table: PayoffTable, step: int) -> np.ndarray:
    cols = (
        table.walks[:, step],
        np.full(table.n_paths, float(step)),
        table.running_max[:, step],
        table.times[:, step],
        table.running_integral[:, step],
    )
    return np.column_stack(cols)


def _design_matrix(raw: np.ndarray, degree: int) -> np.ndarray:
    columns = [np.ones(raw.shape[0])]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(raw.shape[1]), d):
            col = raw[:, combo[0]].copy()
            for j in combo[1:]:
                col *= raw[:, j]
            columns.append(col)
    return np.column_stack(columns)


def _fit_step(design: np.ndarray, target: np.ndarray, step: int, degree: int):
    """Least-squares fit returning (kept-column mask, coefficients, fitted)."""
    if design.shape[0] < design.shape[1]:
        raise ValueError(
            f"regression design matrix rank-deficient at step {step}: "
            f"{design.shape[0]} paths for {design.shape[1]} basis columns "
            f"(degree {degree} over features {_FEATURE_NAMES}); "
            "grow the sample or lower the degree"
        )
    if not np.all(np.isfinite(design)):
        raise ValueError(
            f"regression design matrix at step {step} contains non-finite entries"
        )
    spread = design.max(axis=0) - design.min(axis=0)
    mask = spread > 1e-12
    mask[0] = True
    kept = design[:, mask]
    beta, _, _, _ = np.linalg.lstsq(kept, target, rcond=None)
    return mask, beta, kept @ beta


def _dp_regression(
    table: PayoffTable, degree: int, tie_tolerance: float
) -> tuple[ValueTable, StoppingPolicy]:
    # The conditional expectation at step i is a least-squares fit whose
    # target is the realized payoff collected by the step-(i+1) rule, not the
    # fitted V_{i+1}: both estimate E[V_{i+1} | state], but the realized
    # target keeps per-step fit errors from compounding through the max.
    payoffs = table.payoffs
    n, width = payoffs.shape
    values = np.empty_like(payoffs)
    continuation = np.empty_like(payoffs)
    flags = np.zeros(payoffs.shape, dtype=bool)
    values[:, -1] = payoffs[:, -1]
    continuation[:, -1] = payoffs[:, -1]
    flags[:, -1] = True
    rules: list = [None] * (width - 1)
    cash = payoffs[:, -1].copy()
    for step in range(width - 2, -1, -1):
        design = _design_matrix(_raw_features(table, step), degree)
        mask, beta, fitted = _fit_step(design, cash, step, degree)
        rules[step] = (mask, beta)
        z = payoffs[:, step]
        continuation[:, step] = fitted
        stop = z >= fitted - tie_tolerance
        flags[:, step] = stop
        cash = np.where(stop, z, cash)
        values[:, step] = np.maximum(z, fitted)
    root = float(cash.mean())
    value_table = ValueTable(
        estimator="regression",
        level_k=table.level_k,
        steps=table.steps,
        root_value=root,
        values=values,
        continuation=continuation,
    )
    stop_steps = np.argmax(flags, axis=1)
    policy = StoppingPolicy(
        kind="regression",
        level_k=table.level_k,
        steps=table.steps,
        root_value=root,
        tie_tolerance=tie_tolerance,
        stop_steps=stop_steps,
        stop_times=table.times[np.arange(n), stop_steps],
        stop_flags=flags,
        feature_degree=degree,
        step_rules=rules,
    )
    return value_table, policy


# --------------------------------------------------------------------------
# exact estimators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeSolution:
    """Exact recursion on the recombining (step, position) lattice."""

    level_k: int
    steps: int
    value: float
    node_values: list[np.ndarray]
    stop_flags: list[np.ndarray]

    def positions(self, step: int) -> np.ndarray:
        return np.arange(-step, step + 1, 2)

    def _index(self, step: int, position: int) -> int:
        if not 0 <= step <= self.steps:
            raise ValueError(f"step {step} outside the lattice")
        if abs(position) > step or (position + step) % 2:
            raise ValueError(
                f"position {position} is outside the lattice at step {step}"
            )
        return (position + step) // 2

    def value_at(self, step: int, position: int) -> float:
        return float(self.node_values[step][self._index(step, position)])

    def stops_at(self, step: int, position: int) -> bool:
        return bool(self.stop_flags[step][self._index(step, position)])


def binomial_value(
    payoff: Callable[[int, np.ndarray], np.ndarray],
    level_k: int,
    steps: int,
    *,
    tie_tolerance: float = TIE_TOLERANCE,
) -> LatticeSolution:
    """Exact stopping value for a payoff of (step index, walk value) alone.

    The walk moves by one grid spacing with fair sign at every step, so the
    recursion collapses to the recombining lattice with 1/2-1/2 transitions.
    """
    h = 2.0**-level_k
    node_values: list[np.ndarray] = [np.empty(0)] * (steps + 1)
    stop_flags: list[np.ndarray] = [np.empty(0, dtype=bool)] * (steps + 1)
    level_values = np.asarray(
        payoff(steps, np.arange(-steps, steps + 1, 2) * h), dtype=float
    )
    if level_values.ndim == 0:
        level_values = np.full(steps + 1, float(level_values))
    _check_payoff_values(level_values, steps + 1, steps)
    node_values[steps] = level_values
    stop_flags[steps] = np.ones(steps + 1, dtype=bool)
    running = level_values
    for step in range(steps - 1, -1, -1):
        cont = 0.5 * (running[1:] + running[:-1])
        z = np.asarray(payoff(step, np.arange(-step, step + 1, 2) * h), dtype=float)
        if z.ndim == 0:
            z = np.full(step + 1, float(z))
        _check_payoff_values(z, step + 1, step)
        stop_flags[step] = z >= cont - tie_tolerance
        running = np.maximum(z, cont)
        node_values[step] = running
    return LatticeSolution(
        level_k=level_k,
        steps=steps,
        value=float(running[0]),
        node_values=node_values,
        stop_flags=stop_flags,
    )


def _check_payoff_values(values: np.ndarray, expected: int, step: int) -> None:
    if values.shape != (expected,):
        raise ValueError(
            f"payoff at step {step} returned shape {values.shape}, "
            f"expected ({expected},)"
        )
    if not np.all(np.isfinite(values)):
        raise ValueError(f"payoff at step {step} produced non-finite values")


@dataclass(frozen=True)
class TreeSolution:
    """Exact recursion on the quantized (duration, sign) product space."""

    level_k: int
    steps: int
    quantization: QuantizedExitLaw
    value: float
    stop_counts: np.ndarray
    node_counts: np.ndarray
    node_values: list[np.ndarray] | None = field(default=None, repr=False)
    node_stop_flags: list[np.ndarray] | None = field(default=None, repr=False)


def tree_value(
    payoff: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
    level_k: int,
    steps: int,
    quantization: QuantizedExitLaw,
    *,
    budget: int = TREE_BUDGET_DEFAULT,
    tie_tolerance: float = TIE_TOLERANCE,
    keep_tables: bool = False,
) -> TreeSolution:
    """Exact stopping value on the (2m)-ary tree of quantized increments.

    ``payoff`` maps ``(step index, clock times, walk values)`` to node
    payoffs, vectorized over the per-depth node arrays.  For payoffs that
    ignore the clock the result equals :func:`binomial_value` for every ``m``
    because the sign marginal stays fair and independent.
    """
    branching = 2 * quantization.size
    leaves = branching**steps
    if leaves > budget:
        raise ValueError(
            f"quantized tree needs {leaves} leaf states "
            f"(branching {branching}, depth {steps}), exceeding the budget "
            f"{budget}; required budget is {leaves}"
        )
    h = 2.0**-level_k
    branch_dt = np.repeat(quantization.points, 2) * 4.0**-level_k
    branch_da = np.tile([h, -h], quantization.size)
    branch_probs = np.repeat(quantization.probabilities, 2) * 0.5
    times = np.zeros(1)
    walks = np.zeros(1)
    payoff_levels: list[np.ndarray] = []
    for step in range(steps + 1):
        if step:
            times = (times[:, None] + branch_dt[None, :]).ravel()
            walks = (walks[:, None] + branch_da[None, :]).ravel()
        z = np.asarray(payoff(step, times, walks), dtype=float)
        if z.shape != times.shape:
            z = np.broadcast_to(z, times.shape).copy()
        if not np.all(np.isfinite(z)):
            raise ValueError(f"payoff at depth {step} produced non-finite values")
        payoff_levels.append(z)
    value_levels: list[np.ndarray] | None = [None] * (steps + 1) if keep_tables else None
    flag_levels: list[np.ndarray] | None = [None] * (steps + 1) if keep_tables else None
    stop_counts = np.zeros(steps + 1, dtype=np.int64)
    running = payoff_levels[steps]
    stop_counts[steps] = running.size
    if keep_tables:
        value_levels[steps] = running
        flag_levels[steps] = np.ones(running.size, dtype=bool)
    for step in range(steps - 1, -1, -1):
        cont = running.reshape(-1, branching) @ branch_probs
        z = payoff_levels[step]
        stop = z >= cont - tie_tolerance
        stop_counts[step] = int(stop.sum())
        running = np.maximum(z, cont)
        if keep_tables:
            value_levels[step] = running
            flag_levels[step] = stop
    return TreeSolution(
        level_k=level_k,
        steps=steps,
        quantization=quantization,
        value=float(running[0]),
        stop_counts=stop_counts,
        node_counts=branching ** np.arange(steps + 1, dtype=np.int64),
        node_values=value_levels,
        node_stop_flags=flag_levels,
    )


# --------------------------------------------------------------------------
# dp_backward dispatch
# --------------------------------------------------------------------------


def dp_backward(
    payoffs: PayoffTable,
    estimator: str,
    *,
    basis_degree: int = 2,
    quantization_m: int = 2,
    tree_budget: int = TREE_BUDGET_DEFAULT,
    tie_tolerance: float = TIE_TOLERANCE,
) -> tuple[ValueTable, StoppingPolicy]:
    """Backward dynamic programming pass V_i = max(Z_i, E[V_{i+1} | state]).

    ``regression`` requires a path sample in ``payoffs``; ``binomial`` and
    ``tree`` require a state payoff.  When a path sample accompanies a state
    payoff, the exact estimators also evaluate their solution along the
    sample (the walk keeps its raw positions there; exact estimators price
    the step-indexed problem, with the clock of a ``tree`` node quantized and
    of a ``binomial`` node set to the mean ``step * 2**(-2k)``).
    """
    if estimator == "regression":
        if payoffs.payoffs is None:
            raise ValueError("the regression estimator needs a path sample")
        return _dp_regression(payoffs, basis_degree, tie_tolerance)
    if estimator not in ("binomial", "tree"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if payoffs.state_payoff is None:
        raise ValueError(f"the {estimator} estimator needs a state payoff")
    state = payoffs.state_payoff
    dt2 = 4.0**-payoffs.level_k
    if estimator == "binomial":
        solution = binomial_value(
            lambda i, a: state(i, np.full_like(a, i * dt2), a),
            payoffs.level_k,
            payoffs.steps,
            tie_tolerance=tie_tolerance,
        )
        node_values = solution.node_values
        node_flags = solution.stop_flags
        root = solution.value
        kind = "lattice"
    else:
        law = QuantizedExitLaw.moment_matched(quantization_m)
        solution = tree_value(
            state,
            payoffs.level_k,
            payoffs.steps,
            law,
            budget=tree_budget,
            tie_tolerance=tie_tolerance,
            keep_tables=True,
        )
        node_values = solution.node_values
        node_flags = solution.node_stop_flags
        root = solution.value
        kind = "lattice" if quantization_m == 1 else "tree"
        if quantization_m == 1:
            # a one-point clock makes the tree a recombining lattice; collapse
            # the node tables so the policy can be applied to walk positions
            node_values, node_flags = _collapse_unit_tree(solution)
    values = continuation = None
    stop_steps = stop_times = stop_flags = None
    if payoffs.payoffs is not None and kind == "lattice":
        values = _lattice_along_sample(node_values, payoffs)
        stop_flags = _lattice_along_sample(node_flags, payoffs).astype(bool)
        stop_flags[:, -1] = True
        stop_steps = np.argmax(stop_flags, axis=1)
        stop_times = payoffs.times[np.arange(payoffs.n_paths), stop_steps]
    value_table = ValueTable(
        estimator=estimator,
        level_k=payoffs.level_k,
        steps=payoffs.steps,
        root_value=root,
        values=values,
        continuation=continuation,
        node_values=node_values,
    )
    policy = StoppingPolicy(
        kind=kind,
        level_k=payoffs.level_k,
        steps=payoffs.steps,
        root_value=root,
        tie_tolerance=tie_tolerance,
        stop_steps=stop_steps,
        stop_times=stop_times,
        stop_flags=stop_flags,
        node_stop_flags=node_flags,
    )
    return value_table, policy


def _collapse_unit_tree(solution: TreeSolution) -> tuple[list, list]:
    """Fold the 2-ary tree of an m=1 law onto the recombining lattice."""
    values: list[np.ndarray] = []
    flags: list[np.ndarray] = []
    for step in range(solution.steps + 1):
        tree_vals = solution.node_values[step]
        tree_flags = solution.node_stop_flags[step]
        # node index bits encode the sign history: bit 0 at branch "+"
        positions = np.zeros(tree_vals.size, dtype=np.int64)
        if step:
            idx = np.arange(tree_vals.size)
            digits = np.empty((step, tree_vals.size), dtype=np.int64)
            for d in range(step - 1, -1, -1):
                digits[d] = idx % 2
                idx //= 2
            positions = (1 - 2 * digits).sum(axis=0)
        lattice_positions = np.arange(-step, step + 1, 2)
        vals = np.empty(lattice_positions.size)
        flg = np.empty(lattice_positions.size, dtype=bool)
        for slot, pos in enumerate(lattice_positions):
            members = positions == pos
            vals[slot] = tree_vals[members][0]
            flg[slot] = tree_flags[members][0]
        values.append(vals)
        flags.append(flg)
    return values, flags


def _lattice_along_sample(levels: list[np.ndarray], table: PayoffTable) -> np.ndarray:
    positions = np.rint(table.raw_walks / table.spacing).astype(np.int64)
    out = np.empty(positions.shape, dtype=np.asarray(levels[0]).dtype)
    for step in range(table.steps + 1):
        pos = positions[:, step]
        if np.any(np.abs(pos) > step) or np.any((pos + step) % 2):
            raise ValueError(f"walk positions fall outside the lattice at step {step}")
        out[:, step] = np.asarray(levels[step])[(pos + step) // 2]
    return out


# --------------------------------------------------------------------------
# stopping-time extraction and resimulation
# --------------------------------------------------------------------------


def extract_stopping_time(
    values: ValueTable, payoffs: PayoffTable, path: int
) -> tuple[int, float]:
    """First step where the payoff meets the value estimate on one path.

    Returns ``(step index, clock time at that step)``; the terminal step
    always qualifies because the value table ends at the payoff.
    """
    if values.values is None:
        raise ValueError("the value table carries no per-path values")
    row_v = values.values[path]
    row_z = payoffs.payoffs[path]
    hits = np.flatnonzero(row_z >= row_v - TIE_TOLERANCE)
    step = int(hits[0])
    return step, float(payoffs.times[path, step])


def _apply_policy(policy: StoppingPolicy, table: PayoffTable) -> np.ndarray:
    if table.level_k != policy.level_k or table.steps != policy.steps:
        raise ValueError("policy and payoff table disagree on level or steps")
    if policy.kind == "regression":
        flags = np.zeros(table.payoffs.shape, dtype=bool)
        flags[:, -1] = True
        for step in range(table.steps):
            mask, beta = policy.step_rules[step]
            design = _design_matrix(_raw_features(table, step), policy.feature_degree)
            cont = design[:, mask] @ beta
            flags[:, step] = table.payoffs[:, step] >= cont - policy.tie_tolerance
        return np.argmax(flags, axis=1)
    if policy.kind == "lattice":
        flags = _lattice_along_sample(policy.node_stop_flags, table).astype(bool)
        flags[:, -1] = True
        return np.argmax(flags, axis=1)
    raise ValueError(
        "a quantized-tree policy has no per-path stopping rule; "
        "use quantization_m=1 or the binomial estimator"
    )


def lower_bound_resimulate(
    policy: StoppingPolicy, fresh: PayoffTable
) -> LowerBoundResult:
    """Value of the policy on an independent sample (a lower bound).

    Applies the transferred stopping rule to ``fresh`` paths, averages the
    payoffs collected at the rule's first entry, and reports the gap to the
    backward-pass root value.
    """
    if fresh.payoffs is None:
        raise ValueError("resimulation needs a payoff table with a path sample")
    if fresh.n_paths < 10**3:
        raise ValueError("resimulation needs at least 10^3 fresh paths")
    stop_steps = _apply_policy(policy, fresh)
    collected = fresh.payoffs[np.arange(fresh.n_paths), stop_steps]
    estimate = float(collected.mean())
    se = float(collected.std(ddof=1) / math.sqrt(collected.size))
    return LowerBoundResult(
        estimate=estimate,
        standard_error=se,
        reference_value=policy.root_value,
        gap=policy.root_value - estimate,
        sample_size=fresh.n_paths,
        stop_steps=stop_steps,
    )


# --------------------------------------------------------------------------
# discrete backward equation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BsdeSolution:
    """Solution of the discrete backward equation at the walk's step scale."""

    estimator: str
    level_k: int
    horizon: float
    steps: int
    value: float
    max_fixed_point_iterations: int


def _implicit_driver_step(
    expectation: np.ndarray,
    z_values: np.ndarray,
    t_values: np.ndarray | float,
    driver: Callable,
    dt2: float,
    tolerance: float,
    max_iterations: int,
) -> tuple[np.ndarray, int]:
    y = expectation.copy()
    for iteration in range(1, max_iterations + 1):
        y_next = expectation + np.asarray(driver(t_values, y, z_values), dtype=float) * dt2
        delta = float(np.max(np.abs(y_next - y), initial=0.0))
        y = y_next
        if delta < tolerance:
            return y, iteration
    raise RuntimeError(
        f"implicit driver step did not converge within {max_iterations} iterations"
    )


def discrete_bsde_solve(
    terminal: Callable[[np.ndarray], np.ndarray],
    driver: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    estimator: str = "tree",
    *,
    level_k: int,
    horizon: float,
    n_paths: int | None = None,
    rng: np.random.Generator | None = None,
    basis_degree: int = 2,
    fixed_point_tolerance: float = 1e-13,
    max_iterations: int = 100,
) -> BsdeSolution:
    """Backward equation Y_i = E[Y_{i+1} | state] + g(T_i, Y_i, Z_i) * 2**(-2k).

    The driver step is implicit in ``y`` and solved by fixed-point iteration;
    ``Z_i`` is the sign-weighted conditional expectation of ``Y_{i+1}``
    divided by the grid spacing.  ``terminal`` maps terminal walk values to
    the terminal condition.

    The ``tree`` estimator quantizes the clock to its mean (one support
    point), which turns the state space into the recombining lattice and the
    conditional expectations into exact half-half averages.  The
    ``regression`` estimator runs the same recursion on a simulated path
    sample with least-squares conditional expectations.
    """
    steps = step_budget(level_k, horizon)
    h = 2.0**-level_k
    dt2 = 4.0**-level_k
    if estimator == "tree":
        y = np.asarray(
            terminal(np.arange(-steps, steps + 1, 2) * h), dtype=float
        )
        if y.shape != (steps + 1,):
            y = np.broadcast_to(y, (steps + 1,)).copy()
        worst = 0
        for step in range(steps - 1, -1, -1):
            expectation = 0.5 * (y[1:] + y[:-1])
            z = (y[1:] - y[:-1]) / (2.0 * h)
            y, used = _implicit_driver_step(
                expectation,
                z,
                step * dt2,
                driver,
                dt2,
                fixed_point_tolerance,
                max_iterations,
            )
            worst = max(worst, used)
        return BsdeSolution(
            estimator="tree",
            level_k=level_k,
            horizon=horizon,
            steps=steps,
            value=float(y[0]),
            max_fixed_point_iterations=worst,
        )
    if estimator != "regression":
        raise ValueError(f"unknown estimator {estimator!r}")
    if rng is None or n_paths is None:
        raise ValueError("the regression estimator needs n_paths and an rng")
    table = payoff_table_from_sample(
        lambda i, t, a: np.zeros_like(a), level_k, n_paths, rng=rng, steps=steps
    )
    y = np.asarray(terminal(table.raw_walks[:, -1]), dtype=float)
    if y.shape != (n_paths,):
        y = np.broadcast_to(y, (n_paths,)).copy()
    worst = 0
    for step in range(steps - 1, -1, -1):
        design = _design_matrix(_raw_features(table, step), basis_degree)
        _, _, expectation = _fit_step(design, y, step, basis_degree)
        _, _, weighted = _fit_step(design, y * table.signs[:, step], step, basis_degree)
        z = weighted / h
        y, used = _implicit_driver_step(
            expectation,
            z,
            table.raw_times[:, step],
            driver,
            dt2,
            fixed_point_tolerance,
            max_iterations,
        )
        worst = max(worst, used)
    return BsdeSolution(
        estimator="regression",
        level_k=level_k,
        horizon=horizon,
        steps=steps,
        value=float(y.mean()),
        max_fixed_point_iterations=worst,
    )
