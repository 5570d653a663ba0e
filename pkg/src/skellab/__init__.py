"""skellab — a numerical laboratory for discrete calculus on Brownian hitting-time skeletons.

The package simulates dyadic hitting-time skeletons of Brownian motion,
evaluates non-anticipative path functionals along them, forms the discrete
derivative / generator / local-time operators of the induced walk calculus,
solves optimal-stopping and backward-equation problems on the skeleton
filtration, and drives rough (fractional) payoff experiments — all behind a
reproducible command-line interface.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .skeleton import (
    BrownianSkeleton,
    GridBrownianPath,
    InfoState,
    SeriesTruncationError,
    SkeletonTieError,
    UnitExitLaw,
    build_skeleton,
    coupled_levels,
    evaluate_A,
    info_state,
    rng_stream,
    sample_unit_exit_time,
    simulate_grid_path,
)

from .functionals import (
    Coordinate,
    DiscountedPointwise,
    IntegralKernel,
    NonFiniteValueError,
    PathFunctional,
    PiecewiseConstantPath,
    RunningMax,
    SmoothPointwise,
    TimeIntegral,
    path_from_skeleton,
    standard_bump,
)

from .operators import (
    CrossingLocalTimeField,
    EnergyStats,
    MartingaleResidual,
    OperatorSeries,
    PointwiseProbe,
    VerticalGridDerivative,
    covariation_bracket,
    crossing_local_time,
    discrete_derivative,
    discrete_generator,
    energy,
    martingale_residual,
    operator_series,
    pointwise_probe,
    spacetime_localtime_sum,
    summation_by_parts_residual,
    tanaka_residual,
    vertical_grid_derivative,
)

from .fbm import (
    FbmParams,
    KernelQuadrature,
    fbm_payoff_table,
    fbm_payoff_table_from_sample,
    fbm_sample,
    fbm_skeleton,
)

from .snell import (
    BsdeSolution,
    LatticeSolution,
    LowerBoundResult,
    PayoffTable,
    QuantizedExitLaw,
    StoppingPolicy,
    TreeSolution,
    ValueTable,
    binomial_value,
    discrete_bsde_solve,
    dp_backward,
    extract_stopping_time,
    lower_bound_resimulate,
    payoff_table_from_sample,
    payoff_table_from_skeletons,
    payoff_table_from_state,
    step_budget,
    tree_value,
)

__all__ = [
    "FbmParams",
    "KernelQuadrature",
    "fbm_payoff_table",
    "fbm_payoff_table_from_sample",
    "fbm_sample",
    "fbm_skeleton",
    "BsdeSolution",
    "LatticeSolution",
    "LowerBoundResult",
    "PayoffTable",
    "QuantizedExitLaw",
    "StoppingPolicy",
    "TreeSolution",
    "ValueTable",
    "binomial_value",
    "discrete_bsde_solve",
    "dp_backward",
    "extract_stopping_time",
    "lower_bound_resimulate",
    "payoff_table_from_sample",
    "payoff_table_from_skeletons",
    "payoff_table_from_state",
    "step_budget",
    "tree_value",
    "CrossingLocalTimeField",
    "EnergyStats",
    "MartingaleResidual",
    "OperatorSeries",
    "PointwiseProbe",
    "VerticalGridDerivative",
    "covariation_bracket",
    "crossing_local_time",
    "discrete_derivative",
    "discrete_generator",
    "energy",
    "martingale_residual",
    "operator_series",
    "pointwise_probe",
    "spacetime_localtime_sum",
    "summation_by_parts_residual",
    "tanaka_residual",
    "vertical_grid_derivative",
    "Coordinate",
    "DiscountedPointwise",
    "IntegralKernel",
    "NonFiniteValueError",
    "PathFunctional",
    "PiecewiseConstantPath",
    "RunningMax",
    "SmoothPointwise",
    "TimeIntegral",
    "path_from_skeleton",
    "standard_bump",
    "__version__",
    "BrownianSkeleton",
    "GridBrownianPath",
    "InfoState",
    "SeriesTruncationError",
    "SkeletonTieError",
    "UnitExitLaw",
    "build_skeleton",
    "coupled_levels",
    "evaluate_A",
    "info_state",
    "rng_stream",
    "sample_unit_exit_time",
    "simulate_grid_path",
]
