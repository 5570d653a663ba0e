"""Independent oracles for the frozen expected values used in the test suite.

Every non-trivial target number asserted by the tests is computed here by a
route that shares no code with the package. Run this script to regenerate
the table; the frozen constants in tests/ must match its output.

    python3 tools/oracles.py
"""
from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache

import numpy as np


# ---------------------------------------------------------------------------
# Exit-time moments for the unit-interval exit time tau = inf{t: |W(t)| = 1}.
#
# Survival series: P(tau > t) = (4/pi) sum_{n>=0} (-1)^n/(2n+1)
#                               * exp(-(2n+1)^2 pi^2 t / 8),
# so E tau^m = m int t^{m-1} P(tau > t) dt
#           = (4/pi) m! (8/pi^2)^m beta(2m+1),
# with beta the Dirichlet beta function. beta(3) = pi^3/32 and
# beta(5) = 5 pi^5/1536 give E tau = 1 and E tau^2 = 5/3 exactly.
# ---------------------------------------------------------------------------

def dirichlet_beta(s: int, terms: int = 200000) -> float:
    n = np.arange(terms)
    vals = (-1.0) ** n / (2.0 * n + 1.0) ** s
    return float(vals.sum())


def exit_time_moment(m: int) -> float:
    return (4.0 / math.pi) * math.factorial(m) * (8.0 / math.pi**2) ** m * dirichlet_beta(2 * m + 1)


# ---------------------------------------------------------------------------
# Optimal stopping of the +-2^{-k} fair walk, payoff g(a) = max(K - a, 0),
# K = 0.25, k = 2, 12 steps. Plain memoized recursion over (step, integer
# position), exact rational arithmetic. Cross-check: g is convex, the walk is
# a martingale, so g(A_i) is a submartingale and waiting until the last step
# is optimal; the value must equal E g(A_12) = K + E (A_12 - K)^+.
# ---------------------------------------------------------------------------

def binomial_put_oracle(strike: Fraction, spacing: Fraction, steps: int) -> Fraction:
    @lru_cache(maxsize=None)
    def value(i: int, j: int) -> Fraction:
        exercise = max(strike - j * spacing, Fraction(0))
        if i == steps:
            return exercise
        cont = Fraction(1, 2) * (value(i + 1, j + 1) + value(i + 1, j - 1))
        return max(exercise, cont)

    return value(0, 0)


def terminal_put_value(strike: Fraction, spacing: Fraction, steps: int) -> Fraction:
    total = Fraction(0)
    for up in range(steps + 1):
        j = up - (steps - up)
        payoff = max(strike - j * spacing, Fraction(0))
        total += Fraction(math.comb(steps, up), 2**steps) * payoff
    return total


# ---------------------------------------------------------------------------
# Var(int_0^1 sgn(B(s)) ds): the occupation time of (0, inf) is arcsine
# distributed, X = 2*A - 1 with E A = 1/2, E A^2 = 3/8, so Var X = 1/2.
# Cross-checked by crude Monte Carlo on a fine grid.
# ---------------------------------------------------------------------------

def sgn_integral_variance_mc(paths: int = 20000, steps: int = 4096, seed: int = 7) -> float:
    rng = np.random.default_rng(seed)
    dt = 1.0 / steps
    acc = np.zeros(paths)
    b = np.zeros(paths)
    for _ in range(steps):
        acc += np.sign(b) * dt
        b += rng.standard_normal(paths) * math.sqrt(dt)
    return float(acc.var())


# ---------------------------------------------------------------------------
# Fractional covariance target and misc closed forms.
# ---------------------------------------------------------------------------

def fbm_covariance(s: float, t: float, hurst: float) -> float:
    return 0.5 * (s ** (2 * hurst) + t ** (2 * hurst) - abs(t - s) ** (2 * hurst))


def main() -> None:
    print("== exit-time moments (series) vs closed forms ==")
    closed = {1: Fraction(1), 2: Fraction(5, 3), 3: Fraction(61, 15)}
    for m in range(1, 6):
        series = exit_time_moment(m)
        ref = f"  closed {float(closed[m]):.15f}" if m in closed else ""
        print(f"E tau^{m} = {series:.15f}{ref}")
    print(f"Var tau = {exit_time_moment(2) - exit_time_moment(1)**2:.15f}  closed {2/3:.15f}")

    print("\n== binomial put (K=0.25, spacing 2^-2, 12 steps) ==")
    strike = Fraction(1, 4)
    spacing = Fraction(1, 4)
    dp = binomial_put_oracle(strike, spacing, 12)
    terminal = terminal_put_value(strike, spacing, 12)
    print(f"DP value        = {dp} = {float(dp):.17g}")
    print(f"terminal E g    = {terminal} = {float(terminal):.17g}")
    print(f"submartingale check (must be equal): {dp == terminal}")

    print("\n== Var(int_0^1 sgn(B) ds) ==")
    print(f"arcsine closed form = {0.5}")
    mc = sgn_integral_variance_mc()
    print(f"fine-grid MC        = {mc:.4f} (20000 paths, SE ~ 0.005)")

    print("\n== misc closed forms ==")
    print(f"sqrt(2/pi)      = {math.sqrt(2 / math.pi):.16f}")
    print(f"exp(0.1)        = {math.exp(0.1):.16f}")
    print(f"fbm cov (0.3, 0.7; H=0.7) = {fbm_covariance(0.3, 0.7, 0.7):.16f}")
    print(f"fbm var target at t in (0.25, 0.5, 1.0), H=0.7: "
          f"{[round(fbm_covariance(t, t, 0.7), 12) for t in (0.25, 0.5, 1.0)]}")

    print("\n== 4-step walk (+,-,+,-) local time by hand ==")
    # positions after each step: 1, 0, 1, 0; arrivals counted among steps
    # 1..N-1 = 1..3: level 1 receives arrivals at steps 1 and 3 (both from
    # below), level 0 receives one arrival at step 2 (from above).
    print("level 1: u=2 d=0 -> L = 2 * 2^-k;  level 0: u=0 d=1 -> L = 2^-k")
    print("Tanaka visit count at x=0 over n<=4 of A(T_{n-1})=0: steps 1,3 -> 2")


if __name__ == "__main__":
    main()
