"""Independent derivation of the constants frozen in the C++ tests.

Run: python3 tests/oracles/derive_constants.py
"""
import math

import numpy as np
from scipy import optimize, stats

CAPACITY = 850.0
POINTS = [(1.0, 715.0), (20.0, 3637.0)]


def battery():
    # lifetime * idle + (lifetime / interval) * per_request = capacity
    a = np.array([[life, life / interval] for interval, life in POINTS])
    b = np.full(len(POINTS), CAPACITY)
    idle, per_request = np.linalg.solve(a, b)
    return idle, per_request, CAPACITY / idle


def rayleigh_cdf(r, sigma):
    return 1.0 - math.exp(-r * r / (2.0 * sigma * sigma))


def mixture(q5=0.756, q10=0.931, ratio=4.0):
    """Two-component Rayleigh mixture with sigma2 = ratio * sigma1.

    For each weight p, sigma1 is the root of the 5 m quantile equation; the
    outer root search over p then matches the 10 m quantile. Of the two roots,
    the one with the larger weight on the narrow component is kept.
    """

    def sigma1_for(p):
        f = lambda s: p * rayleigh_cdf(5, s) + (1 - p) * rayleigh_cdf(5, ratio * s) - q5
        return optimize.brentq(f, 1e-3, 100.0)

    def residual(p):
        s = sigma1_for(p)
        return p * rayleigh_cdf(10, s) + (1 - p) * rayleigh_cdf(10, ratio * s) - q10

    grid = np.linspace(0.5, 0.999, 2000)
    values = [residual(p) for p in grid]
    roots = [
        optimize.brentq(residual, grid[i], grid[i + 1], xtol=1e-15)
        for i in range(len(grid) - 1)
        if values[i] * values[i + 1] < 0
    ]
    p = max(roots)
    s1 = sigma1_for(p)
    return p, s1, ratio * s1


def latency(mean=36.6, spread=6.15, lo=10.0, hi=170.0):
    a, b = (lo - mean) / spread, (hi - mean) / spread
    return stats.truncnorm.mean(a, b, loc=mean, scale=spread)


if __name__ == "__main__":
    idle, per_request, idle_only = battery()
    print(f"idle_mah_per_min      = {float(idle)!r}")
    print(f"per_request_mah       = {float(per_request)!r}")
    print(f"idle_only_lifetime    = {float(idle_only)!r}")
    p, s1, s2 = mixture()
    print(f"mixture_p             = {float(p)!r}")
    print(f"mixture_sigma1_m      = {float(s1)!r}")
    print(f"mixture_sigma2_m      = {float(s2)!r}")
    print(f"latency_truncated_mean = {float(latency())!r}")
