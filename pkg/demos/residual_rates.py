"""Decay of the Vlasov residual of f_[K] along modified trajectories.

Prints the sup over a few hundred support points at t = 50 ... 800 and the
fitted exponent with the log power frozen at K + 1.
"""

import numpy as np

from vpscatter.approx import ApproxSolution
from vpscatter.diagnostics import DecaySeries, fit_rate
from vpscatter.expansion import build_table
from vpscatter.oracles import random_support_points
from vpscatter.profile import default_base_grid, default_profile

TIMES = (50.0, 100.0, 200.0, 400.0, 800.0)


def main():
    prof = default_profile()
    table = build_table(prof, 2, default_base_grid(prof, 64))
    y, p = random_support_points(table, 200, seed=1)
    for K in range(3):
        sol = ApproxSolution(table, K)
        sup = []
        for t in TIMES:
            sup.append(float(np.max(np.abs(sol.vlasov_residual_yp(t, y, p)))))
        fit = fit_rate(DecaySeries(TIMES, tuple(sup)), K + 1)
        print(f"K={K}  " + "  ".join(f"{v:.3e}" for v in sup) + f"  alpha={fit.alpha:.3f}")


if __name__ == "__main__":
    main()
