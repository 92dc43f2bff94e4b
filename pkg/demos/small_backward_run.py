"""A reduced backward solve (T 80 -> 20, 2e4 particles) with its remainder.

Under a minute on one core. The window is too short for the fitted rate to
settle near its asymptotic value; the full run in the acceptance suite does that.
"""

import time

from vpscatter import solver
from vpscatter.diagnostics import DecaySeries, fit_rate
from vpscatter.expansion import build_table
from vpscatter.profile import default_base_grid, default_profile


def main():
    prof = default_profile()
    table = build_table(prof, 1, default_base_grid(prof, 64))
    t0 = time.perf_counter()
    run = solver.run_finite_problem(table, 20.0, 80.0, M=20_000, n_grid=48, n_fine=64,
                                    output_times=(20.0, 30.0, 40.0, 60.0))
    print(f"run: {time.perf_counter() - t0:.0f} s, {run.initial.count} particles, "
          f"{run.params['refreshes']} field refreshes")
    stats = [solver.eval_remainder(run, t, n_samples=500) for t in (20.0, 30.0, 40.0, 60.0)]
    for s in stats:
        print(f"t={s.t:5.1f}  sup={s.sup:.4g}  rms={s.l2:.4g}")
    fit = fit_rate(DecaySeries(tuple(s.t for s in stats), tuple(s.sup for s in stats)), 2)
    print(f"remainder alpha (m=2) = {fit.alpha:.2f} +- {fit.alpha_ci:.2f}")
    drift = abs(run.series["mass"][-1] - run.series["mass"][0]) / run.series["mass"][0]
    print(f"relative mass drift {drift:.1e}")


if __name__ == "__main__":
    main()
