"""Modified versus free characteristics, written as CSV for plotting.

Usage: python demos/trajectories.py OUT.csv
"""

import sys

import numpy as np

from vpscatter.approx import emit_trajectories
from vpscatter.expansion import build_table
from vpscatter.profile import default_base_grid, default_profile


def main(path):
    prof = default_profile()
    table = build_table(prof, 0, default_base_grid(prof, 48))
    rng = np.random.default_rng(0)
    starts = [(rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.25, 0.25, 3)) for _ in range(8)]
    times = np.geomspace(1.0, 1e3, 25)
    rows = emit_trajectories(starts, times, table.splines[(0, 0)], path)
    print(f"{len(rows)} rows written to {path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "trajectories.csv")
