"""Compare the recursion engine against hand-derived low-order coefficients."""

from vpscatter.expansion import build_table
from vpscatter.oracles import closed_form_checks, rho11_grid_gap
from vpscatter.profile import default_base_grid, default_profile


def main():
    prof = default_profile()
    table = build_table(prof, 1, default_base_grid(prof, 64))
    for name, err in sorted(closed_form_checks(table, n=1000).items()):
        print(f"{name:10s} {err:.2e}")
    print(f"rho[1,1] on the grid {rho11_grid_gap(table):.2e}")


if __name__ == "__main__":
    main()
