"""Latent sampling designs and the variance of design means.

Prints small SRS, LHS, LPSS and Sobol designs on the unit square, then the
replicate-variance ratio against SRS for an additive and an interaction test
function.

    python demos/latent_designs.py
"""
import numpy as np

from flowrecon import metrics, sampling


def show(design, bins=4):
    grid = np.zeros((bins, bins), dtype=int)
    for x, y in design.points:
        grid[bins - 1 - min(int(y * bins), bins - 1), min(int(x * bins), bins - 1)] += 1
    print(f"{design.scheme}:")
    for row in grid:
        print("   " + " ".join(str(v) for v in row))


def main():
    for scheme in ("SRS", "LHS", "LPSS", "Sobol"):
        show(sampling.make_design(scheme, 16, 2, seed=3))

    for g, d in (("additive", 4), ("interaction", 2)):
        study = metrics.mc_variance_study(["LHS", "LPSS", "Sobol"], g, 64, d, 500, seed=0)
        ratios = ", ".join(f"{s} {r:.2e}" for s, r in study.ratios.items())
        print(f"{g} (d={d}, n=64): variance ratio vs SRS: {ratios}")


if __name__ == "__main__":
    main()
