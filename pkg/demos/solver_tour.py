"""Every sampler against an exact Gaussian score, with no training involved.

The data distribution is N((1, -1), 0.25 I), so the noise predictor is known
in closed form.  For each solver we print the sample moments at a few step
counts, which shows how quickly each integrator converges.

    python demos/solver_tour.py
"""

import numpy as np

from diffkit import schedules, solvers
from diffkit.oracles import GaussianOracle

MEAN, VAR = np.array([1.0, -1.0]), 0.25

SETUPS = [
    ("linear", "ddpm", "quadratic"),
    ("linear", "ddim", "quadratic"),
    ("linear", "sde_dpmpp_1", "quadratic"),
    ("linear", "ode_dpmpp_2m", "quadratic"),
    ("edm", "edm_euler", None),
    ("edm", "edm_heun", None),
    ("rectified", "rf_euler", None),
]


def main():
    print(f"{'solver':<14}{'steps':>6}{'mean err':>10}{'var':>8}   (target var {VAR})")
    for sched_name, solver, spacing in SETUPS:
        oracle = GaussianOracle(MEAN, VAR, schedules.make_schedule(sched_name))
        for n in (5, 20, 80):
            cfg = solvers.SampleConfig(solver, n, n_samples=8192, seed=0, spacing=spacing)
            x = solvers.sample(oracle, cfg)
            err = np.abs(x.mean(0) - MEAN).max()
            print(f"{solver:<14}{n:>6}{err:>10.4f}{x.var(0).mean():>8.3f}")


if __name__ == "__main__":
    main()
