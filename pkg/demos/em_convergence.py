"""Euler-Maruyama on the 1D OU-Levy process against its exact marginal.

The Wasserstein-1 gap should shrink with the step size (slowly: the
expected rate is a fractional power of dt).

Run:  python demos/em_convergence.py
"""

import scipy.stats

from fracsde.sde import TimeGrid, exact_marginal, make_benchmark, simulate

spec = make_benchmark("ou_levy", d=1, T=1.0)
n = 200_000
exact = exact_marginal(spec, spec.T, n, seed=1).points[:, 0]
print("W1 floor between two exact samples:",
      f"{scipy.stats.wasserstein_distance(exact, exact_marginal(spec, 1.0, n, seed=2).points[:, 0]):.2E}")
for dt in (0.2, 0.1, 0.05, 0.02, 0.01):
    steps = int(round(spec.T / dt))
    for scheme in ("forward", "implicit"):
        em = simulate(spec, scheme, TimeGrid.uniform(spec.T, steps), n, seed=3,
                      save_at=[steps])[0].points[:, 0]
        w1 = scipy.stats.wasserstein_distance(em, exact)
        print(f"dt={dt:<5} {scheme:>8}: W1 = {w1:.2E}")
