"""
Recovering pixel-level effects from polygon counts
==================================================

Counts are only observed as totals over polygons, yet the regression
coefficients live at the pixel level. This script simulates such a data
set with known parameters, fits the model and compares the estimates with
the truth.
"""

import numpy as np

from disagg import ModelSpec, SimulationConfig, fit, prepare_data, simulate_dataset, summarize_fit

# %%
# A 40 x 40 pixel map cut into 25 Voronoi polygons. Each pixel has two
# covariates, a population weight and a latent incidence rate built from
# the covariates, a smooth Matern field and a polygon-level iid effect.
config = SimulationConfig(seed=7)
sim = simulate_dataset(config)
print(f"{len(sim.polygons)} polygons, covariates {sim.stack.names}")
print("true parameters:", {k: sim.truth[k] for k in ("beta0", "beta", "sigma", "rho", "sigma_u")})

# %%
# Preparation extracts the pixels of every polygon, checks for missing
# values and lays a regular lattice over the map for the spatial field.
prep = prepare_data(sim.polygons, sim.stack, sim.aggregation)
print(f"{prep.pixel_table.n_pixels} pixels, lattice of {prep.lattice.n_nodes} nodes")

# %%
# The fit integrates the latent effects out with a Laplace approximation
# and optimizes the hyperparameters.
result = fit(prep, ModelSpec())
print(summarize_fit(result, prep))

# %%
# Fixed effects against the truth, in posterior standard deviations.
truth = np.array([config.true_beta0, *config.true_beta])
z = (result.theta_hat[:3] - truth) / result.std_errors[:3]
for name, est, t, score in zip(result.labels[:3], result.theta_hat[:3], truth, z):
    print(f"{name:<10s} estimate {est:+.3f}  truth {t:+.3f}  z {score:+.2f}")

# %%
# The field hyperparameters are estimated on the log scale.
L = dict(zip(result.labels, result.theta_hat))
print(f"sigma {np.exp(L['log_sigma']):.2f} (truth {config.true_sigma}), "
      f"rho {np.exp(L['log_rho']):.1f} (truth {config.true_rho})")
