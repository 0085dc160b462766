"""
The spatial field on a regular lattice
======================================

The Matern field is represented by a sparse precision matrix on a regular
lattice. Away from the lattice edge its marginal standard deviation is
close to sigma, and the correlation at distance rho is about 0.1.
"""

import math

import numpy as np

from disagg import FieldHyper, LatticeSpec, SparseCholesky, precision_matrix

lattice = LatticeSpec(30, 30, 0.0, 0.0, 1.0, 8)
hyper = FieldHyper(math.log(1.0), math.log(6.0))
Q = precision_matrix(lattice, hyper)
print(f"{Q.shape[0]} nodes, {Q.nnz} non-zeros ({Q.nnz / Q.shape[0]:.1f} per row)")

# %%
# Dense inverse for the marginal variances and correlations.
S = np.linalg.inv(Q.toarray())
centre = 15 * 30 + 15
print(f"centre SD {math.sqrt(S[centre, centre]):.3f}; corner SD {math.sqrt(S[0, 0]):.3f} (edge inflation)")
for lag in (1, 3, 6, 9, 12):
    other = centre + lag
    corr = S[centre, other] / math.sqrt(S[centre, centre] * S[other, other])
    print(f"lag {lag:2d}: correlation {corr:.3f}")

# %%
# Sampling needs only a sparse Cholesky factor.
chol = SparseCholesky(Q)
draws = np.array([chol.sample(np.random.default_rng(k).standard_normal(Q.shape[0])) for k in range(400)])
print(f"empirical centre SD from 400 draws: {draws[:, centre].std():.3f}")
print(f"log-determinant of Q: {chol.logdet():.2f}")
