"""
Numerical checks of the regularity conditions behind exponential
consistency, evaluated on simulated linear-mixed-model data.

    python demos/04_regularity_checks.py
"""
import numpy as np

from robustglmm import SimConfig, fit_lmm, simulate
from robustglmm import diagnostics as dg

data = simulate(SimConfig.lmm_default(), 0, n=100)
point = fit_lmm(data).point

print(dg.check_B1(data, point).line())
print(dg.check_A3(data, point).line())
print(dg.check_A3(data, point, alpha=0.5, mc_draws=2000).line())

# B3 is a per-group rank-one perturbation of X'V^-1X and fails once alpha is
# large compared with the inverse squared residual size.
for alpha in (0.01, 0.05, 0.1, 0.5):
    print(f"alpha={alpha:<5}", dg.check_B3(data, point, alpha).line())
print("first violating alpha:",
      dg.b3_first_violation(data, point, [0.001, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0]))

V = dg.marginal_covariances(data, point)[:5]
print(dg.check_B4(V).line())
print(dg.check_B5(V, alpha=0.5, mc_draws=5000).line())

# The beta block of the MDPDE information has a closed form; compare with
# the Monte-Carlo estimate.
est = dg.mdpde_information_lmm(data, point, 0.5, mc_draws=2000)
z = np.abs(est.matrix[:5, :5] - est.closed_form_beta) / est.se[:5, :5]
print(f"closed form vs Monte Carlo: max deviation {z.max():.2f} standard errors")
