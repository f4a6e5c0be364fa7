"""
Random-intercept logistic regression. The marginal likelihood of each group
is a one-dimensional integral over the random effect, evaluated with
adaptive Gauss-Hermite quadrature.

    python demos/03_logistic_quadrature.py
"""
import numpy as np

from robustglmm import EstimatorSpec, ParameterPoint, SimConfig, simulate
from robustglmm.logistic import (fit_logistic, gh_rule, logistic_mle_loss,
                                 outcome_log_marginals)

cfg = SimConfig.logistic_default()
data = simulate(cfg, 0, n=300)
truth = ParameterPoint(np.array(cfg.beta0), None, np.array([cfg.sigma_u_sq]))

# Quadrature order: the loss settles quickly once the nodes are recentred.
for K in (2, 5, 10, 20, 40):
    print(f"K={K:>2}  loss at truth {logistic_mle_loss(data, truth, gh_rule(K)):.12f}")

# The marginal probabilities of all 2^6 response patterns sum to one.
total = np.exp(outcome_log_marginals(data, truth, adaptive=True)).sum(axis=1)
print("max |sum_y f(y) - 1| over groups:", float(np.abs(total - 1).max()))

for est in (EstimatorSpec.mle(), EstimatorSpec.mdpde(0.5)):
    fit = fit_logistic(data, est)
    print(f"{est.label:<18} beta={np.round(fit.point.beta, 3)}  "
          f"sigma_u_sq={fit.point.g_params[0]:.3f}  iterations={fit.iterations}")
