"""Shared independent oracles used across the test suite.

These deliberately avoid the package's own arithmetic: quadrature instead
of closed forms, direct formula transcriptions instead of library calls.
"""

from __future__ import annotations

import math

import numpy as np


def reverse_mean_quadrature(
    x_t: float,
    t: int,
    schedule,
    prior_mean: float,
    prior_std: float,
    n_points: int = 40001,
) -> float:
    """E[x_{t-1} | x_t] for a scalar Gaussian prior on x0, by trapezoid
    integration of the one-step posterior mean against the numerically
    normalized density q(x0 | x_t)."""
    abar = float(schedule.alpha_bars[t - 1])
    abar_prev = float(schedule.alpha_bars[t - 2]) if t > 1 else 1.0
    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])

    like_center = x_t / math.sqrt(abar)
    like_std = math.sqrt((1.0 - abar) / abar)
    lo = min(prior_mean - 12 * prior_std, like_center - 12 * like_std)
    hi = max(prior_mean + 12 * prior_std, like_center + 12 * like_std)
    x0 = np.linspace(lo, hi, n_points)

    log_w = -((x_t - math.sqrt(abar) * x0) ** 2) / (2.0 * (1.0 - abar))
    log_w -= (x0 - prior_mean) ** 2 / (2.0 * prior_std**2)
    w = np.exp(log_w - log_w.max())

    # One-step posterior mean of q(x_{t-1} | x_t, x0), written out directly.
    coef_x0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    coef_xt = math.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    integrand = coef_x0 * x0 + coef_xt * x_t
    return float(np.trapezoid(integrand * w, x0) / np.trapezoid(w, x0))


def optimal_eps_prediction(
    x_t: float, t: int, schedule, prior_mean: float, prior_std: float
) -> float:
    """E[eps | x_t] for a scalar Gaussian prior: the conditional mean of a
    jointly Gaussian pair, mapped through x0 = (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    abar = float(schedule.alpha_bars[t - 1])
    var_xt = abar * prior_std**2 + (1.0 - abar)
    x0_hat = prior_mean + math.sqrt(abar) * prior_std**2 / var_xt * (
        x_t - math.sqrt(abar) * prior_mean
    )
    return (x_t - math.sqrt(abar) * x0_hat) / math.sqrt(1.0 - abar)


def clipped_normal_mean(mu: float, sigma: float, lo: float, hi: float) -> float:
    """Mean of clip(X, lo, hi) for X ~ N(mu, sigma^2)."""

    def cdf(z):
        return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))

    def pdf(z):
        return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)

    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    return (
        lo * cdf(a)
        + hi * (1.0 - cdf(b))
        + mu * (cdf(b) - cdf(a))
        - sigma * (pdf(b) - pdf(a))
    )
