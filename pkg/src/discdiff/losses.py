"""Training objective: disentanglement ratio, Charbonnier penalty, and the
variational term for learned reverse-process variances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch

from . import diffusion
from .schedule import NoiseSchedule

if TYPE_CHECKING:
    from .unet import Representations


@dataclass(frozen=True)
class LossWeights:
    """Weights and constants of the joint objective.

    ``lambda1 = 0`` switches the disentanglement term off (the ablation
    configuration); otherwise both lambdas live in (0, 1].
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma: float = 1e-3
    vlb_weight: float = 1e-3
    eps_div: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0 or not 0.0 <= self.lambda2 <= 1.0:
            raise ValueError("loss weights must lie in [0, 1]")
        if self.gamma <= 0.0 or self.eps_div <= 0.0:
            raise ValueError("gamma and eps_div must be positive")
        if self.vlb_weight < 0.0:
            raise ValueError("vlb_weight must be nonnegative")


def _flat_norms(diff: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over everything but an optional leading batch dim."""
    if diff.ndim == 3:
        diff = diff.unsqueeze(0)
    return diff.flatten(start_dim=1).norm(dim=1)


def disentanglement_loss(reps: "Representations", eps_div: float = 1e-8) -> torch.Tensor:
    """Ratio of summed pairwise distances between the raw shared blocks to
    those between the raw independent blocks, per sample, averaged."""
    pairs_shared = (
        (reps.shared_noisy, reps.shared_lowres),
        (reps.shared_noisy, reps.shared_aux),
        (reps.shared_lowres, reps.shared_aux),
    )
    pairs_indep = (
        (reps.indep_noisy, reps.indep_lowres),
        (reps.indep_noisy, reps.indep_aux),
        (reps.indep_lowres, reps.indep_aux),
    )
    for a, b in pairs_shared + pairs_indep:
        if a.shape != b.shape:
            raise ValueError(
                f"representation blocks disagree in shape: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
    numerator = sum(_flat_norms(a - b) for a, b in pairs_shared)
    denominator = sum(_flat_norms(a - b) for a, b in pairs_indep)
    return (numerator / (denominator + eps_div)).mean()


def charbonnier_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor, gamma: float) -> torch.Tensor:
    """Smooth robust penalty sqrt(d^2 + gamma^2), averaged over elements."""
    if eps_pred.shape != eps_true.shape:
        raise ValueError(
            f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}"
        )
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    d = eps_pred - eps_true
    return torch.sqrt(d * d + gamma * gamma).mean()


def squared_error_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared difference; drop-in ablation replacement for the
    Charbonnier penalty."""
    if eps_pred.shape != eps_true.shape:
        raise ValueError(
            f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}"
        )
    d = eps_pred - eps_true
    return (d * d).mean()


def normal_kl(mean1, logvar1, mean2, logvar2):
    """KL divergence between two diagonal Gaussians, elementwise, in nats."""
    mean1, logvar1, mean2, logvar2 = (
        torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
        for x in (mean1, logvar1, mean2, logvar2)
    )
    return 0.5 * (
        logvar2
        - logvar1
        + torch.exp(logvar1 - logvar2)
        + (mean1 - mean2) ** 2 * torch.exp(-logvar2)
        - 1.0
    )


def _standard_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def discretized_gaussian_log_likelihood(
    x: torch.Tensor,
    means: torch.Tensor,
    log_scales: torch.Tensor,
    bin_halfwidth: float = 1.0 / 255.0,
) -> torch.Tensor:
    """Log-likelihood of values in [-1, 1] under a Gaussian discretized to
    intensity bins of width 2 * bin_halfwidth; edge bins absorb the tails."""
    centered = x - means
    inv_stdv = torch.exp(-log_scales)
    cdf_plus = _standard_normal_cdf(inv_stdv * (centered + bin_halfwidth))
    cdf_min = _standard_normal_cdf(inv_stdv * (centered - bin_halfwidth))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    return torch.where(
        x < -0.999,
        log_cdf_plus,
        torch.where(x > 0.999, log_one_minus_cdf_min, log_delta),
    )


def vlb_variance_loss(
    x0: torch.Tensor,
    x_t: torch.Tensor,
    t,
    model_output,
    schedule: NoiseSchedule,
    detach_mean: bool = True,
) -> torch.Tensor:
    """Variational term that trains the learned reverse-process variance.

    For steps t > 1 this is the KL between the forward posterior
    q(x_{t-1} | x_t, x_0) and the model's reverse Gaussian; at t = 1 it is
    the discretized negative log-likelihood of x0. With ``detach_mean`` the
    model mean is treated as a constant so only the variance head trains.
    """
    eps_pred, v_pred = diffusion.split_model_output(model_output)
    if v_pred is None:
        raise ValueError(
            "model output carries no variance prediction; enable learn_variance"
        )
    true_mean = diffusion.q_posterior_mean(x0, x_t, t, schedule)
    # The step-1 entry of the true posterior variance is exactly 0; use the
    # clipped table as a finite placeholder (those elements take the NLL
    # branch, but torch.where still evaluates both sides).
    true_logvar = diffusion._expand(
        diffusion._gather(schedule.clipped_posterior_log_variances(), t, x_t),
        x_t,
    )
    model_mean = diffusion.posterior_mean_from_eps(x_t, eps_pred, t, schedule)
    if detach_mean:
        model_mean = model_mean.detach()
    model_logvar = diffusion.log_variance_from_vpred(v_pred, t, schedule)

    kl = normal_kl(true_mean, true_logvar, model_mean, model_logvar)
    nll = -discretized_gaussian_log_likelihood(x0, model_mean, 0.5 * model_logvar)

    if isinstance(t, (int, np.integer)):
        return (nll if t == 1 else kl).mean()
    t_arr = torch.as_tensor(np.asarray(t), device=x_t.device)
    is_first = (t_arr == 1).view((-1,) + (1,) * (x_t.ndim - 1))
    return torch.where(is_first, nll, kl).mean()


def total_loss(
    reps: "Representations",
    eps_pred: torch.Tensor,
    eps_true: torch.Tensor,
    weights: LossWeights,
    vlb_term: torch.Tensor | None = None,
    use_mse: bool = False,
) -> torch.Tensor:
    """Weighted sum of the component losses."""
    if use_mse:
        recon = squared_error_loss(eps_pred, eps_true)
    else:
        recon = charbonnier_loss(eps_pred, eps_true, weights.gamma)
    out = weights.lambda1 * disentanglement_loss(reps, weights.eps_div) + weights.lambda2 * recon
    if vlb_term is not None:
        out = out + weights.vlb_weight * vlb_term
    return out
