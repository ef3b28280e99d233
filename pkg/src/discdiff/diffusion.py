"""Forward perturbation, reverse-step arithmetic, and the sampling loop.

Grids may be numpy arrays or torch tensors; coefficients are looked up as
python floats for a scalar step ``t`` and broadcast per-sample when ``t``
is a sequence (one entry per leading batch element). All randomness comes
from explicitly passed generators; there is no hidden global state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .schedule import NoiseSchedule

RANGE_SLACK = 1e-6


@dataclass(frozen=True)
class ConditionPair:
    """The two conditioning grids: zero-filled low-res image and an
    auxiliary contrast of the same scene, both in the normalized range."""

    lr_image: object
    aux_contrast: object

    def __post_init__(self):
        if tuple(self.lr_image.shape) != tuple(self.aux_contrast.shape):
            raise ValueError(
                f"condition grids disagree in shape: {tuple(self.lr_image.shape)}"
                f" vs {tuple(self.aux_contrast.shape)}"
            )
        for name, grid in (("lr_image", self.lr_image), ("aux_contrast", self.aux_contrast)):
            lo, hi = float(grid.min()), float(grid.max())
            if lo < -1.0 - RANGE_SLACK or hi > 1.0 + RANGE_SLACK:
                raise ValueError(
                    f"{name} values outside the normalized range [-1, 1]:"
                    f" min={lo}, max={hi}"
                )


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def _gather(table: np.ndarray, t, like):
    """Coefficient lookup in float64: a float for scalar t, a per-sample
    (B,) array for a sequence of steps. Derived coefficients should be
    computed at this precision and only then broadcast via ``_expand``."""
    if isinstance(t, (int, np.integer)):
        return float(table[t - 1])
    idx = np.asarray(t, dtype=np.int64) - 1
    if idx.ndim != 1 or len(idx) != like.shape[0]:
        raise ValueError(
            f"per-sample steps must be 1D with length {like.shape[0]}"
        )
    return table[idx]


def _expand(coef, like):
    """Broadcast a float64 coefficient against a grid, casting per-sample
    columns to the grid's dtype (a python float casts implicitly the same
    way, so scalar and per-sample paths agree bitwise)."""
    if isinstance(coef, (float, np.floating)):
        return float(coef)
    shape = (len(coef),) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(coef, dtype=like.dtype, device=like.device).view(shape)
    return coef.reshape(shape)


def _check_steps(t, schedule: NoiseSchedule) -> None:
    if isinstance(t, (int, np.integer)):
        schedule.check_step(int(t))
    else:
        arr = np.asarray(t)
        if arr.size == 0 or arr.min() < 1 or arr.max() > schedule.T:
            raise ValueError(
                f"step indices out of range [1, {schedule.T}]"
            )


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Perturb x0 to step t in closed form:
    sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_shapes(x0, eps, "q_sample")
    _check_steps(t, schedule)
    abar = _gather(schedule.alpha_bars, t, x0)
    return _expand(np.sqrt(abar), x0) * x0 + _expand(np.sqrt(1.0 - abar), x0) * eps


def q_posterior_mean(x0, x_t, t, schedule: NoiseSchedule):
    """Mean of the forward posterior q(x_{t-1} | x_t, x_0)."""
    _check_shapes(x0, x_t, "q_posterior_mean")
    _check_steps(t, schedule)
    abar = _gather(schedule.alpha_bars, t, x_t)
    prev = np.concatenate([[1.0], schedule.alpha_bars[:-1]])
    abar_prev = _gather(prev, t, x_t)
    alpha = _gather(schedule.alphas, t, x_t)
    beta = _gather(schedule.betas, t, x_t)
    coef_x0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    coef_xt = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    return _expand(coef_x0, x_t) * x0 + _expand(coef_xt, x_t) * x_t


def posterior_mean_from_eps(x_t, eps_pred, t, schedule: NoiseSchedule):
    """Reverse-step Gaussian mean from a noise prediction:
    (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)."""
    _check_shapes(x_t, eps_pred, "posterior_mean_from_eps")
    _check_steps(t, schedule)
    beta = _gather(schedule.betas, t, x_t)
    alpha = _gather(schedule.alphas, t, x_t)
    abar = _gather(schedule.alpha_bars, t, x_t)
    coef_eps = beta / np.sqrt(1.0 - abar)
    return (x_t - _expand(coef_eps, x_t) * eps_pred) / _expand(np.sqrt(alpha), x_t)


def log_variance_from_vpred(v_pred, t, schedule: NoiseSchedule):
    """Log reverse-step variance as the interpolation
    v * log(beta_t) + (1 - v) * log(btilde_t), with the first-step lower
    endpoint clamped (the step-1 posterior variance is exactly 0)."""
    _check_steps(t, schedule)
    v_vals = v_pred.detach() if isinstance(v_pred, torch.Tensor) else v_pred
    vmin = float(v_vals.min())
    vmax = float(v_vals.max())
    if vmin < -RANGE_SLACK or vmax > 1.0 + RANGE_SLACK:
        raise ValueError(
            f"v_pred values outside [0, 1]: min={vmin}, max={vmax}"
        )
    log_upper = _expand(_gather(np.log(schedule.betas), t, v_pred), v_pred)
    log_lower = _expand(
        _gather(schedule.clipped_posterior_log_variances(), t, v_pred), v_pred
    )
    return v_pred * log_upper + (1.0 - v_pred) * log_lower


def variance_from_vpred(v_pred, t, schedule: NoiseSchedule):
    """Reverse-step variance from the interpolation coefficient in [0, 1]."""
    logvar = log_variance_from_vpred(v_pred, t, schedule)
    return torch.exp(logvar) if isinstance(logvar, torch.Tensor) else np.exp(logvar)


def split_model_output(output):
    """Accept either a (eps, v) pair or an object with eps_pred / v_pred."""
    if isinstance(output, tuple):
        eps_pred, v_pred = output
        return eps_pred, v_pred
    return output.eps_pred, output.v_pred


def p_sample_step(
    x_t: torch.Tensor,
    cond: ConditionPair,
    t: int,
    model: Callable,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """One ancestral reverse step x_t -> x_{t-1}.

    The model is called with the parent schedule's step index (so respaced
    sampling conditions the network on the timesteps it was trained with).
    No noise is injected at the final step t = 1.
    """
    schedule.check_step(t)
    model_t = int(schedule.original_indices[t - 1])
    output = model(x_t, cond.lr_image, cond.aux_contrast, model_t)
    eps_pred, v_pred = split_model_output(output)
    _check_shapes(x_t, eps_pred, "p_sample_step")
    mean = posterior_mean_from_eps(x_t, eps_pred, t, schedule)
    if t == 1:
        return mean
    if v_pred is None:
        sigma = np.sqrt(float(schedule.posterior_variances[t - 1]))
    else:
        sigma = torch.sqrt(variance_from_vpred(v_pred, t, schedule))
    z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
    return mean + sigma * z


def sample_hr(
    cond: ConditionPair,
    model: Callable,
    schedule: NoiseSchedule,
    k: int,
    rng: torch.Generator | int,
    chain_seeds: Sequence[int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> np.ndarray:
    """Draw k restorations by running k independent reverse chains.

    Each chain gets its own generator seeded either from ``chain_seeds`` or
    from k draws off ``rng``, so results do not depend on execution order.
    Outputs are clamped to [-1, 1]; shape (k, H, W).
    """
    if k < 1:
        raise ValueError(f"sample count must be >= 1, got {k}")
    if isinstance(rng, int):
        base = torch.Generator().manual_seed(rng)
    else:
        base = rng
    if chain_seeds is None:
        chain_seeds = torch.randint(
            0, 2**62, (k,), generator=base, dtype=torch.int64
        ).tolist()
    elif len(chain_seeds) != k:
        raise ValueError(f"expected {k} chain seeds, got {len(chain_seeds)}")

    height, width = tuple(cond.lr_image.shape)[-2:]
    y = torch.as_tensor(np.asarray(cond.lr_image), dtype=dtype).reshape(1, 1, height, width)
    v = torch.as_tensor(np.asarray(cond.aux_contrast), dtype=dtype).reshape(1, 1, height, width)
    cond4d = ConditionPair(y, v)

    out = np.empty((k, height, width), dtype=np.float32)
    for i, seed in enumerate(chain_seeds):
        g = torch.Generator().manual_seed(int(seed))
        x = torch.randn((1, 1, height, width), generator=g, dtype=dtype)
        with torch.no_grad():
            for t in range(schedule.T, 0, -1):
                x = p_sample_step(x, cond4d, t, model, schedule, g)
        out[i] = x.clamp(-1.0, 1.0).numpy()[0, 0]
    return out
